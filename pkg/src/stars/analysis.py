"""Single-layer rate analysis: effective thresholds, tail masses, and
moment-matched distributions that nonetheless fire differently.

All distribution functions are exact (closed forms or finite sums); the
only approximation lives in ``monte_carlo_rate``, which simulates the LIF
recursion directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .rng import stream
from .snn import LIFConfig, simulate_constant


@dataclass(frozen=True)
class RateSetup:
    tau: float = 2.0
    v_th: float = 1.0
    steps: int = 4

    def __post_init__(self):
        if not self.tau >= 1.0 or not self.v_th > 0 or self.steps < 1:
            raise ValueError(f"invalid rate setup {self}")

    def thresholds(self) -> np.ndarray:
        return np.array([effective_threshold(t, self) for t in range(1, self.steps + 1)])

    def lif(self) -> LIFConfig:
        return LIFConfig(tau=self.tau, v_th=self.v_th, v_reset=0.0, steps=self.steps)


def beta(t: int, tau: float) -> float:
    """Fraction of a constant input integrated after ``t`` steps: 1-(1-1/τ)^t."""
    if t < 1 or tau < 1.0:
        raise ValueError(f"beta needs t >= 1 and tau >= 1, got t={t}, tau={tau}")
    return 1.0 - (1.0 - 1.0 / tau) ** t


def effective_threshold(t: int, setup: RateSetup) -> float:
    return setup.v_th / beta(t, setup.tau)


def std_normal_cdf(x: float) -> float:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# ---- distributions -------------------------------------------------------------
class Distribution:
    """1-D activation distribution. ``cdf`` is P(a <= x); ``survival`` is P(a >= x)."""

    kind = "abstract"

    def cdf(self, x: float) -> float:
        raise NotImplementedError

    def cdf_left(self, x: float) -> float:
        """P(a < x)."""
        raise NotImplementedError

    def survival(self, x: float) -> float:
        return 1.0 - self.cdf_left(x)

    def mean(self) -> float:
        raise NotImplementedError

    def variance(self) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def atoms(self) -> list[tuple[float, float]] | None:
        """(location, mass) pairs for purely discrete distributions."""
        return None


@dataclass(frozen=True)
class Gaussian(Distribution):
    mu: float
    var: float
    kind = "gaussian"

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"gaussian variance must be positive, got {self.var}")

    def cdf(self, x):
        return std_normal_cdf((x - self.mu) / math.sqrt(self.var))

    cdf_left = cdf

    def survival(self, x):
        return std_normal_cdf((self.mu - x) / math.sqrt(self.var))

    def mean(self):
        return self.mu

    def variance(self):
        return self.var

    def sample(self, rng, n):
        return self.mu + math.sqrt(self.var) * rng.standard_normal(n)

    def describe(self):
        return f"gaussian(mu={self.mu!r}, var={self.var!r})"


@dataclass(frozen=True)
class TwoPoint(Distribution):
    x1: float
    p1: float
    x2: float
    kind = "two_point"

    def __post_init__(self):
        if not 0.0 <= self.p1 <= 1.0:
            raise ValueError(f"p1 must lie in [0, 1], got {self.p1}")
        if self.x1 == self.x2:
            raise ValueError("two_point atoms must differ")

    @property
    def p2(self):
        return 1.0 - self.p1

    def atoms(self):
        return [(self.x1, self.p1), (self.x2, self.p2)]

    def cdf(self, x):
        return sum(p for a, p in self.atoms() if a <= x)

    def cdf_left(self, x):
        return sum(p for a, p in self.atoms() if a < x)

    def survival(self, x):
        return sum(p for a, p in self.atoms() if a >= x)

    def mean(self):
        return self.p1 * self.x1 + self.p2 * self.x2

    def variance(self):
        return self.p1 * self.p2 * (self.x1 - self.x2) ** 2

    def sample(self, rng, n):
        return np.where(rng.random(n) < self.p1, self.x1, self.x2)

    def describe(self):
        return f"two_point(x1={self.x1!r}, p1={self.p1!r}, x2={self.x2!r})"


@dataclass(frozen=True)
class PointMixture(Distribution):
    """(1 - eps)·base + eps·δ_atom."""

    base: Distribution
    eps: float
    atom: float
    kind = "point_mixture"

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"mixture weight must lie in (0, 1), got {self.eps}")

    def cdf(self, x):
        return (1.0 - self.eps) * self.base.cdf(x) + self.eps * (self.atom <= x)

    def cdf_left(self, x):
        return (1.0 - self.eps) * self.base.cdf_left(x) + self.eps * (self.atom < x)

    def survival(self, x):
        return (1.0 - self.eps) * self.base.survival(x) + self.eps * (self.atom >= x)

    def mean(self):
        return (1.0 - self.eps) * self.base.mean() + self.eps * self.atom

    def variance(self):
        m = self.mean()
        second_base = self.base.variance() + self.base.mean() ** 2
        return (1.0 - self.eps) * second_base + self.eps * self.atom**2 - m * m

    def atoms(self):
        inner = self.base.atoms()
        if inner is None:
            return None
        return [(a, (1.0 - self.eps) * p) for a, p in inner] + [(self.atom, self.eps)]

    def sample(self, rng, n):
        pick = rng.random(n) < self.eps
        return np.where(pick, self.atom, self.base.sample(rng, n))

    def describe(self):
        return f"point_mixture(eps={self.eps!r}, atom={self.atom!r}, base={self.base.describe()})"


class Empirical(Distribution):
    kind = "empirical"

    def __init__(self, samples: Sequence[float]):
        arr = np.sort(np.asarray(samples, dtype=np.float64))
        if arr.size == 0:
            raise ValueError("empirical distribution needs at least one sample")
        self.samples = arr

    def cdf(self, x):
        return np.searchsorted(self.samples, x, side="right") / self.samples.size

    def cdf_left(self, x):
        return np.searchsorted(self.samples, x, side="left") / self.samples.size

    def mean(self):
        return float(self.samples.mean())

    def variance(self):
        return float(self.samples.var())

    def atoms(self):
        vals, counts = np.unique(self.samples, return_counts=True)
        return [(float(v), c / self.samples.size) for v, c in zip(vals, counts)]

    def sample(self, rng, n):
        return self.samples[rng.integers(self.samples.size, size=n)]

    def describe(self):
        return f"empirical(n={self.samples.size})"


def moments(dist: Distribution) -> tuple[float, float]:
    return dist.mean(), dist.variance()


# ---- rate functional -------------------------------------------------------------
def rate_functional(dist: Distribution, setup: RateSetup) -> float:
    """Expected firing rate (1/T)·Σ_t P(a >= θ_t) under the subthreshold approximation."""
    return float(np.mean([dist.survival(th) for th in setup.thresholds()]))


def rate_gap(p: Distribution, q: Distribution, setup: RateSetup) -> float:
    """R_T(P) - R_T(Q) written as the mean CDF difference at the thresholds."""
    return float(np.mean([q.cdf_left(th) - p.cdf_left(th) for th in setup.thresholds()]))


def moment_matched_pair(mu: float, var: float, family: str = "gaussian_vs_two_point", delta: float | None = None,
                        eps: float | None = None) -> tuple[Distribution, Distribution]:
    """Two distributions with mean ``mu`` and variance ``var`` but different shapes.

    ``gaussian_vs_two_point``: N(mu, var) and atoms mu ± sqrt(var) at 1/2 each.
    ``base_vs_variance_preserving_mixture``: N(mu, var) and
    (1-eps)·N(mu, s²) + (eps/2)·δ(mu-delta) + (eps/2)·δ(mu+delta), with s² solved
    so the variance stays ``var``.
    """
    if not var > 0:
        raise ValueError(f"variance must be positive, got {var}")
    p = Gaussian(mu, var)
    sd = math.sqrt(var)
    if family == "gaussian_vs_two_point":
        q: Distribution = TwoPoint(mu - sd, 0.5, mu + sd)
    elif family == "base_vs_variance_preserving_mixture":
        if delta is None or eps is None:
            raise ValueError("mixture family needs delta and eps")
        if not 0.0 < eps < 1.0 or not delta > 0:
            raise ValueError(f"need 0 < eps < 1 and delta > 0, got eps={eps}, delta={delta}")
        inner_var = (var - eps * delta**2) / (1.0 - eps)
        if not inner_var > 0:
            raise ValueError(f"infeasible: eps·delta² = {eps * delta ** 2} must stay below var = {var}")
        half = eps / 2.0
        # nested point mixtures give weights (1-eps, eps/2, eps/2)
        left = PointMixture(Gaussian(mu, inner_var), half / (1.0 - half), mu - delta)
        q = PointMixture(left, half, mu + delta)
    else:
        raise ValueError(f"unknown family {family!r}")
    for d in (p, q):
        m, v = moments(d)
        if abs(m - mu) > 1e-12 * max(1.0, abs(mu)) or abs(v - var) > 1e-12 * max(1.0, var):
            raise ContractError(f"moment check failed for {d.describe()}: mean {m}, var {v}")
    return p, q


@dataclass(frozen=True)
class ShiftResult:
    kind: str  # under_firing | over_firing | neither
    rate_s: float
    rate_r: float
    cdf_s: tuple[float, ...]
    cdf_r: tuple[float, ...]


def check_shift(p_s: Distribution, p_r: Distribution, setup: RateSetup) -> ShiftResult:
    """Classify P_s against P_r by comparing CDFs at every effective threshold.

    A classification always comes with the matching strict rate inequality;
    a violation raises ``ContractError``.
    """
    ths = setup.thresholds()
    fs = tuple(p_s.cdf_left(th) for th in ths)
    fr = tuple(p_r.cdf_left(th) for th in ths)
    rs, rr = rate_functional(p_s, setup), rate_functional(p_r, setup)
    if all(a >= b for a, b in zip(fs, fr)) and any(a > b for a, b in zip(fs, fr)):
        kind = "under_firing"
        if not rs < rr:
            raise ContractError(f"under-firing shift without lower rate: {rs} vs {rr}")
    elif all(a <= b for a, b in zip(fs, fr)) and any(a < b for a, b in zip(fs, fr)):
        kind = "over_firing"
        if not rs > rr:
            raise ContractError(f"over-firing shift without higher rate: {rs} vs {rr}")
    else:
        kind = "neither"
    return ShiftResult(kind, rs, rr, fs, fr)


def monte_carlo_rate(dist: Distribution, setup: RateSetup, n_samples: int = 100_000, seed: int = 0,
                     reset: bool = True) -> tuple[float, float]:
    """Mean firing rate and its standard error from simulating the LIF recursion.

    ``reset=False`` keeps integrating after spikes, which is the regime the
    analytic rate describes.
    """
    if n_samples < 1000:
        raise ValueError("monte_carlo_rate needs at least 1000 samples")
    rng = stream(seed, "analysis.monte_carlo")
    a = dist.sample(rng, n_samples)
    _, spikes = simulate_constant(a, setup.lif(), reset=reset)
    per_sample = spikes.mean(axis=0)
    se = float(per_sample.std(ddof=1) / math.sqrt(n_samples))
    return float(per_sample.mean()), se


def random_ordered_pairs(n: int, seed: int, setup: RateSetup) -> list[tuple[Distribution, Distribution, str]]:
    """Pairs (synthetic, reference, expected label) ordered strictly on the threshold grid.

    Odd indices are over-firing, even ones under-firing. Three constructions
    rotate: a shifted gaussian, the reference mixed with an atom beyond every
    threshold, and a two-point law whose upper atom moves across the grid.
    """
    rng = stream(seed, "analysis.shift_pairs")
    ths = setup.thresholds()
    lo, hi = float(ths[-1]), float(ths[0])
    pairs = []
    for i in range(n):
        over = i % 2 == 1
        mu = float(rng.uniform(-1.0, 2.0))
        var = float(rng.uniform(0.25, 2.0))
        kind = int(rng.integers(3))
        if kind == 0:
            ref: Distribution = Gaussian(mu, var)
            shift = float(rng.uniform(0.1, 1.5))
            syn: Distribution = Gaussian(mu + shift if over else mu - shift, var)
        elif kind == 1:
            ref = Gaussian(mu, var)
            atom = hi + 50.0 if over else lo - 50.0
            syn = PointMixture(ref, float(rng.uniform(0.05, 0.5)), atom)
        else:
            x1, p1 = float(rng.uniform(-2.0, 0.0)), float(rng.uniform(0.2, 0.8))
            upper = float(rng.uniform(lo, hi)) if hi > lo else hi
            ref = TwoPoint(x1, p1, upper)
            moved = hi + float(rng.uniform(0.1, 1.0)) if over else lo - float(rng.uniform(0.1, 1.0))
            syn = TwoPoint(x1, p1, moved)
        pairs.append((syn, ref, "over_firing" if over else "under_firing"))
    return pairs


# ---- report ---------------------------------------------------------------------
def analysis_report(setup: RateSetup, seed: int = 0, n_samples: int = 100_000, n_shift_pairs: int = 20) -> dict:
    """Tables behind the ``analyze`` command."""
    thresholds = [{"t": t, "beta": beta(t, setup.tau), "theta": effective_threshold(t, setup)}
                  for t in range(1, setup.steps + 1)]
    p, q = moment_matched_pair(0.0, 1.0, "gaussian_vs_two_point")
    mp, mq = moment_matched_pair(0.0, 1.0, "base_vs_variance_preserving_mixture", delta=2.0, eps=0.1)
    pairs = []
    for name, (a, b) in {"gaussian_vs_two_point": (p, q), "gaussian_vs_mixture": (mp, mq)}.items():
        pairs.append({"pair": name, "P": a.describe(), "Q": b.describe(),
                      "mean_P": a.mean(), "var_P": a.variance(), "mean_Q": b.mean(), "var_Q": b.variance(),
                      "R_P": rate_functional(a, setup), "R_Q": rate_functional(b, setup),
                      "gap": rate_gap(a, b, setup)})
    rates = []
    for name, dist in {"N(0,1)": p, "two_point(+-1)": q, "mixture": mq, "N(3,0.25)": Gaussian(3.0, 0.25)}.items():
        analytic = rate_functional(dist, setup)
        sim_nr, se_nr = monte_carlo_rate(dist, setup, n_samples, seed, reset=False)
        sim, se = monte_carlo_rate(dist, setup, n_samples, seed, reset=True)
        rates.append({"distribution": name, "analytic": analytic,
                      "mc_no_reset": sim_nr, "se_no_reset": se_nr,
                      "mc_reset": sim, "se_reset": se, "reset_discrepancy": sim - analytic})
    shifts = []
    for i, (syn, ref, expected) in enumerate(random_ordered_pairs(n_shift_pairs, seed, setup)):
        res = check_shift(syn, ref, setup)
        shifts.append({"pair": i, "synthetic": syn.describe(), "reference": ref.describe(), "expected": expected,
                       "classified": res.kind, "R_s": res.rate_s, "R_r": res.rate_r})
    return {"thresholds": thresholds, "pairs": pairs, "rates": rates, "shifts": shifts}
