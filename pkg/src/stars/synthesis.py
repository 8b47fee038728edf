"""Synthetic-batch optimisation with BN matching plus RCA and TAR.

The batch is the only free variable: teacher and student parameters are
frozen for the duration of a call.  The objective is

    L_cls + λ_bn·L_bn + λ_reg·R + λ_rca·L_rca + λ_tar·L_tar

and the last two terms are skipped entirely (no student forward) when their
weights are zero, so the BN-only objective is reproduced exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericalError, ShapeError
from .nets import TeacherNet, cross_entropy
from .optim import Adam
from .rng import stream
from .snn import LIFConfig, StudentNet, student_forward

log = logging.getLogger(__name__)

DEFAULT_QUANTILES = (0.60, 0.70, 0.80, 0.90, 0.95)
NORM_EPS = 1e-12
LOSS_KEYS = ("L_cls", "L_BN", "L_reg", "L_RCA", "L_TAR", "L_total")


@dataclass(frozen=True)
class SynthesisConfig:
    lambda_bn: float = 1.0
    lambda_reg: float = 1e-3
    lambda_rca: float = 1.0
    lambda_tar: float = 1.0
    steps: int = 200
    step_size: float = 0.1
    batch_size: int = 64
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    delta: float = 0.5
    layer_weights: tuple[float, ...] | None = None
    threshold_mode: str = "quantile"
    fixed_thresholds: tuple[float, ...] | None = None
    tar_norm: str = "batch"
    init_scale: float = 0.5

    def __post_init__(self):
        for name in ("lambda_bn", "lambda_reg", "lambda_rca", "lambda_tar"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.steps < 0 or self.step_size <= 0:
            raise ValueError("steps must be >= 0 and step_size > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        q = tuple(float(v) for v in self.quantiles)
        if not q or any(not 0.0 < v < 1.0 for v in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError(f"quantiles must be strictly increasing in (0, 1), got {q}")
        object.__setattr__(self, "quantiles", q)
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.threshold_mode not in ("quantile", "fixed"):
            raise ValueError(f"threshold_mode must be 'quantile' or 'fixed', got {self.threshold_mode!r}")
        if self.threshold_mode == "fixed":
            if not self.fixed_thresholds:
                raise ValueError("fixed threshold mode needs fixed_thresholds")
            object.__setattr__(self, "fixed_thresholds", tuple(sorted(float(v) for v in self.fixed_thresholds)))
        if self.tar_norm not in ("batch", "running"):
            raise ValueError(f"tar_norm must be 'batch' or 'running', got {self.tar_norm!r}")
        if self.layer_weights is not None:
            object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))

    @property
    def uses_student(self) -> bool:
        return self.lambda_rca > 0 or self.lambda_tar > 0


@dataclass
class SyntheticBatch:
    inputs: np.ndarray  # [B×D]
    labels: np.ndarray  # [B]

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0] or self.inputs.shape[0] < 2:
            raise ContractError("synthetic batch needs B >= 2 inputs with one label each")


@dataclass
class LayerThresholds:
    center: float
    scale: float
    thetas: np.ndarray  # [M], ascending, in normalized coordinates

    def normalize(self, z: Tensor) -> Tensor:
        return ad.scalar_mul(ad.add_scalar(z, -self.center), 1.0 / (self.scale + NORM_EPS))


ThresholdSet = list  # list[LayerThresholds], one per selected layer


@dataclass
class SynthesisResult:
    batch: SyntheticBatch
    trace: list[dict] = field(default_factory=list)


# ---- pooled features -----------------------------------------------------------
def pooled_features(f_teacher: Tensor, f_student: Tensor) -> tuple[Tensor, Tensor]:
    """Teacher [B×C(×N)] averaged over N; student [T×B×C(×N)] over T and N."""
    if f_student.size == 0 or f_teacher.size == 0:
        raise ContractError("pooling over an empty time or spatial axis")
    if f_teacher.data.ndim == 2:
        z_t = f_teacher
    elif f_teacher.data.ndim == 3:
        z_t = ad.mean(f_teacher, axis=2)
    else:
        raise ShapeError(f"teacher feature must be [B×C] or [B×C×N], got {f_teacher.shape}")
    if f_student.data.ndim == 3:
        axes = 0
    elif f_student.data.ndim == 4:
        axes = (0, 3)
    else:
        raise ShapeError(f"student feature must be [T×B×C] or [T×B×C×N], got {f_student.shape}")
    z_s = ad.mean(f_student, axis=axes)
    if z_s.shape != z_t.shape:
        raise ShapeError(f"pooled teacher {z_t.shape} and student {z_s.shape} disagree")
    return z_t, z_s


# ---- teacher-side terms ----------------------------------------------------------
def loss_cls(teacher_logits: Tensor, labels) -> Tensor:
    return cross_entropy(teacher_logits, labels)


def batch_stats(pre_bn: list[Tensor]) -> list[tuple[Tensor, Tensor]]:
    return [(ad.mean(a, axis=0), ad.variance_biased(a, axis=0)) for a in pre_bn]


def loss_bn(stats: list[tuple[Tensor, Tensor]], running: list[tuple[np.ndarray, np.ndarray]]) -> Tensor:
    """Sum over layers of squared distances between batch and running moments."""
    if len(stats) != len(running):
        raise ContractError(f"{len(stats)} batch layers vs {len(running)} running layers")
    total = None
    for (mu, var), (r_mu, r_var) in zip(stats, running):
        term = ad.sum(ad.square(mu - Tensor(r_mu))) + ad.sum(ad.square(var - Tensor(r_var)))
        total = term if total is None else total + term
    return total


def loss_reg(inputs: Tensor) -> Tensor:
    """Mean squared l2 norm of the batch rows."""
    return ad.scalar_mul(ad.sum(ad.square(inputs)), 1.0 / inputs.shape[0])


# ---- RCA --------------------------------------------------------------------------
def _row_normalize(z: Tensor) -> Tensor:
    norms = ad.sqrt(ad.add_scalar(ad.sum(ad.square(z), axis=1), NORM_EPS**2))
    return z * ad.expand_cols(ad.power(norms, -1.0), z.shape[1])


def cosine_gram(z: Tensor) -> Tensor:
    zn = _row_normalize(z)
    return ad.matmul(zn, ad.transpose(zn))


def _weights(n: int, weights) -> list[float]:
    w = [1.0] * n if weights is None else [float(v) for v in weights]
    if len(w) != n:
        raise ContractError(f"{len(w)} layer weights for {n} layers")
    if sum(w) <= 0:
        raise ContractError("layer weights must have a positive sum")
    return w


def rca_layer(z_t: Tensor, z_s: Tensor) -> Tensor:
    b = z_t.shape[0]
    if b < 2:
        raise ContractError("RCA needs at least two samples")
    pairs = b * (b - 1) // 2
    mask = np.triu(np.ones((b, b)), k=1) / pairs
    diff = cosine_gram(z_s) - cosine_gram(z_t)
    return ad.sum(ad.square(diff) * Tensor(mask))


def rca_loss(z_teacher: list[Tensor], z_student: list[Tensor], weights=None) -> Tensor:
    """Weighted mean over layers of off-diagonal cosine-gram mismatch."""
    w = _weights(len(z_teacher), weights)
    total = None
    for wl, zt, zs in zip(w, z_teacher, z_student):
        term = ad.scalar_mul(rca_layer(zt, zs), wl)
        total = term if total is None else total + term
    return ad.scalar_mul(total, 1.0 / sum(w))


# ---- TAR --------------------------------------------------------------------------
def _running_center_scale(teacher: TeacherNet, tap: int) -> tuple[float, float]:
    # post-BN features at the running statistics have per-channel mean beta and std |gamma|
    bn = teacher.bns[tap]
    beta, gamma = bn.beta_bn.data, bn.gamma_bn.data
    center = float(beta.mean())
    scale = math.sqrt(float(np.mean(gamma**2) + beta.var()))
    return center, scale


def teacher_thresholds(z_teacher: list[Tensor], cfg: SynthesisConfig, centers_scales=None) -> ThresholdSet:
    """Per-layer normalization constants and thresholds in normalized units."""
    out = []
    for li, zt in enumerate(z_teacher):
        values = np.asarray(zt.data, dtype=np.float64).reshape(-1)
        if centers_scales is None:
            center, scale = float(values.mean()), float(values.std())
        else:
            center, scale = centers_scales[li]
        if scale < NORM_EPS:
            log.warning("layer %d: teacher features are constant; thresholds set to 0", li)
            m = len(cfg.fixed_thresholds) if cfg.threshold_mode == "fixed" else len(cfg.quantiles)
            out.append(LayerThresholds(center, scale, np.zeros(m)))
            continue
        if cfg.threshold_mode == "fixed":
            thetas = np.array(cfg.fixed_thresholds, dtype=np.float64)
        else:
            if values.size < len(cfg.quantiles):
                raise ContractError(f"{values.size} teacher values for {len(cfg.quantiles)} quantiles")
            normalized = (values - center) / (scale + NORM_EPS)
            thetas = np.quantile(normalized, cfg.quantiles, method="linear")
        out.append(LayerThresholds(center, scale, np.asarray(thetas, dtype=np.float64)))
    return out


def soft_exceedance(z_norm: Tensor, thetas: np.ndarray, delta: float) -> Tensor:
    """Mean of σ((z - θ_m)/δ) over all entries, for each threshold: shape [M]."""
    flat = ad.reshape(z_norm, (z_norm.size,))
    tiled = ad.expand_rows(flat, len(thetas))
    shifted = tiled - Tensor(np.broadcast_to(thetas[:, None], tiled.shape).copy())
    return ad.mean(ad.sigmoid(ad.scalar_mul(shifted, 1.0 / delta)), axis=1)


def tar_layer(z_t: Tensor, z_s: Tensor, th: LayerThresholds, delta: float) -> Tensor:
    p_t = soft_exceedance(th.normalize(z_t), th.thetas, delta)
    p_s = soft_exceedance(th.normalize(z_s), th.thetas, delta)
    return ad.mean(ad.square(p_s - p_t))


def tar_loss(z_teacher: list[Tensor], z_student: list[Tensor], thresholds: ThresholdSet, delta: float,
             weights=None) -> Tensor:
    w = _weights(len(z_teacher), weights)
    total = None
    for wl, zt, zs, th in zip(w, z_teacher, z_student, thresholds):
        term = ad.scalar_mul(tar_layer(zt, zs, th, delta), wl)
        total = term if total is None else total + term
    return ad.scalar_mul(total, 1.0 / sum(w))


# ---- objective ----------------------------------------------------------------------
def running_stats(teacher: TeacherNet) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(bn.running_mean, bn.running_var) for bn in teacher.bns]


def assigned_labels(batch_size: int, num_classes: int) -> np.ndarray:
    return np.arange(batch_size, dtype=np.int64) % num_classes


def initial_batch(cfg: SynthesisConfig, input_dim: int, seed: int, round_index: int = 0) -> np.ndarray:
    rng = stream(seed, "synthesis.init", round_index)
    return rng.standard_normal((cfg.batch_size, input_dim)) * cfg.init_scale


def dfkd_terms(teacher: TeacherNet, x: Tensor, labels, cfg: SynthesisConfig):
    """Teacher-side terms and their weighted sum, in a fixed summation order."""
    trace = teacher.forward(x, train=False)
    l_cls = loss_cls(trace.logits, labels)
    l_bn = loss_bn(batch_stats(trace.pre_bn), running_stats(teacher))
    l_reg = loss_reg(x)
    total = l_cls + ad.scalar_mul(l_bn, cfg.lambda_bn) + ad.scalar_mul(l_reg, cfg.lambda_reg)
    return trace, {"L_cls": l_cls, "L_BN": l_bn, "L_reg": l_reg}, total


def stars_terms(teacher: TeacherNet, trace, student: StudentNet, x: Tensor, cfg: SynthesisConfig,
                lif: LIFConfig, smooth: bool = False):
    """Pooled pre-activation features and the RCA / TAR terms."""
    out = student_forward(student, x, lif, smooth=smooth)
    pairs = [pooled_features(trace.pre_act[tap], fs) for tap, fs in zip(teacher.taps, out.features)]
    z_t = [p[0] for p in pairs]
    z_s = [p[1] for p in pairs]
    l_rca = rca_loss(z_t, z_s, cfg.layer_weights)
    norms = [_running_center_scale(teacher, tap) for tap in teacher.taps] if cfg.tar_norm == "running" else None
    thresholds = teacher_thresholds(z_t, cfg, norms)
    l_tar = tar_loss(z_t, z_s, thresholds, cfg.delta, cfg.layer_weights)
    return l_rca, l_tar


def objective(teacher: TeacherNet, student: StudentNet | None, x: Tensor, labels, cfg: SynthesisConfig,
              lif: LIFConfig, smooth: bool = False):
    """Return ``(total, components)``; components are floats keyed by LOSS_KEYS."""
    trace, parts, total = dfkd_terms(teacher, x, labels, cfg)
    comps = {k: v.item() for k, v in parts.items()}
    comps["L_RCA"] = comps["L_TAR"] = 0.0
    if cfg.uses_student:
        if student is None:
            raise ContractError("RCA/TAR weights are non-zero but no student was given")
        # both terms share one student pass; an unweighted term is reported only
        l_rca, l_tar = stars_terms(teacher, trace, student, x, cfg, lif, smooth)
        comps["L_RCA"], comps["L_TAR"] = l_rca.item(), l_tar.item()
        if cfg.lambda_rca > 0:
            total = total + ad.scalar_mul(l_rca, cfg.lambda_rca)
        if cfg.lambda_tar > 0:
            total = total + ad.scalar_mul(l_tar, cfg.lambda_tar)
    comps["L_total"] = total.item()
    return total, comps


def _check_finite(step: int, comps: dict) -> None:
    if not all(math.isfinite(v) for v in comps.values()):
        raise NumericalError("synthesis loss is not finite", step=step, components=comps)


def synthesize(teacher: TeacherNet, student: StudentNet | None, cfg: SynthesisConfig, lif: LIFConfig,
               seed: int, round_index: int = 0) -> SynthesisResult:
    """Optimise a synthetic batch with Adam for ``cfg.steps`` steps.

    The trace holds the loss components before each update plus one final row
    for the returned batch (``cfg.steps + 1`` rows).
    """
    labels = assigned_labels(cfg.batch_size, teacher.num_classes)
    x = Tensor(initial_batch(cfg, teacher.input_dim, seed, round_index), requires_grad=True)
    opt = Adam([x], cfg.step_size)
    frozen = teacher.parameters() + (student.parameters() if student is not None else [])
    trace: list[dict] = []
    with ad.frozen(frozen):
        for k in range(cfg.steps):
            total, comps = objective(teacher, student, x, labels, cfg, lif)
            _check_finite(k, comps)
            trace.append({"step": k, **comps})
            opt.zero_grad()
            ad.backward(total)
            opt.step()
        with ad.no_grad():
            _, comps = objective(teacher, student, x, labels, cfg, lif)
        _check_finite(cfg.steps, comps)
        trace.append({"step": cfg.steps, **comps})
    return SynthesisResult(SyntheticBatch(x.data.copy(), labels), trace)


def synthesize_bn_only(teacher: TeacherNet, cfg: SynthesisConfig, seed: int, round_index: int = 0) -> SynthesisResult:
    """Reference engine for the BN-guided objective alone; never sees a student."""
    labels = assigned_labels(cfg.batch_size, teacher.num_classes)
    x = Tensor(initial_batch(cfg, teacher.input_dim, seed, round_index), requires_grad=True)
    opt = Adam([x], cfg.step_size)
    trace: list[dict] = []

    def evaluate():
        _, parts, total = dfkd_terms(teacher, x, labels, cfg)
        row = {k: v.item() for k, v in parts.items()}
        row.update(L_RCA=0.0, L_TAR=0.0, L_total=total.item())
        return total, row

    with ad.frozen(teacher.parameters()):
        for k in range(cfg.steps):
            total, row = evaluate()
            trace.append({"step": k, **row})
            opt.zero_grad()
            ad.backward(total)
            opt.step()
        with ad.no_grad():
            _, row = evaluate()
        trace.append({"step": cfg.steps, **row})
    return SynthesisResult(SyntheticBatch(x.data.copy(), labels), trace)


def write_trace_csv(trace: list[dict], path) -> None:
    from .report import write_csv

    write_csv(path, ["step", *LOSS_KEYS], trace)
