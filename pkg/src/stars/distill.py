"""Knowledge transfer from the teacher to the spiking student, plus ablations."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericalError
from .nets import TeacherNet, cross_entropy, forward_eval
from .optim import SGD
from .rng import stream
from .snn import FEATURE_BUILDS, LIFConfig, StudentNet, accuracy, firing_rate, student_forward
from .synthesis import (
    SynthesisConfig,
    SyntheticBatch,
    objective,
    synthesize,
)

# variant key -> (tag, uses RCA, uses TAR)
VARIANTS = {
    "bn": ("BN-only", False, False),
    "rca": ("RCA-only", True, False),
    "tar": ("TAR-only", False, True),
    "stars": ("STARS", True, True),
}

# prefix quantile sets, M = 2..5
QUANTILE_SETS = {
    2: (0.90, 0.95),
    3: (0.80, 0.90, 0.95),
    4: (0.70, 0.80, 0.90, 0.95),
    5: (0.60, 0.70, 0.80, 0.90, 0.95),
}

METRICS_HEADER = ("variant", "seed", "round", "test_acc", "kd_loss", "L_cls", "L_BN", "L_RCA", "L_TAR",
                  "firing_rate")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    rounds: int = 20
    kd_steps: int = 100
    lr: float = 0.05
    momentum: float = 0.9
    pool_size: int = 5
    ce_weight: float = 0.0
    init_gain: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.rounds < 1 or self.kd_steps < 0 or self.pool_size < 1:
            raise ValueError("rounds and pool_size must be >= 1, kd_steps >= 0")


@dataclass
class MetricsRecord:
    variant: str
    seed: int
    round: int
    test_acc: float
    kd_loss: float
    L_cls: float
    L_BN: float
    L_RCA: float
    L_TAR: float
    firing_rate: float

    def __post_init__(self):
        if not 0.0 <= self.test_acc <= 1.0:
            raise ValueError(f"accuracy {self.test_acc} outside [0, 1]")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRICS_HEADER}


@dataclass
class ExperimentResult:
    variant: str
    seed: int
    records: list[MetricsRecord] = field(default_factory=list)
    student: StudentNet | None = None
    batches: list[SyntheticBatch] = field(default_factory=list)
    synthesis_traces: list[list[dict]] = field(default_factory=list)
    kd_traces: list[list[float]] = field(default_factory=list)

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def kd_loss(teacher_logits: Tensor, student_logits: Tensor, temperature: float) -> Tensor:
    """Batch mean of KL(softmax(t/γ) || softmax(s/γ))."""
    if teacher_logits.shape != student_logits.shape:
        raise ContractError(f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}")
    log_pt = ad.log_softmax_rows(teacher_logits, temperature)
    log_ps = ad.log_softmax_rows(student_logits, temperature)
    pt = ad.exp(log_pt)
    kl = ad.sum(pt * (log_pt - log_ps))
    return ad.scalar_mul(kl, 1.0 / teacher_logits.shape[0])


def variant_config(syn: SynthesisConfig, variant: str) -> SynthesisConfig:
    """Zero the RCA/TAR weights the variant does not use."""
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    _, use_rca, use_tar = VARIANTS[variant]
    return replace(syn, lambda_rca=syn.lambda_rca if use_rca else 0.0,
                   lambda_tar=syn.lambda_tar if use_tar else 0.0)


class BatchPool:
    """Rolling pool of recent synthetic batches with cached teacher logits."""

    def __init__(self, size: int):
        self._items: deque = deque(maxlen=size)

    def add(self, teacher: TeacherNet, batch: SyntheticBatch) -> None:
        with ad.no_grad():
            logits = forward_eval(teacher, Tensor(batch.inputs)).data
        self._items.append((batch, logits))

    def __len__(self) -> int:
        return len(self._items)

    def sample(self, rng: np.random.Generator):
        return self._items[int(rng.integers(len(self._items)))]


def distill_round(teacher: TeacherNet, student: StudentNet, pool: BatchPool, cfg: DistillConfig, lif: LIFConfig,
                  optimizer: SGD, rng: np.random.Generator) -> list[float]:
    """``cfg.kd_steps`` momentum-SGD steps on the KD loss over pooled batches."""
    if len(pool) == 0:
        raise ContractError("distill_round needs at least one synthetic batch")
    losses = []
    with ad.frozen(teacher.parameters()):
        for step in range(cfg.kd_steps):
            batch, t_logits = pool.sample(rng)
            out = student_forward(student, Tensor(batch.inputs), lif)
            loss = kd_loss(Tensor(t_logits), out.logits, cfg.temperature)
            if cfg.ce_weight > 0:
                loss = loss + ad.scalar_mul(cross_entropy(out.logits, batch.labels), cfg.ce_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError("KD loss is not finite", step=step, components={"kd_loss": value})
            losses.append(value)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
    return losses


def batch_diagnostics(teacher: TeacherNet, student: StudentNet, batch: SyntheticBatch, syn: SynthesisConfig,
                      lif: LIFConfig) -> dict:
    """All loss components of a batch, whatever the variant's weights."""
    probe = replace(syn, lambda_rca=1.0, lambda_tar=1.0)
    with ad.no_grad():
        _, comps = objective(teacher, student, Tensor(batch.inputs), batch.labels, probe, lif)
    return comps


def run_experiment(variant: str, teacher: TeacherNet, test, syn: SynthesisConfig, dcfg: DistillConfig,
                   lif: LIFConfig, seed: int, hidden: tuple[int, ...] | None = None,
                   keep_artifacts: bool = False) -> ExperimentResult:
    """Alternate synthesis and distillation for ``dcfg.rounds`` rounds.

    ``test`` is real held-out data and is used only for evaluation.
    """
    tag = VARIANTS[variant][0] if variant in VARIANTS else variant
    syn_v = variant_config(syn, variant)
    student = StudentNet(teacher.input_dim, hidden or teacher.hidden, teacher.num_classes, seed=seed,
                         init_gain=dcfg.init_gain, taps=teacher.taps)
    optimizer = SGD(student.parameters(), dcfg.lr, dcfg.momentum)
    pool = BatchPool(dcfg.pool_size)
    kd_rng = stream(seed, "distill.pool")
    result = ExperimentResult(tag, seed)
    for r in range(dcfg.rounds):
        before = FEATURE_BUILDS["count"]
        syn_result = synthesize(teacher, student if syn_v.uses_student else None, syn_v, lif, seed, r)
        if not syn_v.uses_student and FEATURE_BUILDS["count"] != before:
            raise ContractError("BN-only synthesis touched student features")
        pool.add(teacher, syn_result.batch)
        diag = batch_diagnostics(teacher, student, syn_result.batch, syn_v, lif)
        kd = distill_round(teacher, student, pool, dcfg, lif, optimizer, kd_rng)
        rec = MetricsRecord(
            variant=tag, seed=seed, round=r + 1,
            test_acc=accuracy(student, test.inputs, test.labels, lif),
            kd_loss=float(np.mean(kd)) if kd else 0.0,
            L_cls=diag["L_cls"], L_BN=diag["L_BN"], L_RCA=diag["L_RCA"], L_TAR=diag["L_TAR"],
            firing_rate=float(np.mean(firing_rate(student, test.inputs, lif))),
        )
        result.records.append(rec)
        if keep_artifacts:
            result.batches.append(syn_result.batch)
            result.synthesis_traces.append(syn_result.trace)
            result.kd_traces.append(kd)
    result.student = student
    return result


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class AblationTables:
    records: list[MetricsRecord]
    variant_rows: list[dict]
    quantile_rows: list[dict]


def ablation_jobs(syn: SynthesisConfig, seeds) -> list[tuple[str, str, SynthesisConfig, int]]:
    """(label, variant, synthesis config, seed) for every run of the ablation grid.

    The quantile sweep reuses the STARS runs for the set equal to ``syn.quantiles``.
    """
    jobs = [(f"variant:{v}", v, syn, s) for v in VARIANTS for s in seeds]
    for m, qs in QUANTILE_SETS.items():
        if replace(syn, quantiles=qs) != syn:
            jobs += [(f"quantiles:{m}", "stars", replace(syn, quantiles=qs), s) for s in seeds]
    return jobs


def ablate(teacher: TeacherNet, test, syn: SynthesisConfig, dcfg: DistillConfig, lif: LIFConfig,
           seeds, runner=None) -> AblationTables:
    """Four-variant grid and the quantile-prefix sweep, final-round accuracy per seed.

    ``runner(label, variant, syn, seed) -> ExperimentResult`` may be supplied to
    parallelise; by default runs sequentially.
    """
    seeds = list(seeds)
    if runner is None:
        def runner(label, variant, syn_cfg, seed):
            return run_experiment(variant, teacher, test, syn_cfg, dcfg, lif, seed)

    results = {(label, seed): runner(label, v, c, seed) for label, v, c, seed in ablation_jobs(syn, seeds)}
    records = [rec for key in sorted(results, key=lambda k: (k[0], k[1])) for rec in results[key].records]

    variant_rows = []
    for v, (tag, _, _) in VARIANTS.items():
        accs = [results[(f"variant:{v}", s)].final.test_acc for s in seeds]
        mean, std = summarize(accs)
        variant_rows.append({"variant": tag, "n_seeds": len(seeds), "test_acc_mean": mean, "test_acc_std": std,
                             **{f"seed_{s}": a for s, a in zip(seeds, accs)}})
    quantile_rows = []
    for m, qs in QUANTILE_SETS.items():
        label = f"quantiles:{m}" if (f"quantiles:{m}", seeds[0]) in results else "variant:stars"
        accs = [results[(label, s)].final.test_acc for s in seeds]
        mean, std = summarize(accs)
        quantile_rows.append({"quantiles": " ".join(f"{q:.2f}" for q in qs), "M": m, "n_seeds": len(seeds),
                              "test_acc_mean": mean, "test_acc_std": std,
                              **{f"seed_{s}": a for s, a in zip(seeds, accs)}})
    return AblationTables(records, variant_rows, quantile_rows)
