"""Command-line harness.

    stars pretrain|distill|ablate|analyze|sweep --config PATH [--variant V] [--axis A]
          [--seed S] [--parallel-seeds N] [--out DIR] [--smoke]

Exit codes: 0 success, 2 config or usage error, 3 missing artifact, 4 numerical failure.
Every output file is a pure function of (config, seed, flags).
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .analysis import RateSetup, analysis_report
from .config import ExperimentConfig
from .data import load_dataset
from .distill import (
    METRICS_HEADER,
    QUANTILE_SETS,
    VARIANTS,
    ablate,
    ablation_jobs,
    run_experiment,
    summarize,
)
from .errors import ConfigError, MissingArtifactError, NumericalError, ParseError
from .nets import TeacherNet, load_checkpoint, save_checkpoint, train_teacher
from .report import write_csv, write_json
from .snn import save_student

log = logging.getLogger("stars")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

SWEEP_AXES = {
    "T": ("steps", (2, 4, 8)),
    "neuron": ("neuron_model", ("LIF", "IF")),
    "quantiles": ("quantiles", tuple(QUANTILE_SETS)),
}
SWEEP_HEADER = ("axis", "value", "seed", "test_acc", "kd_loss", "L_RCA", "L_TAR", "firing_rate")


def smoke_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    """3 rounds, 100 synthesis steps, at most two seeds."""
    return cfg.replace(distill=replace(cfg.distill, rounds=3),
                       synthesis=replace(cfg.synthesis, steps=min(cfg.synthesis.steps, 100)),
                       experiment=replace(cfg.experiment, seeds=cfg.experiment.seeds[:2]))


def resolve(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config)
    if args.smoke:
        cfg = smoke_overrides(cfg)
    run = cfg.experiment
    if args.out is not None:
        run = replace(run, output_dir=str(args.out))
    if args.seed is not None:
        run = replace(run, seeds=(args.seed,))
    if getattr(args, "variant", None) is not None:
        run = replace(run, variant=args.variant)
    return cfg.replace(experiment=run)


def load_teacher(cfg: ExperimentConfig) -> TeacherNet:
    path = cfg.checkpoint_path
    if not path.is_file():
        raise MissingArtifactError(f"teacher checkpoint {path} not found; run `stars pretrain --config ...` first")
    return load_checkpoint(path)


# ---- worker entry points (top level so they pickle) -------------------------------------
def _experiment_job(cfg: ExperimentConfig, variant: str, syn, lif, seed: int):
    teacher = load_teacher(cfg)
    _, test = load_dataset(cfg.dataset)
    result = run_experiment(variant, teacher, test, syn, cfg.distill, lif, seed)
    return result


def _run_jobs(cfg: ExperimentConfig, jobs: list[tuple], parallel: int) -> list:
    """jobs are (variant, synthesis config, lif config, seed); results keep job order."""
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_experiment_job, cfg, *job) for job in jobs]
            return [f.result() for f in futures]
    teacher = load_teacher(cfg)
    _, test = load_dataset(cfg.dataset)
    out = []
    for variant, syn, lif, seed in jobs:
        log.info("run variant=%s seed=%d", variant, seed)
        out.append(run_experiment(variant, teacher, test, syn, cfg.distill, lif, seed))
    return out


# ---- commands ---------------------------------------------------------------------
def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    train, test = load_dataset(cfg.dataset)
    t = cfg.teacher
    net = TeacherNet(cfg.dataset.dim, t.hidden, cfg.dataset.num_classes, seed=t.seed,
                     bn_momentum=t.bn_momentum, bn_eps=t.bn_eps)
    report = train_teacher(net, train, test, t.training(), seed=t.seed)
    save_checkpoint(net, cfg.checkpoint_path)
    out = Path(cfg.experiment.output_dir)
    write_json(out / "pretrain.json", {"train_acc": report.train_acc, "test_acc": report.test_acc,
                                       "final_loss": report.final_loss, "checkpoint": str(cfg.checkpoint_path)})
    print(f"teacher train_acc={report.train_acc!r} test_acc={report.test_acc!r} -> {cfg.checkpoint_path}")
    return EXIT_OK


def cmd_distill(cfg: ExperimentConfig, args) -> int:
    variant = cfg.experiment.variant
    seeds = cfg.experiment.seeds
    load_teacher(cfg)  # fail fast before spawning workers
    jobs = [(variant, cfg.synthesis, cfg.lif, s) for s in seeds]
    results = _run_jobs(cfg, jobs, args.parallel_seeds)
    out = Path(cfg.experiment.output_dir)
    records = [rec.row() for r in sorted(results, key=lambda r: r.seed) for rec in r.records]
    write_csv(out / f"metrics_{variant}.csv", METRICS_HEADER, records)
    for r in results:
        save_student(r.student, cfg.lif, out / "students" / f"{variant}_seed{r.seed}.json")
    finals = {r.seed: r.final for r in results}
    acc_mean, acc_std = summarize(finals[s].test_acc for s in seeds)
    fr_mean, fr_std = summarize(finals[s].firing_rate for s in seeds)
    summary = {
        "variant": VARIANTS[variant][0],
        "seeds": list(seeds),
        "rounds": cfg.distill.rounds,
        "test_acc": {"mean": acc_mean, "std": acc_std, "per_seed": {str(s): finals[s].test_acc for s in seeds}},
        "firing_rate": {"mean": fr_mean, "std": fr_std},
    }
    write_json(out / f"summary_{variant}.json", summary)
    print(f"{VARIANTS[variant][0]}: test_acc mean={acc_mean!r} std={acc_std!r} over seeds {list(seeds)}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    teacher = load_teacher(cfg)
    _, test = load_dataset(cfg.dataset)
    seeds = cfg.experiment.seeds
    jobs = ablation_jobs(cfg.synthesis, seeds)
    done = _run_jobs(cfg, [(v, syn, cfg.lif, s) for _, v, syn, s in jobs], args.parallel_seeds)
    cache = {(label, s): r for (label, _, _, s), r in zip(jobs, done)}
    tables = ablate(teacher, test, cfg.synthesis, cfg.distill, cfg.lif, seeds,
                    runner=lambda label, v, syn, s: cache[(label, s)])
    out = Path(cfg.experiment.output_dir)
    per_seed = [f"seed_{s}" for s in seeds]
    write_csv(out / "ablation_variants.csv", ("variant", "n_seeds", "test_acc_mean", "test_acc_std", *per_seed),
              tables.variant_rows)
    write_csv(out / "ablation_quantiles.csv",
              ("quantiles", "M", "n_seeds", "test_acc_mean", "test_acc_std", *per_seed), tables.quantile_rows)
    write_csv(out / "ablation_metrics.csv", METRICS_HEADER, [r.row() for r in tables.records])
    write_json(out / "ablation_summary.json", {"variants": tables.variant_rows, "quantiles": tables.quantile_rows})
    for row in tables.variant_rows:
        print(f"{row['variant']:>9}: {row['test_acc_mean']:.4f} +- {row['test_acc_std']:.4f}")
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig, args) -> int:
    setup = RateSetup(cfg.lif.tau, cfg.lif.v_th - cfg.lif.v_reset, cfg.lif.steps)
    a = cfg.analysis
    seed = args.seed if args.seed is not None else a.seed
    rep = analysis_report(setup, seed=seed, n_samples=a.n_samples, n_shift_pairs=a.n_shift_pairs)
    out = Path(cfg.experiment.output_dir)
    write_csv(out / "analysis_thresholds.csv", ("t", "beta", "theta"), rep["thresholds"])
    write_csv(out / "analysis_pairs.csv", tuple(rep["pairs"][0]), rep["pairs"])
    write_csv(out / "analysis_rates.csv", tuple(rep["rates"][0]), rep["rates"])
    write_csv(out / "analysis_shifts.csv", tuple(rep["shifts"][0]), rep["shifts"])
    text = render_analysis(setup, rep, a.n_samples, seed)
    (out / "analysis_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def render_analysis(setup: RateSetup, rep: dict, n: int, seed: int) -> str:
    lines = [f"rate analysis: tau={setup.tau!r} v_th={setup.v_th!r} T={setup.steps}", "", "effective thresholds"]
    lines += [f"  t={r['t']}  beta={r['beta']!r}  theta={r['theta']!r}" for r in rep["thresholds"]]
    lines += ["", "moment-matched pairs"]
    for r in rep["pairs"]:
        lines += [f"  {r['pair']}: P={r['P']}", f"    Q={r['Q']}",
                  f"    mean {r['mean_P']!r} / {r['mean_Q']!r}, var {r['var_P']!r} / {r['var_Q']!r}",
                  f"    R(P)={r['R_P']!r} R(Q)={r['R_Q']!r} gap={r['gap']!r}"]
    lines += ["", f"analytic vs simulated rates (n={n}, seed={seed})"]
    for r in rep["rates"]:
        lines.append(f"  {r['distribution']}: analytic={r['analytic']!r} no_reset={r['mc_no_reset']!r}"
                     f" (se {r['se_no_reset']!r}) reset={r['mc_reset']!r} (se {r['se_reset']!r})"
                     f" reset-analytic={r['reset_discrepancy']!r}")
    counts = {}
    for r in rep["shifts"]:
        counts[r["classified"]] = counts.get(r["classified"], 0) + 1
    mism = sum(r["classified"] != r["expected"] for r in rep["shifts"])
    lines += ["", f"shift classification: {dict(sorted(counts.items()))}, mismatches vs construction: {mism}", ""]
    return "\n".join(lines)


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    field_name, values = SWEEP_AXES[args.axis]
    seeds = cfg.experiment.seeds
    load_teacher(cfg)
    jobs, labels = [], []
    for value in values:
        lif, syn = cfg.lif, cfg.synthesis
        if args.axis == "quantiles":
            syn = replace(syn, quantiles=QUANTILE_SETS[value])
            label = " ".join(f"{q:.2f}" for q in QUANTILE_SETS[value])
        else:
            lif = replace(lif, **{field_name: value})
            label = str(value)
        for s in seeds:
            jobs.append(("stars", syn, lif, s))
            labels.append(label)
    results = _run_jobs(cfg, jobs, args.parallel_seeds)
    rows = [{"axis": args.axis, "value": label, "seed": r.seed, "test_acc": r.final.test_acc,
             "kd_loss": r.final.kd_loss, "L_RCA": r.final.L_RCA, "L_TAR": r.final.L_TAR,
             "firing_rate": r.final.firing_rate} for label, r in zip(labels, results)]
    write_csv(Path(cfg.experiment.output_dir) / f"sweep_{args.axis}.csv", SWEEP_HEADER, rows)
    for row in rows:
        print(f"{args.axis}={row['value']} seed={row['seed']} test_acc={row['test_acc']!r}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "distill": cmd_distill, "ablate": cmd_ablate,
            "analyze": cmd_analyze, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stars", description="Data-free ANN-to-SNN distillation experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path, help="YAML experiment config")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="distill: override experiment.variant")
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), help="sweep: axis to vary")
    p.add_argument("--seed", type=int, help="run this single seed instead of experiment.seeds")
    p.add_argument("--parallel-seeds", type=int, default=1, metavar="N", help="worker processes")
    p.add_argument("--out", type=Path, help="override experiment.output_dir")
    p.add_argument("--smoke", action="store_true", help="3 rounds, 100 synthesis steps, two seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep" and args.axis is None:
        parser.error("sweep needs --axis")
    if args.parallel_seeds < 1:
        parser.error("--parallel-seeds must be >= 1")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, ParseError) as exc:
        print(f"missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
