"""Command-line entry point: ``python -m mcdistill <command>``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import ablation as A
from .checkpoint import CheckpointError
from .data import gen_split, load_split, save_split
from .distill import ConfigError
from .gradcheck import CASES, run_cases
from .model import load_detnet
from .train import (
    PRESETS,
    EpochRecord,
    NumericalError,
    TrainConfig,
    TrainReport,
    background_frequency,
    distill_student,
    emit_convergence,
    save_student,
    train_teacher,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
GRADCHECK_TOL = 1e-4

log = logging.getLogger("mcdistill")


def _read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _train_config(args, role: str) -> TrainConfig:
    preset = PRESETS[args.preset]
    if args.config:
        cfg = TrainConfig.from_dict(_read_json(args.config))
    elif role == "teacher":
        cfg = preset.teacher_config()
    else:
        from .distill import DistillConfig

        cfg = preset.student_config(DistillConfig())
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _splits(args, cfg: TrainConfig):
    if getattr(args, "data", None):
        data_cfg, train, evals = load_split(args.data)
        if data_cfg != cfg.data:
            log.warning("dataset file config differs from the run config; using the file")
        return train, evals
    return gen_split(cfg.data)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _train_config(args, "teacher").data
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    train, evals = gen_split(cfg)
    path = _out(args) / "data.mcdt"
    save_split(path, cfg, train, evals)
    print(f"wrote {path}: {len(train)} train / {len(evals)} eval samples, digest {train.digest()[:16]}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _train_config(args, "teacher")
    if cfg.distill is not None:
        raise ConfigError("train-teacher takes a config without a distill section")
    train, evals = _splits(args, cfg)
    out = _out(args)
    try:
        net, report = train_teacher(cfg, train, evals, out / "teacher.mcdt", deterministic=args.deterministic)
    except NumericalError as exc:
        if exc.report is not None:
            exc.report.save(out / "teacher_report.json")
        raise
    report.save(out / "teacher_report.json")
    base = background_frequency(evals)["mean"]
    print(f"teacher eval accuracy {report.final['eval_mean']:.4f} (all-background {base:.4f})")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _train_config(args, "student")
    if cfg.distill is None:
        raise ConfigError("distill needs a config with a distill section")
    if not args.teacher:
        raise ConfigError("distill needs --teacher <checkpoint>")
    teacher, _, _ = load_detnet(args.teacher)
    train, evals = _splits(args, cfg)
    out = _out(args)
    try:
        student, adapter, report = distill_student(cfg, teacher, train, evals, deterministic=args.deterministic)
    except NumericalError as exc:
        if exc.report is not None:
            exc.report.save(out / "report.json")
        raise
    report.save(out / "report.json")
    save_student(out / "student.mcdt", student, adapter)
    print(f"{report.label}: eval accuracy {report.final['eval_mean']:.4f}")
    return EXIT_OK


def _load_grids(args, preset) -> dict[str, A.AblationGrid]:
    seeds = tuple(args.seeds) if args.seeds else A.DEFAULT_SEEDS
    if args.config:
        raw = _read_json(args.config)
        items = raw if isinstance(raw, list) else [raw]
        grids = {}
        for item in items:
            if not isinstance(item, dict):
                raise ConfigError("an ablation config is an AblationGrid object or a list of them")
            g = A.AblationGrid.from_dict(item)
            grids[g.name] = g
        return grids
    shipped = A.default_grids(preset, seeds)
    names = args.grids or list(A.SUITES[args.suite])
    unknown = [n for n in names if n not in shipped]
    if unknown:
        raise ConfigError(f"unknown grids {unknown}; shipped: {sorted(shipped)}")
    return {n: shipped[n] for n in names}


def cmd_ablate(args) -> int:
    preset = PRESETS[args.preset]
    grids = _load_grids(args, preset)
    total = 0
    for name, g in grids.items():
        n = g.cardinality(preset.student)
        total += n * len(g.seeds)
        print(f"grid {name}: {n} cells x {len(g.seeds)} seeds = {n * len(g.seeds)} rows")
    out = _out(args)
    tcfg = preset.teacher_config()
    if args.data:
        _, train, evals = load_split(args.data)
    else:
        train, evals = gen_split(tcfg.data)
    if args.teacher:
        teacher, _, _ = load_detnet(args.teacher)
    else:
        teacher, report = train_teacher(tcfg, train, evals, out / "teacher.mcdt", deterministic=args.deterministic)
        report.save(out / "teacher_report.json")
        print(f"teacher eval accuracy {report.final['eval_mean']:.4f}")
    result = A.run_ablation(grids, teacher, train, evals, preset, out, jobs=args.jobs,
                            deterministic=args.deterministic)
    failed = sum(r.status != "ok" for r in result.results.values())
    for name in grids:
        _print_summary(name, result.summary(name))
    print(f"{len(result.results)} distinct runs, {failed} failed; teacher intact: {result.teacher_intact()}")
    if result.wall_time is not None:
        print(f"wall time {result.wall_time:.1f} s")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.cases or list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradcheck cases {unknown}")
    results = run_cases(names, eps=args.eps, seed=args.seed or 0)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{name:24s} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERICAL


# -- report ------------------------------------------------------------------------


def _print_summary(name: str, summary: Sequence[dict]) -> None:
    print(f"\n== {name}")
    width = max(len(r["cell"]) for r in summary)
    for r in summary:
        mean, std = r["mean"], r["std"]
        if mean is None or (isinstance(mean, float) and np.isnan(mean)):
            print(f"  {r['cell']:{width}s}  failed ({r['ok']}/{r['seeds']} ok)")
        else:
            print(f"  {r['cell']:{width}s}  {mean:.4f} ± {std:.4f}  ({r['ok']}/{r['seeds']} seeds)")


def _per_seed(doc: dict, label: str) -> dict[int, float]:
    out = {}
    for r in doc["runs"]:
        if r["cell"] == label and r["status"] == "ok":
            out[int(r["seed"])] = float(r["eval_mean"])
    return out


def paired_delta(a: dict[int, float], b: dict[int, float]) -> tuple[float, float, int]:
    """Mean and sample std of a - b over the seeds both have."""
    seeds = sorted(set(a) & set(b))
    mean, std = A.mean_std([a[s] - b[s] for s in seeds])
    return mean, std, len(seeds)


def _mean_report(label: str, reports: Sequence[TrainReport]) -> TrainReport:
    n = len(reports[0].records)
    records = [
        EpochRecord(e, float(np.mean([r.records[e].task_loss for r in reports])),
                    float(np.mean([r.records[e].kd_loss for r in reports])),
                    list(np.mean([r.records[e].eval_accuracy for r in reports], axis=0)),
                    float(np.mean([r.records[e].eval_mean for r in reports])), reports[0].records[e].lr)
        for e in range(n)
    ]
    return TrainReport(label, "mean", {}, records)


def cmd_report(args) -> int:
    out = Path(args.out)
    docs = {p.stem: json.loads(p.read_text()) for p in sorted(out.glob("*.json")) if p.stem != "teacher_report"}
    docs = {k: v for k, v in docs.items() if "summary" in v}
    if not docs:
        raise ConfigError(f"no ablation results under {out}")
    for name, doc in docs.items():
        _print_summary(name, doc["summary"])

    base = docs.get("baselines")
    if base is not None:
        labels = [r["cell"] for r in base["summary"]]
        scratch = _per_seed(base, "scratch")
        et = _per_seed(base, next(l for l in labels if l.startswith("ET baseline")))
        uet = _per_seed(base, next(l for l in labels if l.startswith("UET default")))
        print("\n== headline (paired over seeds)")
        m, s, n = paired_delta(uet, et)
        print(f"UET default - ET baseline: {m:+.4f} ± {s:.4f} over {n} seeds")
        for name, runs in (("ET baseline", et), ("UET default", uet)):
            m, s, n = paired_delta(runs, scratch)
            print(f"{name} - scratch: {m:+.4f} ± {s:.4f} over {n} seeds")

        reports = []
        for cell in labels:
            runs = [TrainReport.from_dict(rep) for rep in base["reports"][cell].values() if rep]
            runs = [r for r in runs if r.status == "ok" and r.records]
            if runs:
                reports.append(_mean_report(cell, runs))
        if reports:
            path = out / "convergence.csv"
            emit_convergence(reports, path)
            print(f"\nwrote {path} (seed-mean eval accuracy per epoch)")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (TrainConfig or AblationGrid fields)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel processes for ablations")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, byte-identical reports")
    common.add_argument("--preset", choices=sorted(PRESETS), default="quick", help="size preset when no config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mcdistill", description="Uncertainty-aware feature distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate and save the synthetic dataset")
    s = sub.add_parser("train-teacher", parents=[common], help="pretrain the teacher")
    s.add_argument("--data", help="dataset file from gen-data")
    s = sub.add_parser("distill", parents=[common], help="distill a student from a teacher checkpoint")
    s.add_argument("--teacher", help="teacher checkpoint")
    s.add_argument("--data", help="dataset file from gen-data")
    s = sub.add_parser("ablate", parents=[common], help="run ablation grids")
    s.add_argument("--teacher", help="teacher checkpoint (trained with the preset when omitted)")
    s.add_argument("--data", help="dataset file from gen-data")
    s.add_argument("--suite", choices=sorted(A.SUITES), default="core")
    s.add_argument("--grids", nargs="+", help="shipped grid names (overrides --suite)")
    s.add_argument("--seeds", type=int, nargs="+", help="seeds for shipped grids")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--cases", nargs="+")
    sub.add_parser("report", parents=[common], help="summarise an ablation output directory")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
        args.jobs = 1
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
