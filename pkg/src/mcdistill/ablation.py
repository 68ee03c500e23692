"""Ablation grids: expansion into cells, execution over seeds, CSV/JSON output.

A grid is either a Cartesian product over its axis lists or an explicit list of
``rows``.  Every cell is normalised before use (N = 0 or source = none collapse
to the ET baseline) and duplicates are dropped, so the reported cardinality is
the number of distinct runs per seed.  Identical (cell, seed) runs shared by
several grids are trained once.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data import Dataset
from .distill import ConfigError, DistillConfig, describe
from .model import DetNet
from .train import (
    PRESETS,
    NetConfig,
    NumericalError,
    Preset,
    TrainReport,
    distill_student,
    teacher_pyramids,
    train_scratch,
)
from .uncertainty import RatioSchedule

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class Cell:
    """One grid entry; ``distill`` None means a from-scratch student."""

    distill: DistillConfig | None
    student: NetConfig
    label: str = ""

    def key(self) -> str:
        payload = {
            "distill": self.distill.to_dict() if self.distill else None,
            "student": asdict(self.student),
        }
        return json.dumps(payload, sort_keys=True)

    def columns(self) -> dict:
        d = self.distill
        sched = d.schedule if d and d.uses_uncertainty else None
        return {
            "method": "scratch" if d is None else ("UET" if d.uses_uncertainty else "ET"),
            "N": d.N if d else 0,
            "strategy": sched.strategy if sched else "",
            "source": d.source if d else "",
            "residual": d.residual if d and d.uses_uncertainty else "",
            "extraction": "" if d is None or d.logits_mode else d.extraction,
            "distance": "" if d is None or d.logits_mode else d.distance,
            "logits_mode": d.logits_mode if d else "",
            "lambda_kd": d.lambda_kd if d else "",
            "student_width": self.student.width,
            "student_depth": self.student.depth,
        }


def normalize(distill: DistillConfig | None) -> DistillConfig | None:
    """Canonical form: configs without uncertainty become the N = 0 / source = none baseline."""
    if distill is None or distill.uses_uncertainty:
        return distill
    return replace(distill, N=0, source="none", schedule=None, residual=True, normalize_residual=False)


def _tuple(v) -> tuple:
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


@dataclass(frozen=True)
class AblationGrid:
    """Axis lists expanded as a Cartesian product, or explicit ``rows``.

    ``student`` entries are [width, depth] pairs; empty means the preset's student.
    ``scratch`` adds a from-scratch cell per student size.  Each entry of
    ``rows`` is ``{"label"?, "distill": DistillConfig fields or null, "student"?: [w, d]}``.
    """

    name: str
    N: tuple[int, ...] = (5,)
    strategy: tuple[str, ...] = ("B",)
    source: tuple[str, ...] = ("teacher",)
    residual: tuple[bool, ...] = (True,)
    extraction: tuple[str, ...] = (DistillConfig.extraction,)
    distance: tuple[str, ...] = (DistillConfig.distance,)
    logits_mode: tuple[bool, ...] = (False,)
    student: tuple[tuple[int, int], ...] = ()
    scratch: bool = False
    rows: tuple[Mapping[str, Any], ...] = ()
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("name", "scratch", "rows"):
                continue
            object.__setattr__(self, f.name, _tuple(getattr(self, f.name)))
        object.__setattr__(self, "student", tuple(tuple(int(x) for x in s) for s in self.student))
        object.__setattr__(self, "rows", tuple(dict(r) for r in self.rows))
        if not self.seeds:
            raise ConfigError(f"grid {self.name!r}: seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"grid {self.name!r}: duplicate seeds")
        for s in self.student:
            if len(s) != 2 or min(s) < 1:
                raise ConfigError(f"grid {self.name!r}: student entries are [width, depth] with both >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["student"] = [list(s) for s in self.student]
        d["rows"] = [dict(r) for r in self.rows]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AblationGrid":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown AblationGrid fields: {sorted(unknown)}")
        if "name" not in data:
            raise ConfigError("AblationGrid needs a name")
        for row in data.get("rows", ()):
            bad = set(row) - {"label", "distill", "student"}
            if bad:
                raise ConfigError(f"unknown grid row fields: {sorted(bad)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def cells(self, default_student: NetConfig) -> list[Cell]:
        """Distinct normalised cells in expansion order."""
        students = [NetConfig(*s) for s in self.student] or [default_student]
        raw: list[Cell] = []
        if self.rows:
            for row in self.rows:
                d = row.get("distill")
                dc = DistillConfig.from_dict(d) if d is not None else None
                st = NetConfig(*row["student"]) if row.get("student") else default_student
                raw.append(Cell(normalize(dc), st, row.get("label", "")))
        else:
            for st in students:
                if self.scratch:
                    raw.append(Cell(None, st))
                for n, strat, src, res, ex, dist, lm in itertools.product(
                    self.N, self.strategy, self.source, self.residual, self.extraction, self.distance, self.logits_mode
                ):
                    if n == 0 or src == "none":
                        dc = DistillConfig(N=0, source="none", extraction=ex, distance=dist, logits_mode=lm)
                    else:
                        dc = DistillConfig(
                            N=n, schedule=RatioSchedule(strat, n), source=src, residual=res,
                            extraction=ex, distance=dist, logits_mode=lm,
                        )
                    raw.append(Cell(normalize(dc), st))
        out: list[Cell] = []
        seen: set[str] = set()
        for c in raw:
            if c.key() in seen:
                continue
            seen.add(c.key())
            label = c.label or describe(c.distill)
            if len(students) > 1 or c.student != default_student:
                label = f"{label} ({c.student.width}w/{c.student.depth}d)"
            out.append(replace(c, label=label))
        return out

    def cardinality(self, default_student: NetConfig) -> int:
        return len(self.cells(default_student))


def default_grids(preset: Preset, seeds: Sequence[int] = DEFAULT_SEEDS) -> dict[str, AblationGrid]:
    """The shipped grids, sized relative to ``preset``'s student."""
    full = preset.student
    half = full.half()
    uet = {"N": 5}
    et = {"N": 0, "source": "none"}
    seeds = tuple(seeds)
    kd_rows = []
    for ex in ("identity", "pearson-norm", "attention"):
        for dist in ("l2", "pearson", "ssim"):
            kd_rows.append({"distill": {**et, "extraction": ex, "distance": dist}})
            kd_rows.append({"distill": {**uet, "extraction": ex, "distance": dist}})
    kd_rows.append({"distill": {**et, "logits_mode": True}})
    kd_rows.append({"distill": {**uet, "logits_mode": True}})
    return {
        "baselines": AblationGrid("baselines", rows=({"distill": None}, {"distill": et}, {"distill": uet}), seeds=seeds),
        "n-sweep": AblationGrid("n-sweep", N=(0, 1, 5, 10, 15), seeds=seeds),
        "strategies": AblationGrid("strategies", strategy=("A", "B", "C"), seeds=seeds),
        "sources": AblationGrid(
            "sources",
            rows=(
                {"label": "no uncertainty", "distill": et},
                {"label": "student + residual", "distill": {**uet, "source": "student"}},
                {"label": "teacher + residual", "distill": {**uet, "source": "teacher"}},
                {"label": "teacher", "distill": {**uet, "source": "teacher", "residual": False}},
                {"label": "teacher + student + residual", "distill": {**uet, "source": "both"}},
            ),
            seeds=seeds,
        ),
        "kd-methods": AblationGrid("kd-methods", rows=tuple(kd_rows), seeds=seeds),
        "capacity": AblationGrid(
            "capacity",
            rows=tuple(
                {"distill": d, "student": [st.width, st.depth]}
                for st in (full, half)
                for d in (None, et, uet)
            ),
            seeds=seeds,
        ),
    }


# grids run by `ablate` when no config is given; also what the acceptance suite times
SUITES = {
    "core": ("baselines", "n-sweep", "strategies", "sources"),
    "all": ("baselines", "n-sweep", "strategies", "sources", "kd-methods", "capacity"),
}


# -- execution -------------------------------------------------------------------


@dataclass
class RunResult:
    key: str
    seed: int
    status: str
    report: dict | None
    error: str = ""


_WORKER: dict = {}


def _init_worker(state: dict) -> None:
    from threadpoolctl import threadpool_limits

    # each cell is single-threaded; parallelism comes from processes
    threadpool_limits(1)
    teacher = DetNet(**state["teacher"]).freeze()
    _WORKER.update(state, teacher=teacher)


def _run_cell(task: tuple[str, Cell, int]) -> RunResult:
    key, cell, seed = task
    w = _WORKER
    preset: Preset = w["preset"]
    cfg = replace(preset.student_config(cell.distill, seed), student=cell.student)
    try:
        if cell.distill is None:
            _, report = train_scratch(cfg, w["train"], w["evals"], deterministic=w["deterministic"])
            report.teacher_param_digest_before = report.teacher_param_digest_after = w["teacher"].digest()
        else:
            _, _, report = distill_student(
                cfg, w["teacher"], w["train"], w["evals"], w["cache"], deterministic=w["deterministic"]
            )
        report.label = cell.label
        return RunResult(key, seed, "ok", asdict(report))
    except NumericalError as exc:
        rep = asdict(exc.report) if exc.report is not None else None
        return RunResult(key, seed, "failed", rep, str(exc))
    except Exception as exc:  # a failed cell must not stop the grid
        log.exception("cell %s seed %d failed", cell.label, seed)
        return RunResult(key, seed, "failed", None, f"{type(exc).__name__}: {exc}")


@dataclass
class AblationResult:
    grids: dict[str, AblationGrid]
    cells: dict[str, list[Cell]]
    results: dict[tuple[str, int], RunResult]
    teacher_digest: str
    wall_time: float | None = None
    files: list[Path] = field(default_factory=list)

    def rows(self, grid: str) -> list[dict]:
        out = []
        for cell in self.cells[grid]:
            for seed in self.grids[grid].seeds:
                out.append(_run_row(grid, cell, seed, self.results[(cell.key(), seed)], self.teacher_digest))
        return out

    def summary(self, grid: str) -> list[dict]:
        return [_summary_row(grid, cell, self.rows_for(grid, cell)) for cell in self.cells[grid]]

    def rows_for(self, grid: str, cell: Cell) -> list[dict]:
        return [
            _run_row(grid, cell, seed, self.results[(cell.key(), seed)], self.teacher_digest)
            for seed in self.grids[grid].seeds
        ]

    def reports(self, grid: str, seed: int | None = None) -> list[TrainReport]:
        out = []
        for cell in self.cells[grid]:
            for s in self.grids[grid].seeds:
                res = self.results[(cell.key(), s)]
                if (seed is None or s == seed) and res.status == "ok":
                    out.append(TrainReport.from_dict(res.report))
        return out

    def teacher_intact(self) -> bool:
        for res in self.results.values():
            if res.report is None:
                continue
            if not (res.report["teacher_param_digest_before"] == res.report["teacher_param_digest_after"]
                    == self.teacher_digest):
                return False
        return True


RUN_FIELDS = [
    "grid", "cell", "seed", "method", "N", "strategy", "source", "residual", "extraction", "distance",
    "logits_mode", "lambda_kd", "student_width", "student_depth", "status", "eval_mean",
    "eval_scale0", "eval_scale1", "eval_scale2", "teacher_digest_before", "teacher_digest_after", "error",
]
SUMMARY_FIELDS = [
    "grid", "cell", "method", "N", "strategy", "source", "residual", "extraction", "distance", "logits_mode",
    "lambda_kd", "student_width", "student_depth", "seeds", "ok", "mean", "std",
]


def _run_row(grid: str, cell: Cell, seed: int, res: RunResult, teacher_digest: str) -> dict:
    row = {"grid": grid, "cell": cell.label, "seed": seed, **cell.columns(), "status": res.status}
    rep = res.report or {}
    final = rep.get("final") or {}
    acc = final.get("eval_accuracy", [])
    row["eval_mean"] = final.get("eval_mean", "") if res.status == "ok" else ""
    for s in range(3):
        row[f"eval_scale{s}"] = acc[s] if res.status == "ok" and s < len(acc) else ""
    row["teacher_digest_before"] = rep.get("teacher_param_digest_before") or teacher_digest
    row["teacher_digest_after"] = rep.get("teacher_param_digest_after") or teacher_digest
    row["error"] = res.error
    return row


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample std (ddof = 1); std is 0 for a single value, nan for none."""
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def _summary_row(grid: str, cell: Cell, rows: list[dict]) -> dict:
    ok = [r["eval_mean"] for r in rows if r["status"] == "ok"]
    mean, std = mean_std(ok)
    return {"grid": grid, "cell": cell.label, **cell.columns(), "seeds": len(rows), "ok": len(ok),
            "mean": mean, "std": std}


def _csv(rows: list[dict], fieldnames: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def run_ablation(
    grids: Mapping[str, AblationGrid] | Iterable[AblationGrid],
    teacher: DetNet,
    train: Dataset,
    evals: Dataset,
    preset: Preset | str = "quick",
    out_dir: str | Path | None = None,
    jobs: int = 1,
    deterministic: bool = True,
) -> AblationResult:
    """Run every (cell, seed) of ``grids`` against one frozen teacher.

    Writes ``<grid>_runs.csv``, ``<grid>_summary.csv`` and ``<grid>.json`` per
    grid into ``out_dir`` when given.  Failed cells become rows with
    status=failed and the grid continues.
    """
    if isinstance(preset, str):
        preset = PRESETS[preset]
    if not isinstance(grids, Mapping):
        grids = {g.name: g for g in grids}
    teacher.freeze()
    digest = teacher.digest()
    cells = {name: g.cells(preset.student) for name, g in grids.items()}
    tasks: dict[tuple[str, int], tuple[str, Cell, int]] = {}
    for name, g in grids.items():
        log.info("grid %s: %d cells x %d seeds", name, len(cells[name]), len(g.seeds))
        for cell in cells[name]:
            for seed in g.seeds:
                tasks.setdefault((cell.key(), seed), (cell.key(), cell, seed))
    log.info("%d distinct runs", len(tasks))

    t0 = time.perf_counter()
    cache = teacher_pyramids(teacher, train.images)
    state = {
        "teacher": {"spec": teacher.spec, "width": teacher.width, "depth": teacher.depth, "role": teacher.role,
                    "params": teacher.params},
        "train": train, "evals": evals, "cache": cache, "preset": preset, "deterministic": deterministic,
    }
    jobs = 1 if deterministic else max(1, jobs)
    results: dict[tuple[str, int], RunResult] = {}
    ordered = list(tasks.values())
    if jobs == 1:
        _WORKER.clear()
        _WORKER.update(state, teacher=teacher)
        try:
            for i, task in enumerate(ordered):
                res = _run_cell(task)
                log.info("[%d/%d] %s seed %d: %s", i + 1, len(ordered), task[1].label, task[2], res.status)
                results[(res.key, res.seed)] = res
        finally:
            _WORKER.clear()
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(state,)) as pool:
            for res in pool.map(_run_cell, ordered):
                results[(res.key, res.seed)] = res
    result = AblationResult(dict(grids), cells, results, digest,
                            None if deterministic else time.perf_counter() - t0)
    if teacher.digest() != digest:
        raise RuntimeError("teacher parameters changed during the ablation")
    if out_dir is not None:
        result.files = write_outputs(result, out_dir)
    return result


def write_outputs(result: AblationResult, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, grid in result.grids.items():
        runs, summary = result.rows(name), result.summary(name)
        p = out / f"{name}_runs.csv"
        p.write_text(_csv(runs, RUN_FIELDS))
        files.append(p)
        p = out / f"{name}_summary.csv"
        p.write_text(_csv(summary, SUMMARY_FIELDS))
        files.append(p)
        reports = {}
        for cell in result.cells[name]:
            reports[cell.label] = {str(s): result.results[(cell.key(), s)].report for s in grid.seeds}
        doc = {
            "grid": grid.to_dict(),
            "cardinality": len(result.cells[name]),
            "teacher_digest": result.teacher_digest,
            "runs": runs,
            "summary": summary,
            "reports": reports,
        }
        p = out / f"{name}.json"
        p.write_text(json.dumps(_finite(doc), indent=2, sort_keys=True) + "\n")
        files.append(p)
    return files


def _finite(obj):
    # strict JSON has no NaN; empty aggregates become null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def load_summary(path: str | Path) -> list[dict]:
    """Summary rows back from a ``<grid>.json`` file."""
    return json.loads(Path(path).read_text())["summary"]
