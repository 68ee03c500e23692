"""Teacher pretraining, student distillation, evaluation and run reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DataConfig, Dataset
from .distill import ConfigError, DistillConfig, describe, kd_loss_uet, logits_kd_from_pyramids
from .model import (
    STUDENT,
    TEACHER,
    Adapter,
    DetNet,
    PyramidSpec,
    adapter_for,
    build_detnet,
    forward_head,
    forward_pyramid,
    lightweight,
    load_detnet,
)
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd-momentum", "adam")

# stream ids under Rng(seed)
_INIT, _ORDER, _DROPOUT, _ADAPTER = 0, 1, 2, 3


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class NetConfig:
    width: int
    depth: int

    def half(self) -> "NetConfig":
        return NetConfig(*lightweight(self.width, self.depth))


def _reject_unknown(cls, data: Mapping[str, Any]) -> None:
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.05
    optimizer: str = "sgd-momentum"
    seed: int = 0
    distill: DistillConfig | None = None
    momentum: float = 0.9
    grad_clip: float | None = 5.0
    data: DataConfig = field(default_factory=DataConfig)
    teacher: NetConfig = NetConfig(32, 3)
    student: NetConfig = NetConfig(16, 2)
    scales: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0 or null")

    @property
    def spec(self) -> PyramidSpec:
        size = self.data.image_size
        return PyramidSpec(scales=self.scales, input_shape=(1, size, size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = self.distill.to_dict() if self.distill else None
        d["data"] = self.data.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        _reject_unknown(cls, data)
        data = dict(data)
        if data.get("distill") is not None:
            data["distill"] = DistillConfig.from_dict(data["distill"])
        if "data" in data:
            try:
                data["data"] = DataConfig.from_dict(data["data"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
        for key in ("teacher", "student"):
            if key in data:
                _reject_unknown(NetConfig, data[key])
                data[key] = NetConfig(**data[key])
        return cls(**data)


@dataclass(frozen=True)
class Preset:
    """Named bundle of data size, network sizes and epoch counts."""

    data: DataConfig
    teacher: NetConfig
    student: NetConfig
    teacher_epochs: int
    student_epochs: int
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def teacher_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            epochs=self.teacher_epochs, seed=seed, data=self.data, teacher=self.teacher, student=self.student
        )

    def student_config(self, distill: DistillConfig | None, seed: int = 0, half: bool = False) -> TrainConfig:
        student = self.student.half() if half else self.student
        return TrainConfig(
            epochs=self.student_epochs,
            seed=seed,
            distill=distill,
            data=self.data,
            teacher=self.teacher,
            student=student,
        )


PRESETS: dict[str, Preset] = {
    # the nominal desk-scale setting; hours per full grid on a single core
    "desk": Preset(DataConfig(n_samples=2000, n_eval=500), NetConfig(32, 3), NetConfig(16, 2), 30, 20),
    # same task and protocol, sized so every shipped grid finishes in minutes on one core
    "quick": Preset(DataConfig(n_samples=320, n_eval=160), NetConfig(16, 2), NetConfig(8, 2), 15, 10),
}


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    kd_loss: float
    eval_accuracy: list[float]
    eval_mean: float
    lr: float


@dataclass
class TrainReport:
    label: str
    kind: str
    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    ratios_used: list[list[float]] = field(default_factory=list)
    step_losses: list[list[float]] = field(default_factory=list)
    teacher_param_digest_before: str | None = None
    teacher_param_digest_after: str | None = None
    student_param_digest: str | None = None
    wall_time: float | None = None
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainReport":
        data = dict(data)
        data["records"] = [EpochRecord(**r) for r in data.get("records", [])]
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "TrainReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def curve(self) -> list[float]:
        return [r.eval_mean for r in self.records]


# -- optimisers --------------------------------------------------------------


class SGDMomentum:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


class Adam:
    def __init__(self, params: Sequence[Tensor], betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: Sequence[Tensor]):
    if cfg.optimizer == "adam":
        return Adam(params)
    return SGDMomentum(params, cfg.momentum)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


# -- evaluation ----------------------------------------------------------------


def task_loss(logits: Sequence[Tensor], labels: Sequence[np.ndarray]) -> Tensor:
    """Mean over scales of the per-cell cross-entropy."""
    total = T.cross_entropy(logits[0], labels[0])
    for lg, lab in zip(logits[1:], labels[1:]):
        total = T.add(total, T.cross_entropy(lg, lab))
    return T.scale(total, 1.0 / len(logits))


def predict(net: DetNet, images: np.ndarray) -> list[np.ndarray]:
    """Per-scale argmax maps; ties resolve to the lowest class index."""
    with T.no_grad():
        logits = forward_head(net, forward_pyramid(net, images))
    return [np.argmax(lg.data, axis=1) for lg in logits]


def evaluate(net: DetNet | str | Path, eval_set: Dataset, batch_size: int = 64) -> dict:
    """Cell accuracy per scale and macro-averaged over scales."""
    if not isinstance(net, DetNet):
        net, _, _ = load_detnet(net)
    correct = np.zeros(net.spec.scales)
    total = np.zeros(net.spec.scales)
    for start in range(0, len(eval_set), batch_size):
        idx = np.arange(start, min(start + batch_size, len(eval_set)))
        images, labels = eval_set.batch(idx)
        for s, pred in enumerate(predict(net, images)):
            correct[s] += (pred == labels[s]).sum()
            total[s] += labels[s].size
    per_scale = (correct / np.maximum(total, 1)).tolist()
    return {"per_scale": per_scale, "mean": float(np.mean(per_scale))}


def background_frequency(eval_set: Dataset) -> dict:
    """Accuracy of predicting class 0 everywhere."""
    per = [float((lab == 0).mean()) for lab in eval_set.labels]
    return {"per_scale": per, "mean": float(np.mean(per))}


# -- training loop ---------------------------------------------------------------


def teacher_pyramids(teacher: DetNet, images: np.ndarray, batch_size: int = 64) -> list[np.ndarray]:
    """Frozen teacher pyramid for every image, computed once."""
    chunks: list[list[np.ndarray]] = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append([f.data for f in forward_pyramid(teacher, images[start : start + batch_size])])
    return [np.concatenate([c[s] for c in chunks]) for s in range(teacher.spec.scales)]


def _fit(
    net: DetNet,
    cfg: TrainConfig,
    train: Dataset,
    evals: Dataset,
    report: TrainReport,
    teacher: DetNet | None = None,
    adapter: Adapter | None = None,
    teacher_cache: list[np.ndarray] | None = None,
) -> None:
    dcfg = cfg.distill
    params = list(net.parameters()) + (list(adapter.parameters()) if adapter else [])
    opt = make_optimizer(cfg, params)
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    root = Rng(cfg.seed)
    step = 0
    for epoch in range(cfg.epochs):
        order = root.fork(_ORDER, epoch).permutation(n)
        ratios = dcfg.ratios(epoch) if dcfg else []
        task_sum = kd_sum = 0.0
        lr = cosine_lr(cfg.lr, step, total_steps)
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            images, labels = train.batch(idx)
            try:
                F_S = forward_pyramid(net, images)
                loss = task_loss(forward_head(net, F_S), labels)
                task_val = loss.item()
                kd_val = 0.0
                if dcfg is not None:
                    F_T = [Tensor(c[idx]) for c in teacher_cache]
                    rng = root.fork(_DROPOUT, epoch, b)
                    if dcfg.logits_mode:
                        kd = logits_kd_from_pyramids(teacher, net, F_T, F_S, dcfg, rng, epoch)
                    else:
                        kd = kd_loss_uet(F_T, F_S, adapter, dcfg, rng, epoch)
                    kd_val = kd.item()
                    loss = T.add(loss, kd)
            except FloatingPointError as exc:
                task_val = kd_val = math.nan
                detail = str(exc)
            else:
                detail = ""
            if not (math.isfinite(task_val) and math.isfinite(kd_val)):
                report.status = "diverged"
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, step {b} (task={task_val}, kd={kd_val}) {detail}".rstrip(),
                    report,
                )
            report.step_losses.append([task_val, kd_val])
            T.zero_grads(params)
            T.backward(loss)
            if cfg.grad_clip is not None:
                clip_grad_norm(params, cfg.grad_clip)
            lr = cosine_lr(cfg.lr, step, total_steps)
            opt.step(lr)
            step += 1
            task_sum += task_val
            kd_sum += kd_val
        acc = evaluate(net, evals)
        report.records.append(
            EpochRecord(epoch, task_sum / steps_per_epoch, kd_sum / steps_per_epoch, acc["per_scale"], acc["mean"], lr)
        )
        report.ratios_used.append(ratios)
        log.info("%s epoch %d task %.4f kd %.4f acc %.4f", report.label, epoch, task_sum / steps_per_epoch,
                 kd_sum / steps_per_epoch, acc["mean"])
    T.zero_grads(params)
    report.final = {"eval_accuracy": report.records[-1].eval_accuracy, "eval_mean": report.records[-1].eval_mean}


def train_teacher(
    cfg: TrainConfig, train: Dataset, evals: Dataset, out: str | Path | None = None, deterministic: bool = True
) -> tuple[DetNet, TrainReport]:
    """Fit the teacher on the task loss alone; returns it frozen."""
    if cfg.distill is not None:
        raise ConfigError("teacher pretraining takes no distill config")
    t0 = time.perf_counter()
    # built trainable; freeze() below flips the role to teacher
    net = build_detnet(cfg.spec, cfg.teacher.width, cfg.teacher.depth, STUDENT, Rng(cfg.seed).fork(_INIT))
    report = TrainReport("teacher", "teacher", cfg.to_dict())
    _fit(net, cfg, train, evals, report)
    net.freeze()
    report.student_param_digest = net.digest()
    report.wall_time = None if deterministic else time.perf_counter() - t0
    if out is not None:
        net.save(out)
    return net, report


def train_scratch(
    cfg: TrainConfig, train: Dataset, evals: Dataset, deterministic: bool = True
) -> tuple[DetNet, TrainReport]:
    """Student trained on the task loss only (no teacher)."""
    cfg = replace(cfg, distill=None)
    t0 = time.perf_counter()
    net = build_detnet(cfg.spec, cfg.student.width, cfg.student.depth, STUDENT, Rng(cfg.seed).fork(_INIT))
    report = TrainReport("scratch", "scratch", cfg.to_dict())
    _fit(net, cfg, train, evals, report)
    report.student_param_digest = net.digest()
    report.wall_time = None if deterministic else time.perf_counter() - t0
    return net, report


def check_compatible(teacher: DetNet, cfg: TrainConfig) -> None:
    spec = cfg.spec
    if teacher.spec.scales != spec.scales or teacher.spec.input_shape != spec.input_shape:
        raise ConfigError(f"teacher pyramid {teacher.spec} incompatible with student pyramid {spec}")
    if teacher.spec.num_classes != spec.num_classes:
        raise ConfigError("teacher and student class counts differ")


def distill_student(
    cfg: TrainConfig,
    teacher: DetNet | str | Path,
    train: Dataset,
    evals: Dataset,
    teacher_cache: list[np.ndarray] | None = None,
    deterministic: bool = True,
) -> tuple[DetNet, Adapter, TrainReport]:
    """Train a student with task loss plus the configured ET/UET distillation loss.

    Only student and adapter parameters are stepped; the teacher digest is
    recorded before and after so the report itself proves the teacher was untouched.
    """
    if cfg.distill is None:
        raise ConfigError("distill_student needs a distill config")
    if not isinstance(teacher, DetNet):
        teacher, _, _ = load_detnet(teacher, role=TEACHER)
    teacher.freeze()
    check_compatible(teacher, cfg)
    t0 = time.perf_counter()
    before = teacher.digest()
    root = Rng(cfg.seed)
    student = build_detnet(cfg.spec, cfg.student.width, cfg.student.depth, STUDENT, root.fork(_INIT))
    adapter = None if cfg.distill.logits_mode else adapter_for(teacher, student, root.fork(_ADAPTER))
    if teacher_cache is None:
        teacher_cache = teacher_pyramids(teacher, train.images)
    report = TrainReport(describe(cfg.distill), "distill", cfg.to_dict(), teacher_param_digest_before=before)
    try:
        _fit(student, cfg, train, evals, report, teacher=teacher, adapter=adapter, teacher_cache=teacher_cache)
    finally:
        report.teacher_param_digest_after = teacher.digest()
    report.student_param_digest = student.digest()
    report.wall_time = None if deterministic else time.perf_counter() - t0
    return student, adapter, report


def save_student(path: str | Path, student: DetNet, adapter: Adapter | None) -> None:
    student.save(path, extra=adapter.state() if adapter else None)


def emit_convergence(reports: Sequence[TrainReport], path: str | Path | None = None) -> str:
    """Per-epoch eval-accuracy columns, one per run label; returns the CSV text."""
    if not reports:
        raise ValueError("no reports given")
    epochs = {len(r.records) for r in reports}
    if len(epochs) != 1:
        raise ValueError(f"reports have different epoch counts: {sorted(epochs)}")
    labels: list[str] = []
    for r in reports:
        label, k = r.label, 2
        while label in labels:
            label = f"{r.label} #{k}"
            k += 1
        labels.append(label)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", *labels])
    for e in range(epochs.pop()):
        writer.writerow([e, *(repr(r.records[e].eval_mean) for r in reports)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
