"""Knowledge extraction, transfer distances and the distillation losses.

Plain ET loss::

    lambda * d(f(F_T), f(g(F_S)))

With uncertainty the teacher side (and/or the adapted student side) is replaced
by ``U_K + F`` where ``U_K`` is the Monte Carlo dropout mean of that side.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import Adapter, DetNet, adapt, forward_head, forward_pyramid
from .rng import Rng
from .tensor import ShapeError, Tensor
from .uncertainty import RatioSchedule, combine_residual, estimate_uncertainty, schedule_ratios

EXTRACTIONS = ("identity", "pearson-norm", "attention")
DISTANCES = ("l2", "pearson", "ssim")
SOURCES = ("teacher", "student", "both", "none")

# softmax temperature 0.5 on the attention logits, written as a multiplier
ATTENTION_TAU = 0.5
STD_EPS = 1e-6
# variances at or below this count as a constant map for the pearson distance
DEGENERATE_VAR = 1e-20


class DegenerateMapWarning(RuntimeWarning):
    """A constant map made the Pearson correlation undefined; it was taken as 0."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    N: int = 5
    schedule: RatioSchedule | None = None
    extraction: str = "pearson-norm"
    distance: str = "l2"
    source: str = "teacher"
    residual: bool = True
    lambda_kd: float = 1.0
    logits_mode: bool = False
    temperature: float = 2.0
    normalize_residual: bool = False

    def __post_init__(self):
        if self.N < 0:
            raise ConfigError("N must be >= 0")
        if self.extraction not in EXTRACTIONS:
            raise ConfigError(f"unknown extraction {self.extraction!r}; expected one of {EXTRACTIONS}")
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}; expected one of {DISTANCES}")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; expected one of {SOURCES}")
        if not (np.isfinite(self.lambda_kd) and self.lambda_kd > 0):
            raise ConfigError("lambda_kd must be finite and positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.N == 0:
            if self.source != "none":
                raise ConfigError("N = 0 requires source = none")
            if self.schedule is not None:
                raise ConfigError("N = 0 takes no ratio schedule")
        elif self.schedule is None:
            object.__setattr__(self, "schedule", RatioSchedule("B", self.N))
        elif self.schedule.N != self.N:
            raise ConfigError(f"schedule.N = {self.schedule.N} disagrees with N = {self.N}")

    @property
    def uses_uncertainty(self) -> bool:
        return self.N > 0 and self.source != "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict() if self.schedule else None
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown DistillConfig fields: {sorted(unknown)}")
        data = dict(data)
        sched = data.get("schedule")
        if isinstance(sched, Mapping):
            sknown = {f.name for f in fields(RatioSchedule)}
            bad = set(sched) - sknown
            if bad:
                raise ConfigError(f"unknown RatioSchedule fields: {sorted(bad)}")
            sched = dict(sched)
            sched.setdefault("N", data.get("N", 5))
            try:
                data["schedule"] = RatioSchedule(**sched)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**data)

    def ratios(self, epoch: int) -> list[float]:
        return schedule_ratios(self.schedule, epoch) if self.uses_uncertainty else []


def describe(cfg: DistillConfig | None) -> str:
    """Short human label for a run configuration.

    The ``[extraction/distance]`` tag (``[LD]`` in logits mode) and the loss
    weight are shown only when they differ from the defaults.
    """
    if cfg is None:
        return "scratch"
    default = DistillConfig()
    kind = "LD" if cfg.logits_mode else f"{cfg.extraction}/{cfg.distance}"
    default_kind = f"{default.extraction}/{default.distance}"
    tags = [] if kind == default_kind else [kind]
    if cfg.lambda_kd != default.lambda_kd:
        tags.append(f"lambda={cfg.lambda_kd:g}")
    suffix = f" [{', '.join(tags)}]" if tags else ""
    if not cfg.uses_uncertainty:
        return "ET baseline" + suffix
    if replace(cfg, logits_mode=False, extraction=default.extraction, distance=default.distance,
               lambda_kd=default.lambda_kd) == default:
        return "UET default" + suffix
    s = cfg.schedule
    res = "+res" if cfg.residual else ""
    return f"UET N={cfg.N} {s.strategy} {cfg.source}{res}{suffix}"


# -- extraction ------------------------------------------------------------


def _spatial_softmax_weights(f: Tensor) -> Tensor:
    # |F| averaged over channels, softmax over the H*W positions, rescaled by H*W
    *lead, C, H, W = f.shape
    a = T.mean(T.abs_(f), axis=-3, keepdims=True)
    w = T.softmax(T.scale(T.reshape(a, (*lead, H * W)), ATTENTION_TAU), axis=-1)
    w = T.reshape(T.scale(w, H * W), (*lead, 1, H, W))
    return T.broadcast_to(w, f.shape)


def _channel_softmax_weights(f: Tensor) -> Tensor:
    *lead, C, H, W = f.shape
    a = T.mean(T.abs_(f), axis=(-2, -1), keepdims=True)
    w = T.softmax(T.scale(T.reshape(a, (*lead, C)), ATTENTION_TAU), axis=-1)
    w = T.reshape(T.scale(w, C), (*lead, C, 1, 1))
    return T.broadcast_to(w, f.shape)


def _standardize(f: Tensor) -> Tensor:
    mu = T.broadcast_to(T.mean(f, axis=(-2, -1), keepdims=True), f.shape)
    xc = T.sub(f, mu)
    var = T.mean(T.square(xc), axis=(-2, -1), keepdims=True)
    # the 1e-12 inside the root keeps d(sqrt)/dvar finite on constant channels
    std = T.add(T.sqrt(T.add(var, 1e-12)), STD_EPS)
    return T.div(xc, T.broadcast_to(std, f.shape))


def extract(kind: str, pyramid: Sequence[Tensor]) -> list[Tensor]:
    """Apply a knowledge-extraction function to every scale.

    identity      features as they are
    pearson-norm  per-channel standardisation over spatial positions
    attention     features weighted by spatial and channel softmax attention of |F|
                  (a simplified, mask-free take on focal feature distillation)
    """
    if kind == "identity":
        return list(pyramid)
    if kind == "pearson-norm":
        return [_standardize(f) for f in pyramid]
    if kind == "attention":
        return [T.mul(T.mul(f, _spatial_softmax_weights(f)), _channel_softmax_weights(f)) for f in pyramid]
    raise ValueError(f"unknown extraction kind {kind!r}")


# -- distances ---------------------------------------------------------------


def _check_congruent(A: Sequence[Tensor], B: Sequence[Tensor]) -> None:
    if len(A) != len(B):
        raise ShapeError(f"scale-count mismatch: {len(A)} vs {len(B)}")
    for s, (a, b) in enumerate(zip(A, B)):
        if a.shape != b.shape:
            raise ShapeError(f"scale {s}: shape mismatch {a.shape} vs {b.shape}")


def _moments(a: Tensor, b: Tensor):
    hw = (-2, -1)
    mu_a = T.mean(a, axis=hw, keepdims=True)
    mu_b = T.mean(b, axis=hw, keepdims=True)
    ac = T.sub(a, T.broadcast_to(mu_a, a.shape))
    bc = T.sub(b, T.broadcast_to(mu_b, b.shape))
    va = T.mean(T.square(ac), axis=hw, keepdims=True)
    vb = T.mean(T.square(bc), axis=hw, keepdims=True)
    cov = T.mean(T.mul(ac, bc), axis=hw, keepdims=True)
    return mu_a, mu_b, va, vb, cov


def _pearson_scale(a: Tensor, b: Tensor) -> Tensor:
    _, _, va, vb, cov = _moments(a, b)
    ok = (va.data > DEGENERATE_VAR) & (vb.data > DEGENERATE_VAR)
    if not ok.all():
        warnings.warn("constant map in pearson distance; correlation taken as 0", DegenerateMapWarning, stacklevel=3)
    okf = ok.astype(np.float64)
    # degenerate channels: denominator forced to 1 and correlation masked to 0
    den = T.sqrt(T.add(T.mul(T.mul(va, vb), Tensor(okf)), Tensor(1.0 - okf)))
    rho = T.mul(T.div(cov, den), Tensor(okf))
    return T.mean(T.sub(Tensor(np.ones(rho.shape)), rho))


SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_EPS = 1e-12


def _ssim_scale(a: Tensor, b: Tensor) -> Tensor:
    mu_a, mu_b, va, vb, cov = _moments(a, b)
    L = T.value_range(a, b)
    c1 = T.add(T.square(T.scale(L, SSIM_K1)), SSIM_EPS)
    c2 = T.add(T.square(T.scale(L, SSIM_K2)), SSIM_EPS)
    num = T.mul(T.add(T.scale(T.mul(mu_a, mu_b), 2.0), c1), T.add(T.scale(cov, 2.0), c2))
    den = T.mul(T.add(T.add(T.square(mu_a), T.square(mu_b)), c1), T.add(T.add(va, vb), c2))
    ssim = T.div(num, den)
    return T.mean(T.sub(Tensor(np.ones(ssim.shape)), ssim))


def _mean_over_scales(values: list[Tensor]) -> Tensor:
    total = values[0]
    for v in values[1:]:
        total = T.add(total, v)
    return T.scale(total, 1.0 / len(values))


def distance(kind: str, A: Sequence[Tensor], B: Sequence[Tensor]) -> Tensor:
    """Scalar transfer distance, averaged over scales (and batch, channels where applicable).

    l2       mean squared difference
    pearson  mean of 1 - rho, rho the spatial correlation per (sample, channel)
    ssim     mean of 1 - SSIM, SSIM taken globally per (sample, channel) with
             C1 = (0.01 L)^2, C2 = (0.03 L)^2 and L the value range of A and B
    """
    _check_congruent(A, B)
    if not A:
        raise ShapeError("empty pyramids")
    if kind == "l2":
        per = [T.mse(a, b) for a, b in zip(A, B)]
    elif kind == "pearson":
        per = [_pearson_scale(a, b) for a, b in zip(A, B)]
    elif kind == "ssim":
        per = [_ssim_scale(a, b) for a, b in zip(A, B)]
    else:
        raise ValueError(f"unknown distance kind {kind!r}")
    return _mean_over_scales(per)


# -- losses ------------------------------------------------------------------


def _require_untracked(pyramid: Sequence[Tensor]) -> None:
    if any(f.requires_grad for f in pyramid):
        raise ValueError("teacher pyramid must not require grad")


def kd_loss_et(F_T: Sequence[Tensor], F_S: Sequence[Tensor], adapter: Adapter | None, cfg: DistillConfig) -> Tensor:
    _require_untracked(F_T)
    if len(F_T) != len(F_S):
        raise ShapeError(f"teacher has {len(F_T)} scales, student has {len(F_S)}")
    d = distance(cfg.distance, extract(cfg.extraction, F_T), extract(cfg.extraction, adapt(adapter, F_S)))
    return T.scale(d, cfg.lambda_kd)


def uncertainty_sides(
    F_T: Sequence[Tensor], S: Sequence[Tensor], cfg: DistillConfig, rng: Rng, epoch: int
) -> tuple[list[Tensor], list[Tensor]]:
    """Substitute ``U_K (+ F)`` on the sides named by ``cfg.source``.

    The teacher side draws from ``rng.fork(0)``, the student side from ``rng.fork(1)``.
    """
    if cfg.source != "none" and cfg.N == 0:
        raise ConfigError("uncertainty source set but N = 0")
    if not cfg.uses_uncertainty:
        return list(F_T), list(S)
    ratios = schedule_ratios(cfg.schedule, epoch)
    t_side, s_side = list(F_T), list(S)
    if cfg.source in ("teacher", "both"):
        est = estimate_uncertainty(F_T, ratios, rng.fork(0))
        t_side = combine_residual(est, F_T, cfg.residual, cfg.normalize_residual)
    if cfg.source in ("student", "both"):
        est = estimate_uncertainty(S, ratios, rng.fork(1))
        s_side = combine_residual(est, S, cfg.residual, cfg.normalize_residual)
    return t_side, s_side


def kd_loss_uet(
    F_T: Sequence[Tensor],
    F_S: Sequence[Tensor],
    adapter: Adapter | None,
    cfg: DistillConfig,
    rng: Rng,
    epoch: int,
) -> Tensor:
    _require_untracked(F_T)
    if len(F_T) != len(F_S):
        raise ShapeError(f"teacher has {len(F_T)} scales, student has {len(F_S)}")
    t_side, s_side = uncertainty_sides(F_T, adapt(adapter, F_S), cfg, rng, epoch)
    d = distance(cfg.distance, extract(cfg.extraction, t_side), extract(cfg.extraction, s_side))
    return T.scale(d, cfg.lambda_kd)


def logits_kd_from_pyramids(
    teacher: DetNet,
    student: DetNet,
    F_T: Sequence[Tensor],
    F_S: Sequence[Tensor],
    cfg: DistillConfig,
    rng: Rng,
    epoch: int,
) -> Tensor:
    """KL(teacher || student) of temperature-softened per-position class distributions."""
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ShapeError(
            f"class-count mismatch: teacher {teacher.spec.num_classes}, student {student.spec.num_classes}"
        )
    _require_untracked(F_T)
    t_side, s_side = uncertainty_sides(F_T, F_S, cfg, rng, epoch)
    with T.no_grad():
        t_logits = forward_head(teacher, t_side)
    s_logits = forward_head(student, s_side)
    per = [T.kl_div(tl, sl, axis=1, temperature=cfg.temperature) for tl, sl in zip(t_logits, s_logits)]
    return T.scale(_mean_over_scales(per), cfg.lambda_kd)


def kd_loss_logits(teacher: DetNet, student: DetNet, image, cfg: DistillConfig, rng: Rng, epoch: int) -> Tensor:
    if not cfg.logits_mode:
        raise ConfigError("kd_loss_logits needs logits_mode = true")
    with T.no_grad():
        F_T = forward_pyramid(teacher, image)
    F_S = forward_pyramid(student, image)
    return logits_kd_from_pyramids(teacher, student, F_T, F_S, cfg, rng, epoch)
