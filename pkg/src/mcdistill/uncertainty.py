"""Monte Carlo dropout estimate of teacher knowledge and its residual combination.

The estimate ``U_K`` is the mean of N inverted-dropout copies of an already
computed feature pyramid.  Each copy uses its own dropout ratio, taken from a
:class:`RatioSchedule`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ShapeError, Tensor

STRATEGIES = ("A", "B", "C")
_GRID = float(2**24)
FIXED_RATIO = 0.15


@dataclass(frozen=True)
class RatioSchedule:
    """Per-pass dropout ratios.

    A: every pass uses 0.15.
    B: arithmetic, ``base + step * i`` for pass i = 0..N-1.
    C: B shifted up by ``epoch_growth * epoch``.
    All values are clamped to ``clamp_max``.
    """

    strategy: str = "B"
    N: int = 5
    base: float = 0.05
    step: float = 0.05
    epoch_growth: float = 0.025
    clamp_max: float = 0.95

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown ratio strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.N < 1:
            raise ValueError("a ratio schedule needs N >= 1")
        if not 0.0 <= self.clamp_max < 1.0:
            raise ValueError("clamp_max must lie in [0, 1)")
        if self.base < 0 or self.step < 0 or self.epoch_growth < 0:
            raise ValueError("base, step and epoch_growth must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def schedule_ratios(schedule: RatioSchedule, epoch: int) -> list[float]:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.strategy == "A":
        raw = [FIXED_RATIO] * schedule.N
    else:
        raw = [schedule.base + schedule.step * i for i in range(schedule.N)]
        if schedule.strategy == "C":
            raw = [r + schedule.epoch_growth * epoch for r in raw]
    # rounding to 12 places removes accumulation drift, so 0.05 + 2 * 0.05 == 0.15
    return [min(round(r, 12), schedule.clamp_max) for r in raw]


@dataclass
class UncertaintyEstimate:
    U_K: list[Tensor]
    N_used: int
    ratios_used: list[float] = field(default_factory=list)


def _check_ratio(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {p}")


def keep_probability(p: float) -> float:
    """Exact P(u >= float32(p)) for float32 uniforms u = k / 2^24."""
    return 1.0 - math.ceil(float(np.float32(p)) * _GRID) / _GRID


def dropout_masks(shapes: Sequence[tuple[int, ...]], p: float, rng: Rng) -> list[np.ndarray]:
    """Inverted-dropout multipliers (0 or 1/keep), one independent array per shape.

    Masks come from float32 uniforms (half the cost of float64).  The scale is
    the reciprocal of the exact keep probability of that test, so the
    multiplier has expectation 1 with no rounding bias.
    """
    _check_ratio(p)
    if p == 0.0:
        return [np.ones(s) for s in shapes]
    threshold = np.float32(p)
    scale = 1.0 / keep_probability(p)
    return [(rng.uniform(s, np.float32) >= threshold) * scale for s in shapes]


def dropout_pass(pyramid: Sequence[Tensor], p: float, rng: Rng) -> list[Tensor]:
    """One inverted-dropout copy of the pyramid; gradients flow through kept elements."""
    masks = dropout_masks([f.shape for f in pyramid], p, rng)
    return [T.mul(f, Tensor(m)) for f, m in zip(pyramid, masks)]


def estimate_uncertainty(pyramid: Sequence[Tensor], ratios: Sequence[float], rng: Rng) -> UncertaintyEstimate:
    """Average of ``len(ratios)`` dropout copies, pass i dropping at ``ratios[i]``.

    Pass i draws its masks from ``rng.fork(i)``.  The N masks are folded into a
    single multiplier per scale before touching the features, which gives the
    same result as averaging N masked copies (up to float association) while
    recording one graph node per scale.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ValueError("estimate_uncertainty needs at least one ratio")
    shapes = [f.shape for f in pyramid]
    total = [np.zeros(s) for s in shapes]
    for i, p in enumerate(ratios):
        for acc, m in zip(total, dropout_masks(shapes, p, rng.fork(i))):
            acc += m
    n = len(ratios)
    U = []
    for f, acc in zip(pyramid, total):
        acc /= n
        U.append(T.mul(f, Tensor(acc)))
    return UncertaintyEstimate(U, n, ratios)


def combine_residual(
    estimate: UncertaintyEstimate | Sequence[Tensor],
    pyramid: Sequence[Tensor],
    residual: bool,
    normalize: bool = False,
) -> list[Tensor]:
    """``U_K + F`` (residual) or ``U_K`` alone; ``normalize`` halves the residual sum."""
    U = estimate.U_K if isinstance(estimate, UncertaintyEstimate) else list(estimate)
    if len(U) != len(pyramid):
        raise ShapeError(f"estimate has {len(U)} scales, pyramid has {len(pyramid)}")
    for s, (u, f) in enumerate(zip(U, pyramid)):
        if u.shape != f.shape:
            raise ShapeError(f"scale {s}: estimate {u.shape} vs pyramid {f.shape}")
    if not residual:
        return list(U)
    out = [T.add(u, f) for u, f in zip(U, pyramid)]
    if normalize:
        out = [T.scale(o, 0.5) for o in out]
    return out
