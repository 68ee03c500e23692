"""Central finite-difference checks of the autodiff engine.

``gradcheck`` compares backward() against ``(f(x+eps e_i) - f(x-eps e_i)) / 2eps``
coordinate by coordinate.  ``CASES`` covers every differentiable op plus the
complete distillation loss paths, and backs the ``gradcheck`` CLI command.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .distill import DistillConfig, distance, extract, kd_loss_uet, logits_kd_from_pyramids
from .model import PyramidSpec, adapt, build_adapter, build_detnet, forward_head, forward_pyramid
from .rng import Rng
from .tensor import Tensor
from .uncertainty import RatioSchedule

FLOOR = 1e-8


def gradcheck(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)."""
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(*xs)
        T.backward(out)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        with T.no_grad():
            for t, g_ad in zip(xs, analytic):
                flat = t.data.reshape(-1)
                g_flat = g_ad.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = f(*xs).item()
                    flat[i] = orig - eps
                    lo = f(*xs).item()
                    flat[i] = orig
                    g_fd = (hi - lo) / (2.0 * eps)
                    err = abs(g_flat[i] - g_fd) / max(abs(g_flat[i]), abs(g_fd), FLOOR)
                    worst = max(worst, err)
        return worst
    finally:
        for t, (req, grad) in zip(xs, saved):
            t.requires_grad = req
            t.grad = grad


# -- case library ----------------------------------------------------------------


def _away_from_zero(rng: Rng, shape, margin: float = 0.1) -> np.ndarray:
    # keeps relu/abs kinks out of the finite-difference stencil
    x = rng.normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _positive(rng: Rng, shape) -> np.ndarray:
    return 0.5 + rng.uniform(shape)


def _scalarize(t: Tensor, w: np.ndarray) -> Tensor:
    # random projection makes every output coordinate matter
    return T.sum_(T.mul(t, Tensor(w)))


def _unary_case(op, make_x):
    def build(rng: Rng):
        x = Tensor(make_x(rng, (2, 3, 4)))
        w = rng.normal(x.shape)
        return (lambda a: _scalarize(op(a), w)), [x]

    return build


def _binary_case(op, make_b=None):
    def build(rng: Rng):
        a = Tensor(rng.normal((3, 4)))
        b = Tensor((make_b or (lambda r, s: r.normal(s)))(rng.fork(1), (3, 4)))
        w = rng.normal((3, 4))
        return (lambda x, y: _scalarize(op(x, y), w)), [a, b]

    return build


def _scalar_broadcast_case(rng: Rng):
    a = Tensor(rng.normal((3, 4)))
    s = Tensor(np.array(1.7))
    w = rng.normal((3, 4))
    return (lambda x, c: _scalarize(T.mul(T.add(x, c), c), w)), [a, s]


def _conv_case(k: int, stride: int, pad: int, bias: bool, size: int = 6):
    def build(rng: Rng):
        x = Tensor(rng.normal((2, 3, size, size)))
        w = Tensor(rng.normal((4, 3, k, k)))
        b = Tensor(rng.normal((4,)))
        H = (size + 2 * pad - k) // stride + 1
        proj = rng.normal((2, 4, H, H))
        if bias:
            return (lambda x_, w_, b_: _scalarize(T.conv2d(x_, w_, b_, stride=stride, pad=pad), proj)), [x, w, b]
        return (lambda x_, w_: _scalarize(T.conv2d(x_, w_, stride=stride, pad=pad), proj)), [x, w]

    return build


def _spatial_case(op, out_hw):
    def build(rng: Rng):
        x = Tensor(rng.normal((2, 2, 4, 4)))
        w = rng.normal((2, 2, out_hw, out_hw))
        return (lambda a: _scalarize(op(a), w)), [x]

    return build


def _reduce_case(rng: Rng):
    x = Tensor(rng.normal((2, 3, 4)))
    w = rng.normal((2, 1, 4))
    return (lambda a: _scalarize(T.mean(T.sum_(a, axis=0, keepdims=True), axis=1, keepdims=True), w[:1])), [x]


def _broadcast_case(rng: Rng):
    x = Tensor(rng.normal((2, 1, 4)))
    w = rng.normal((2, 3, 4))
    return (lambda a: _scalarize(T.broadcast_to(a, (2, 3, 4)), w)), [x]


def _reshape_case(rng: Rng):
    x = Tensor(rng.normal((2, 6)))
    w = rng.normal((3, 4))
    return (lambda a: _scalarize(T.reshape(a, (3, 4)), w)), [x]


def _softmax_case(fn):
    def build(rng: Rng):
        x = Tensor(rng.normal((3, 5)))
        w = rng.normal((3, 5))
        return (lambda a: _scalarize(fn(a, axis=1), w)), [x]

    return build


def _range_case(rng: Rng):
    a = Tensor(rng.normal((3, 4)))
    b = Tensor(rng.normal((2, 2)))
    return (lambda x, y: T.value_range(x, y)), [a, b]


def _mse_case(rng: Rng):
    a = Tensor(rng.normal((2, 3, 4)))
    b = Tensor(rng.normal((2, 3, 4)))
    return (lambda x, y: T.mse(x, y)), [a, b]


def _ce_case(rng: Rng):
    logits = Tensor(rng.normal((2, 4, 3, 3)))
    labels = rng.integers(0, 4, (2, 3, 3))
    return (lambda z: T.cross_entropy(z, labels)), [logits]


def _kl_case(rng: Rng):
    p = Tensor(rng.normal((2, 4, 3, 3)))
    q = Tensor(rng.normal((2, 4, 3, 3)))
    return (lambda a, b: T.kl_div(a, b, axis=1, temperature=2.0)), [p, q]


def _toy_pyramid(rng: Rng, channels: int = 3, batch: int = 2, sizes=(4, 2)) -> list[Tensor]:
    return [Tensor(_away_from_zero(rng.fork(s), (batch, channels, n, n))) for s, n in enumerate(sizes)]


def _extract_case(kind: str):
    def build(rng: Rng):
        pyr = _toy_pyramid(rng)
        ws = [rng.fork(10 + s).normal(f.shape) for s, f in enumerate(pyr)]

        def f(*xs):
            out = extract(kind, xs)
            total = _scalarize(out[0], ws[0])
            for o, w in zip(out[1:], ws[1:]):
                total = T.add(total, _scalarize(o, w))
            return total

        return f, pyr

    return build


def _distance_case(kind: str):
    def build(rng: Rng):
        A = _toy_pyramid(rng.fork(0))
        B = _toy_pyramid(rng.fork(1))
        return (lambda a0, a1, b0, b1: distance(kind, [a0, a1], [b0, b1])), A + B

    return build


def _adapt_l2_case(rng: Rng):
    F_S = _toy_pyramid(rng.fork(0), channels=2)
    F_T = [Tensor(f.data) for f in _toy_pyramid(rng.fork(1), channels=3)]
    adapter = build_adapter(2, 3, 2, rng.fork(2))
    params = F_S + adapter.weights

    def f(s0, s1, w0, w1):
        adapter.weights = [w0, w1]
        return distance("l2", F_T, adapt(adapter, [s0, s1]))

    return f, params


def _uet_case(extraction: str, dist: str, source: str = "teacher"):
    """Full UET loss on a 2-scale toy pyramid, differentiated w.r.t. student features and adapter."""

    def build(rng: Rng):
        F_S = _toy_pyramid(rng.fork(0), channels=2)
        F_T = [Tensor(f.data) for f in _toy_pyramid(rng.fork(1), channels=3)]
        adapter = build_adapter(2, 3, 2, rng.fork(2))
        cfg = DistillConfig(
            N=3, schedule=RatioSchedule("B", 3), extraction=extraction, distance=dist, source=source
        )
        drop = rng.fork(3)

        def f(s0, s1, w0, w1):
            adapter.weights = [w0, w1]
            return kd_loss_uet(F_T, [s0, s1], adapter, cfg, drop, epoch=1)

        return f, F_S + adapter.weights

    return build


def _net_case(rng: Rng):
    """UET loss with attention + ssim, differentiated w.r.t. every student parameter."""
    spec = PyramidSpec(scales=2, input_shape=(1, 4, 4))
    student = build_detnet(spec, 4, 1, "student", rng.fork(0))
    teacher = build_detnet(spec, 5, 1, "teacher", rng.fork(1))
    for name, p in student.params.items():
        if name.endswith(".b"):
            p.data[:] = 0.1 + 0.1 * rng.fork(7).uniform(p.shape)
    image = 0.2 + rng.fork(2).uniform((2, 1, 4, 4))
    with T.no_grad():
        F_T = forward_pyramid(teacher, image)
    adapter = build_adapter(4, 5, 2, rng.fork(3))
    cfg = DistillConfig(extraction="attention", distance="ssim")
    names = list(student.params)

    def f(*ps):
        student.params = dict(zip(names, ps))
        return kd_loss_uet(F_T, forward_pyramid(student, image), adapter, cfg, rng.fork(4), epoch=0)

    return f, [student.params[n] for n in names]


def _logits_case(rng: Rng):
    spec = PyramidSpec(scales=2, input_shape=(1, 4, 4))
    student = build_detnet(spec, 4, 1, "student", rng.fork(0))
    teacher = build_detnet(spec, 4, 1, "teacher", rng.fork(1))
    F_T = [Tensor(f.data) for f in _toy_pyramid(rng.fork(2), channels=4, sizes=(4, 2))]
    F_S = _toy_pyramid(rng.fork(3), channels=4, sizes=(4, 2))
    cfg = DistillConfig(logits_mode=True)

    def f(s0, s1):
        return logits_kd_from_pyramids(teacher, student, F_T, [s0, s1], cfg, rng.fork(4), epoch=0)

    return f, F_S


CASES: dict[str, Callable[[Rng], tuple[Callable[..., Tensor], list[Tensor]]]] = {
    "add": _binary_case(T.add),
    "sub": _binary_case(T.sub),
    "mul": _binary_case(T.mul),
    "div": _binary_case(T.div, lambda r, s: _positive(r, s)),
    "scalar-broadcast": _scalar_broadcast_case,
    "scale": _unary_case(lambda a: T.scale(a, -0.7), lambda r, s: r.normal(s)),
    "relu": _unary_case(T.relu, _away_from_zero),
    "abs": _unary_case(T.abs_, _away_from_zero),
    "exp": _unary_case(T.exp, lambda r, s: r.normal(s)),
    "log": _unary_case(T.log, _positive),
    "sqrt": _unary_case(T.sqrt, _positive),
    "square": _unary_case(T.square, lambda r, s: r.normal(s)),
    "sum-mean": _reduce_case,
    "broadcast": _broadcast_case,
    "reshape": _reshape_case,
    "conv2d-1x1": _conv_case(1, 1, 0, True),
    "conv2d-3x3-pad1": _conv_case(3, 1, 1, True),
    "conv2d-3x3-stride2": _conv_case(3, 2, 1, False, size=7),
    "pool2x": _spatial_case(T.pool2x, 2),
    "upsample2x": _spatial_case(T.upsample2x, 8),
    "softmax": _softmax_case(T.softmax),
    "log-softmax": _softmax_case(T.log_softmax),
    "value-range": _range_case,
    "mse": _mse_case,
    "cross-entropy": _ce_case,
    "kl-divergence": _kl_case,
    "extract-identity": _extract_case("identity"),
    "extract-pearson-norm": _extract_case("pearson-norm"),
    "extract-attention": _extract_case("attention"),
    "distance-l2": _distance_case("l2"),
    "distance-pearson": _distance_case("pearson"),
    "distance-ssim": _distance_case("ssim"),
    "adapt-l2": _adapt_l2_case,
    "uet-attention-l2": _uet_case("attention", "l2"),
    "uet-attention-pearson": _uet_case("attention", "pearson"),
    "uet-attention-ssim": _uet_case("attention", "ssim"),
    "uet-student-source": _uet_case("pearson-norm", "l2", source="student"),
    "uet-both-sources": _uet_case("identity", "ssim", source="both"),
    "uet-full-network": _net_case,
    "logits-kd": _logits_case,
}


def run_cases(names: Sequence[str] | None = None, eps: float = 1e-5, seed: int = 0) -> dict[str, float]:
    results = {}
    for i, name in enumerate(names or CASES):
        f, xs = CASES[name](Rng(seed).fork(i))
        results[name] = gradcheck(f, xs, eps)
    return results
