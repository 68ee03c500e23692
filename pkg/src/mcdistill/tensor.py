"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every differentiable op appends a node carrying a monotonically increasing id,
so ``backward`` can walk the reachable subgraph in exact reverse append order.
Data lives in a numpy array; ``shape`` and ``data`` mirror it.

Only scalar broadcasting is supported: a binary op takes either two tensors
of identical shape, a tensor and a 0-d tensor, or a tensor and a Python number.
Anything else must go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "zeros",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "abs_",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum_",
    "mean",
    "broadcast_to",
    "reshape",
    "conv2d",
    "pool2x",
    "upsample2x",
    "softmax",
    "log_softmax",
    "value_range",
    "mse",
    "cross_entropy",
    "kl_div",
    "loss",
    "backward",
    "zero_grads",
    "no_grad",
    "graph_nodes",
    "custom_op",
    "set_debug",
]

_ids = itertools.count()
_grad_enabled = True
_debug = os.environ.get("MCDISTILL_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


@dataclass(eq=False)
class Node:
    """One record of the compute graph: which op made a tensor, and from what."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node(self) -> Node | None:
        return self._node

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def set_debug(flag: bool) -> None:
    """Toggle finiteness assertions on every forward result."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], bw) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.requires_grad = track
    out.grad = None
    out.name = None
    out._node = Node(op, inputs, bw, next(_ids)) if track else None
    return out


def custom_op(
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    bw: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Register an op whose backward is supplied by the caller."""
    return _make(np.asarray(data, dtype=np.float64), op, tuple(inputs), bw)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise -------------------------------------------------------------


def _binary_operands(a: Tensor, b, op: str) -> tuple[Tensor, Tensor]:
    b = _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a: Tensor, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _reduce_to(ga, ad.shape), _reduce_to(-ga * out, bd.shape)

    return _make(out, "div", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, scale (b is a constant), relu."""
    if op in _BINARY:
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, b)
    if op == "relu":
        return relu(a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and shape ----------------------------------------------------


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the backward sums over the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    if len(src) != len(shape):
        raise ShapeError(f"broadcast_to: rank mismatch {src} -> {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s != t)
    if any(src[i] != 1 for i in axes):
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}")
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        "broadcast",
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


# -- spatial ops ---------------------------------------------------------------


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [C_in,H,W] (or batched) with ``w`` [C_out,C_in,k,k]."""
    xb, squeeze = _as_batched(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be [C_out,C_in,k,k], got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size {k} not supported (1 or 3)")
    B, C, H, W = xb.shape
    if C != c_in:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {c_in}")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ShapeError(f"conv2d: output size not integral for H={H}, W={W}, k={k}, stride={stride}, pad={pad}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must be [{c_out}], got {b.shape}")

    # channels-last im2col: every copy below has a contiguous inner axis
    Hp, Wp = H + 2 * pad, W + 2 * pad
    xh = np.zeros((B, Hp, Wp, C))
    xh[:, pad : pad + H, pad : pad + W, :] = xb.data.transpose(0, 2, 3, 1)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.empty((B, Ho, Wo, k, k, C))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i : i + hs : stride, j : j + ws : stride, :]
    cols = cols.reshape(-1, k * k * C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, c_out).transpose(0, 3, 1, 2))
    del xh

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = None
        if w.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2))
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if xb.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, k, k, C)
            gxh = np.zeros((B, Hp, Wp, C))
            for i in range(k):
                for j in range(k):
                    gxh[:, i : i + hs : stride, j : j + ws : stride, :] += gcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxh[:, pad : pad + H, pad : pad + W, :].transpose(0, 3, 1, 2))
        return gx, gw, gb

    inputs = (xb, w) if b is None else (xb, w, b)
    res = _make(out, "conv2d", inputs, bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def pool2x(x: Tensor) -> Tensor:
    """2x2 mean pooling over the trailing two axes."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"pool2x: spatial dims must be even, got {H}x{W}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _make(out, "pool2x", (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the trailing two axes."""
    H, W = x.shape[-2:]
    lead = x.shape[:-2]
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        return (g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)),)

    return _make(out, "upsample2x", (x,), bw)


# -- softmax family --------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), bw)


def value_range(*ts: Tensor) -> Tensor:
    """max - min over every element of every input, as a 0-d tensor.

    The gradient routes +1 to the (first) argmax and -1 to the (first) argmin,
    which is exact wherever the extremes are unique.
    """
    if not ts:
        raise ValueError("value_range needs at least one tensor")
    flat = np.concatenate([t.data.ravel() for t in ts])
    hi, lo = int(np.argmax(flat)), int(np.argmin(flat))
    sizes = [t.size for t in ts]
    offsets = np.cumsum([0, *sizes])

    def bw(g):
        grads = [np.zeros(t.shape) for t in ts]
        for idx, sign in ((hi, 1.0), (lo, -1.0)):
            which = int(np.searchsorted(offsets, idx, side="right") - 1)
            grads[which].reshape(-1)[idx - offsets[which]] += sign * float(g)
        return grads

    return _make(np.asarray(flat[hi] - flat[lo]), "range", tuple(ts), bw)


# -- losses ------------------------------------------------------------------


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"{op}: non-finite input")


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    _check_finite("mse", pred.data, target.data)
    return mean(square(sub(pred, target)))


def _class_axis(ndim: int) -> int:
    # [K] and [K,H,W] are unbatched; [B,K] and [B,K,H,W] carry a batch axis
    return 0 if ndim in (1, 3) else 1


def cross_entropy(logits: Tensor, labels: np.ndarray, axis: int | None = None) -> Tensor:
    """Mean softmax cross-entropy over every position.

    ``labels`` holds integer class indices with the logits' shape minus the class axis.
    """
    labels = np.asarray(labels)
    axis = _class_axis(logits.ndim) if axis is None else axis
    expected = logits.shape[:axis] + logits.shape[axis + 1 :]
    if labels.shape != expected:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    _check_finite("cross_entropy", logits.data)
    K = logits.shape[axis]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"cross_entropy: labels outside [0, {K})")
    onehot = np.moveaxis(np.eye(K)[labels.astype(np.int64)], -1, axis)
    picked = sum_(mul(log_softmax(logits, axis), Tensor(onehot)), axis=axis)
    return scale(mean(picked), -1.0)


def kl_div(p_logits: Tensor, q_logits: Tensor, axis: int = 1, temperature: float = 1.0) -> Tensor:
    """Mean over positions of KL(softmax(p/T) || softmax(q/T)) along ``axis``."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_div: shape mismatch {p_logits.shape} vs {q_logits.shape}")
    _check_finite("kl_div", p_logits.data, q_logits.data)
    inv_t = 1.0 / temperature
    log_p = log_softmax(scale(p_logits, inv_t), axis)
    log_q = log_softmax(scale(q_logits, inv_t), axis)
    p = exp(log_p)
    return mean(sum_(mul(p, sub(log_p, log_q)), axis=axis))


def loss(kind: str, pred: Tensor, target) -> Tensor:
    """Dispatch by name: ``mse``, ``softmax-cross-entropy`` or ``kl-divergence``.

    For ``kl-divergence`` the arguments are two probability tensors of the same
    shape laid out like logits; the result is KL(target || pred).
    """
    if kind == "mse":
        return mse(pred, target)
    if kind == "softmax-cross-entropy":
        return cross_entropy(pred, target)
    if kind == "kl-divergence":
        target = _as_tensor(target)
        if pred.shape != target.shape:
            raise ShapeError(f"kl-divergence: shape mismatch {pred.shape} vs {target.shape}")
        _check_finite("kl-divergence", pred.data, target.data)
        axis = _class_axis(pred.ndim)
        return mean(sum_(mul(target, sub(log(target), log(pred))), axis=axis))
    raise ValueError(f"unknown loss kind {kind!r}")


# -- backward ------------------------------------------------------------------


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Tracked tensors reachable from ``root``, in append order."""
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(t._node.inputs)
    found.sort(key=lambda t: t._node.id)
    return found


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every requires_grad tensor reached."""
    if root.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward needs a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward on a tensor that does not require grad")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    reached: dict[int, Tensor] = {id(root): root}
    for t in reversed(graph_nodes(root)):
        g = grads.get(id(t))
        if g is None:
            continue
        for inp, gi in zip(t._node.inputs, t._node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                reached[key] = inp
    for key, t in reached.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
