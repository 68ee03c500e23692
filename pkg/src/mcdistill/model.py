"""Teacher/student pyramid networks and the channel-alignment adapter.

A DetNet is ``depth`` 3x3 conv+ReLU layers per stage, 2x2 mean pooling between
stages, 1x1 lateral convs on every stage output and a nearest-neighbour
top-down pathway (a minimal FPN).  Each pyramid level feeds its own 1x1
classification head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .rng import Rng
from .tensor import ShapeError, Tensor

FeaturePyramid = list  # list[Tensor], one [B, C, H_i, W_i] map per scale

TEACHER = "teacher"
STUDENT = "student"


@dataclass(frozen=True)
class PyramidSpec:
    scales: int = 3
    input_shape: tuple[int, int, int] = (1, 32, 32)
    num_classes: int = 4
    # None means "same as the network width"
    channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.scales < 2:
            raise ValueError("a pyramid needs at least 2 scales")
        _, H, W = self.input_shape
        step = 2 ** (self.scales - 1)
        if H % step or W % step:
            raise ValueError(f"input {H}x{W} not divisible by 2^(scales-1) = {step}")

    def spatial(self, scale: int) -> tuple[int, int]:
        _, H, W = self.input_shape
        return H >> scale, W >> scale

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DetNet:
    spec: PyramidSpec
    width: int
    depth: int
    role: str
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.spec.channels or self.width

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def digest(self) -> str:
        return checkpoint.digest(self.state())

    def freeze(self) -> "DetNet":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.role = TEACHER
        return self

    def manifest(self) -> dict:
        return {"kind": "detnet", "role": self.role, "spec": self.spec.to_dict(), "width": self.width, "depth": self.depth}

    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        tensors = dict(self.state())
        if extra:
            tensors.update(extra)
        checkpoint.save(path, tensors, {**self.manifest(), **(meta or {})})


def _he(rng: Rng, shape: tuple[int, ...], gain: float = 2.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(shape) * np.sqrt(gain / fan_in)


def build_detnet(spec: PyramidSpec, width: int, depth: int, role: str, rng: Rng) -> DetNet:
    if width < 4:
        raise ValueError("width must be >= 4")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if role not in (TEACHER, STUDENT):
        raise ValueError(f"role must be teacher or student, got {role!r}")
    track = role == STUDENT
    c_img = spec.input_shape[0]
    ch = spec.channels or width
    net = DetNet(spec, width, depth, role)
    shapes: dict[str, tuple[int, ...]] = {}
    for s in range(spec.scales):
        for d in range(depth):
            c_in = c_img if s == 0 and d == 0 else width
            shapes[f"stage{s}.conv{d}.w"] = (width, c_in, 3, 3)
            shapes[f"stage{s}.conv{d}.b"] = (width,)
        shapes[f"lateral{s}.w"] = (ch, width, 1, 1)
        shapes[f"lateral{s}.b"] = (ch,)
        shapes[f"head{s}.w"] = (spec.num_classes, ch, 1, 1)
        shapes[f"head{s}.b"] = (spec.num_classes,)
    for i, (name, shape) in enumerate(shapes.items()):
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name.startswith("stage"):
            data = _he(rng.fork(i), shape)
        else:
            # linear (no ReLU follows): unit-variance scaling
            data = _he(rng.fork(i), shape, gain=1.0)
        net.params[name] = Tensor(data, requires_grad=track, name=name)
    return net


def lightweight(width: int, depth: int) -> tuple[int, int]:
    """Half width and half depth, floored at the build minimums."""
    return max(4, width // 2), max(1, depth // 2)


def _batched(image) -> tuple[Tensor, bool]:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        return T.reshape(x, (1, *x.shape)), True
    return x, False


def forward_pyramid(net: DetNet, image) -> FeaturePyramid:
    """Image [C,H,W] or [B,C,H,W] -> list of M maps [B, channels, H/2^i, W/2^i].

    Unbatched input still yields batched maps with B = 1.
    """
    x, _ = _batched(image)
    if x.ndim != 4 or tuple(x.shape[1:]) != net.spec.input_shape:
        raise ShapeError(f"image shape {x.shape} does not match spec input {net.spec.input_shape}")
    p = net.params
    h = x
    laterals = []
    for s in range(net.spec.scales):
        if s:
            h = T.pool2x(h)
        for d in range(net.depth):
            h = T.relu(T.conv2d(h, p[f"stage{s}.conv{d}.w"], p[f"stage{s}.conv{d}.b"], pad=1))
        laterals.append(T.conv2d(h, p[f"lateral{s}.w"], p[f"lateral{s}.b"]))
    pyramid = [laterals[-1]]
    for lat in reversed(laterals[:-1]):
        pyramid.append(T.add(lat, T.upsample2x(pyramid[-1])))
    return pyramid[::-1]


def forward_head(net: DetNet, pyramid: Sequence[Tensor]) -> list[Tensor]:
    if len(pyramid) != net.spec.scales:
        raise ShapeError(f"pyramid has {len(pyramid)} scales, net expects {net.spec.scales}")
    out = []
    for s, f in enumerate(pyramid):
        if f.shape[1] != net.channels:
            raise ShapeError(f"scale {s}: pyramid has {f.shape[1]} channels, head expects {net.channels}")
        out.append(T.conv2d(f, net.params[f"head{s}.w"], net.params[f"head{s}.b"]))
    return out


@dataclass
class Adapter:
    in_channels: int
    out_channels: int
    weights: list[Tensor]

    @property
    def scales(self) -> int:
        return len(self.weights)

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.weights)

    def state(self) -> dict[str, np.ndarray]:
        return {f"adapter{s}.w": w.data for s, w in enumerate(self.weights)}


def build_adapter(in_channels: int, out_channels: int, scales: int, rng: Rng) -> Adapter:
    """Per-scale 1x1 conv; identity init when channel counts agree, scaled normal otherwise."""
    weights = []
    for s in range(scales):
        if in_channels == out_channels:
            w = np.eye(out_channels).reshape(out_channels, in_channels, 1, 1)
        else:
            w = _he(rng.fork(s), (out_channels, in_channels, 1, 1), gain=1.0)
        weights.append(Tensor(w, requires_grad=True, name=f"adapter{s}.w"))
    return Adapter(in_channels, out_channels, weights)


def adapter_for(teacher: DetNet, student: DetNet, rng: Rng) -> Adapter:
    if teacher.spec.scales != student.spec.scales:
        raise ShapeError("teacher and student pyramids have different scale counts")
    return build_adapter(student.channels, teacher.channels, teacher.spec.scales, rng)


def adapt(adapter: Adapter | None, pyramid: Sequence[Tensor]) -> FeaturePyramid:
    """Apply g to a student pyramid; ``None`` is the identity (homogeneous setting)."""
    if adapter is None:
        return list(pyramid)
    if len(pyramid) != adapter.scales:
        raise ShapeError(f"pyramid has {len(pyramid)} scales, adapter has {adapter.scales}")
    out = []
    for s, (f, w) in enumerate(zip(pyramid, adapter.weights)):
        if f.shape[-3] != adapter.in_channels:
            raise ShapeError(f"scale {s}: {f.shape[-3]} channels, adapter expects {adapter.in_channels}")
        out.append(T.conv2d(f, w))
    return out


def load_detnet(path: str | Path, role: str | None = None) -> tuple[DetNet, dict[str, np.ndarray], dict]:
    """Rebuild a DetNet from a checkpoint; returns (net, leftover tensors, manifest)."""
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "detnet":
        raise checkpoint.CheckpointError(f"{path}: not a DetNet checkpoint")
    spec = PyramidSpec(**{**meta["spec"], "input_shape": tuple(meta["spec"]["input_shape"])})
    role = role or meta["role"]
    net = DetNet(spec, int(meta["width"]), int(meta["depth"]), role)
    expected = build_detnet(spec, net.width, net.depth, STUDENT, Rng(0)).params
    for name in expected:
        if name not in tensors:
            raise checkpoint.CheckpointError(f"{path}: missing tensor {name}")
        net.params[name] = Tensor(tensors.pop(name), requires_grad=role == STUDENT, name=name)
    return net, tensors, meta
