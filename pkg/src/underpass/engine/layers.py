"""Layer vocabulary, parameter initialisation and sequential networks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class Conv2d:
    filters: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        _positive(filters=self.filters, kernel=self.kernel, stride=self.stride)


@dataclass(frozen=True)
class TransposeConv2d:
    filters: int
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        _positive(filters=self.filters, kernel=self.kernel, stride=self.stride)


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Dense:
    width: int

    def __post_init__(self):
        _positive(width=self.width)


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Tanh:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class InstanceNorm:
    pass


@dataclass(frozen=True)
class ResidualBlock:
    """conv-IN-ReLU-conv-IN with an identity skip; channels are preserved."""

    filters: int

    def __post_init__(self):
        _positive(filters=self.filters)


LayerKind = Union[
    Conv2d, TransposeConv2d, MaxPool2x2, Dense, ReLU, Tanh, Softmax, Dropout, InstanceNorm, ResidualBlock
]


def _positive(**values: int) -> None:
    for key, value in values.items():
        if value < 1:
            raise ValueError(f"{key} must be >= 1, got {value}")


# (name, shape, decays) per parameter; ``decays`` marks kernels subject to L2.
ParamSpec = tuple[str, tuple[int, ...], bool]


def output_shape(layer: LayerKind, in_shape: Sequence[int]) -> tuple[int, ...]:
    """Per-sample output shape (no batch axis) in closed form."""
    in_shape = tuple(in_shape)
    if isinstance(layer, Conv2d):
        h, w, _ = _need_hwc(layer, in_shape)
        return (
            F.conv_output_size(h, layer.kernel, layer.stride),
            F.conv_output_size(w, layer.kernel, layer.stride),
            layer.filters,
        )
    if isinstance(layer, TransposeConv2d):
        h, w, _ = _need_hwc(layer, in_shape)
        return (h * layer.stride, w * layer.stride, layer.filters)
    if isinstance(layer, MaxPool2x2):
        h, w, c = _need_hwc(layer, in_shape)
        if h < 2 or w < 2:
            raise ShapeError(f"MaxPool2x2 cannot pool spatial size {h}x{w}")
        return (h // 2, w // 2, c)
    if isinstance(layer, Dense):
        return (layer.width,)
    if isinstance(layer, (InstanceNorm,)):
        _need_hwc(layer, in_shape)
        return in_shape
    if isinstance(layer, ResidualBlock):
        _, _, c = _need_hwc(layer, in_shape)
        if c != layer.filters:
            raise ShapeError(f"ResidualBlock({layer.filters}) needs {layer.filters} input channels, got shape {in_shape}")
        return in_shape
    return in_shape


def _need_hwc(layer: LayerKind, in_shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(in_shape) != 3:
        raise ShapeError(f"{type(layer).__name__} expects an HxWxC input, got shape {in_shape}")
    return in_shape  # type: ignore[return-value]


def param_specs(layer: LayerKind, in_shape: Sequence[int]) -> list[ParamSpec]:
    in_shape = tuple(in_shape)
    if isinstance(layer, Conv2d):
        c = in_shape[-1]
        return [("w", (layer.kernel, layer.kernel, c, layer.filters), True), ("b", (layer.filters,), False)]
    if isinstance(layer, TransposeConv2d):
        c = in_shape[-1]
        return [("w", (layer.kernel, layer.kernel, c, layer.filters), True), ("b", (layer.filters,), False)]
    if isinstance(layer, Dense):
        fan_in = int(np.prod(in_shape))
        return [("w", (fan_in, layer.width), True), ("b", (layer.width,), False)]
    if isinstance(layer, InstanceNorm):
        c = in_shape[-1]
        return [("gamma", (c,), False), ("beta", (c,), False)]
    if isinstance(layer, ResidualBlock):
        f = layer.filters
        specs: list[ParamSpec] = []
        for part in ("a", "b"):
            specs += [
                (f"conv_{part}.w", (3, 3, f, f), True),
                (f"conv_{part}.b", (f,), False),
                (f"norm_{part}.gamma", (f,), False),
                (f"norm_{part}.beta", (f,), False),
            ]
        return specs
    return []


def init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    """Fan-in scaled uniform for kernels, ones for norm scales, zeros otherwise."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "w":
        fan_in = int(np.prod(shape[:-1]))
        limit = math.sqrt(6.0 / fan_in)
        # drawn directly in the target dtype; VGG-sized kernels stay within memory
        w = rng.random(size=shape, dtype=np.dtype(dtype).type)
        w *= 2 * limit
        w -= limit
        return w
    if name.endswith("norm_b.gamma"):
        # residual branches start silent, so each block begins as the identity
        return np.zeros(shape, dtype=dtype)
    if leaf == "gamma":
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


def forward(
    layer: LayerKind,
    x: Tensor,
    params: Sequence[Tensor],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Apply one layer to a batched tensor."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if isinstance(layer, Conv2d):
        return F.conv2d(x, params[0], params[1], layer.stride)
    if isinstance(layer, TransposeConv2d):
        return F.conv_transpose2d(x, params[0], params[1], layer.stride)
    if isinstance(layer, MaxPool2x2):
        return F.max_pool2x2(x)
    if isinstance(layer, Dense):
        return F.dense(x, params[0], params[1])
    if isinstance(layer, ReLU):
        return F.relu(x)
    if isinstance(layer, Tanh):
        return F.tanh(x)
    if isinstance(layer, Softmax):
        return F.softmax(x)
    if isinstance(layer, Dropout):
        return F.dropout(x, layer.rate, rng, mode == "train")
    if isinstance(layer, InstanceNorm):
        return F.instance_norm(x, params[0], params[1])
    if isinstance(layer, ResidualBlock):
        if x.data.ndim != 4 or x.shape[3] != layer.filters:
            raise ShapeError(f"ResidualBlock({layer.filters}) got input shape {x.shape}")
        h = F.conv2d(x, params[0], params[1])
        h = F.relu(F.instance_norm(h, params[2], params[3]))
        h = F.conv2d(h, params[4], params[5])
        h = F.instance_norm(h, params[6], params[7])
        return x + h
    raise TypeError(f"unknown layer kind {layer!r}")


def layer_label(layer: LayerKind) -> str:
    return type(layer).__name__.lower()


class Sequential:
    """An ordered stack of layers with its own named, seeded parameters.

    Parameters are created in declaration order and named
    ``"<index>.<layer>.<param>"``; that order is the canonical order used by
    optimizers and checkpoints.
    """

    def __init__(
        self,
        layers: Iterable[LayerKind],
        input_shape: Sequence[int],
        seed: int = 0,
        dtype=np.float32,
    ):
        self.layers: list[LayerKind] = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: list[Tensor] = []
        self.decay_flags: list[bool] = []
        self._slices: list[slice] = []
        self.shapes: list[tuple[int, ...]] = [self.input_shape]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            start = len(self.params)
            for name, pshape, decays in param_specs(layer, shape):
                full = f"{i}.{layer_label(layer)}.{name}"
                t = Tensor(init_param(full, pshape, rng, self.dtype), requires_grad=True, name=full)
                self.params.append(t)
                self.decay_flags.append(decays)
            self._slices.append(slice(start, len(self.params)))
            shape = output_shape(layer, shape)
            self.shapes.append(shape)
        self.output_shape = shape

    def __call__(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects per-sample shape {self.input_shape}, got batch shape {x.shape}")
        for layer, sl in zip(self.layers, self._slices):
            x = forward(layer, x, self.params[sl], mode, rng)
        return x

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params:
            p.requires_grad = flag

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} arrays, got {len(arrays)}")
        for p, a in zip(self.params, arrays):
            if a.shape != p.shape:
                raise ShapeError(f"parameter {p.name}: shape {a.shape} does not match {p.shape}")
            p.data = np.array(a, dtype=self.dtype, copy=True)
