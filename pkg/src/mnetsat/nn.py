"""Neural network building blocks on top of :mod:`mnetsat.tensor`.

Convolutions are computed by im2col + matrix product in NHWC layout. Padding
follows the usual "same" rule: output extent ``ceil(in / stride)`` with the
excess split as evenly as possible (extra pixel at the bottom/right).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import kernels
from .tensor import (
    Function,
    ShapeError,
    Tensor,
    default_dtype,
    relu,
    sigmoid,
    softmax,
    sqrt,
)

# -- shape laws ------------------------------------------------------------


def effective_kernel(k: int, dilation: int) -> int:
    return dilation * (k - 1) + 1


def same_padding(extent: int, k: int, stride: int, dilation: int) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_extent) for "same" padding."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + effective_kernel(k, dilation) - extent, 0)
    return total // 2, total - total // 2, out


def conv_output_extent(extent: int, k: int, stride: int, dilation: int, padding: str) -> int:
    if padding == "same":
        return same_padding(extent, k, stride, dilation)[2]
    if padding == "valid":
        eff = effective_kernel(k, dilation)
        if eff > extent:
            raise ShapeError(f"kernel extent {eff} exceeds input extent {extent}")
        return (extent - eff) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pads(h, w, kh, kw, stride, dilation, padding):
    if padding == "same":
        t, b, _ = same_padding(h, kh, stride, dilation)
        l, r, _ = same_padding(w, kw, stride, dilation)
        return (t, b), (l, r)
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ValueError(f"unknown padding {padding!r}")


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: str = "same"
    filters: int = 1
    depthwise: bool = False

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        if min(self.kernel) < 1 or self.stride < 1 or self.dilation < 1 or self.filters < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return (
            conv_output_extent(h, kh, self.stride, self.dilation, self.padding),
            conv_output_extent(w, kw, self.stride, self.dilation, self.padding),
        )


# -- convolution kernels ---------------------------------------------------


def _pad_input(x, pads, value=0.0):
    (t, b), (l, r) = pads
    if t or b or l or r:
        return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)), constant_values=value)
    return x


def _check_window(hp, wp, eff_h, eff_w):
    if eff_h > hp or eff_w > wp:
        raise ShapeError(f"kernel extent {eff_h}x{eff_w} exceeds padded input {hp}x{wp}")


class Conv2dFn(Function):
    def forward(self, x, w, b=None, stride=1, dilation=1, padding="same"):
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects an NHWC tensor, got shape {x.shape}")
        n, h, wd, c = x.shape
        kh, kw, cin, cout = w.shape
        if c != cin:
            raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
        self.pads = _pads(h, wd, kh, kw, stride, dilation, padding)
        xp = _pad_input(x, self.pads)
        hp, wp = xp.shape[1:3]
        eff_h, eff_w = effective_kernel(kh, dilation), effective_kernel(kw, dilation)
        _check_window(hp, wp, eff_h, eff_w)
        ho, wo = (hp - eff_h) // stride + 1, (wp - eff_w) // stride + 1
        self.geom = (n, hp, wp, ho, wo, stride, dilation)
        if kh == kw == 1 and stride == 1 and xp is x:
            cols = x.reshape(-1, c)
        else:
            cols = kernels.im2col(xp, kh, kw, stride, dilation, ho, wo).reshape(n * ho * wo, kh * kw * c)
        self.cols = cols
        out = cols @ w.reshape(-1, cout)
        if b is not None:
            out += b
        return out.reshape(n, ho, wo, cout)

    def backward(self, g):
        x, w = self.inputs[0], self.inputs[1]
        n, hp, wp, ho, wo, stride, dilation = self.geom
        kh, kw, cin, cout = w.shape
        g2 = g.reshape(-1, cout)
        gw = (self.cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ w.data.reshape(-1, cout).T
            if kh == kw == 1 and stride == 1 and (hp, wp) == x.shape[1:3]:
                gx = dcols.reshape(x.shape)
            else:
                gp = kernels.col2im(dcols.reshape(n, ho, wo, kh, kw, cin), hp, wp, stride, dilation)
                (t, _), (l, _) = self.pads
                gx = gp[:, t : t + x.shape[1], l : l + x.shape[2], :]
        grads = [gx, gw]
        if len(self.inputs) == 3:
            grads.append(g2.sum(axis=0) if self.inputs[2].requires_grad else None)
        return tuple(grads)


class DepthwiseConv2dFn(Function):
    def forward(self, x, w, b=None, stride=1, dilation=1, padding="same"):
        n, h, wd, c = x.shape
        kh, kw, cw = w.shape
        if c != cw:
            raise ShapeError(f"depthwise conv channel mismatch: input has {c}, weight expects {cw}")
        self.pads = _pads(h, wd, kh, kw, stride, dilation, padding)
        xp = _pad_input(x, self.pads)
        hp, wp = xp.shape[1:3]
        eff_h, eff_w = effective_kernel(kh, dilation), effective_kernel(kw, dilation)
        _check_window(hp, wp, eff_h, eff_w)
        ho, wo = (hp - eff_h) // stride + 1, (wp - eff_w) // stride + 1
        self.geom = (n, hp, wp, ho, wo, stride, dilation)
        self.cols = kernels.im2col(xp, kh, kw, stride, dilation, ho, wo).reshape(n * ho * wo, kh * kw, c)
        out = np.einsum("ptc,tc->pc", self.cols, w.reshape(kh * kw, c))
        if b is not None:
            out += b
        return out.reshape(n, ho, wo, c)

    def backward(self, g):
        x, w = self.inputs[0], self.inputs[1]
        n, hp, wp, ho, wo, stride, dilation = self.geom
        kh, kw, c = w.shape
        g2 = g.reshape(-1, c)
        gw = np.einsum("ptc,pc->tc", self.cols, g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2[:, None, :] * w.data.reshape(1, kh * kw, c)
            gp = kernels.col2im(dcols.reshape(n, ho, wo, kh, kw, c), hp, wp, stride, dilation)
            (t, _), (l, _) = self.pads
            gx = gp[:, t : t + x.shape[1], l : l + x.shape[2], :]
        grads = [gx, gw]
        if len(self.inputs) == 3:
            grads.append(g2.sum(axis=0) if self.inputs[2].requires_grad else None)
        return tuple(grads)


def conv2d(x: Tensor, spec: ConvSpec, params: Sequence[Optional[Tensor]]) -> Tensor:
    """Cross-correlation of an NHWC map with ``params = (weight, bias|None)``.

    Weight layout is (kh, kw, C_in, filters), or (kh, kw, C) when
    ``spec.depthwise``.
    """
    weight, bias = (list(params) + [None])[:2]
    fn = DepthwiseConv2dFn if spec.depthwise else Conv2dFn
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return fn.apply(*inputs, stride=spec.stride, dilation=spec.dilation, padding=spec.padding)


# -- pooling / resampling ----------------------------------------------------


class MaxPool2dFn(Function):
    def forward(self, x, window, stride, padding):
        if window < 1 or stride < 1:
            raise ShapeError(f"degenerate pooling window {window} / stride {stride}")
        self.pads = _pads(x.shape[1], x.shape[2], window, window, stride, 1, padding)
        xp = _pad_input(x, self.pads, value=-np.inf)
        hp, wp = xp.shape[1:3]
        _check_window(hp, wp, window, window)
        ho, wo = (hp - window) // stride + 1, (wp - window) // stride + 1
        out, self.argmax = kernels.maxpool_forward(xp, window, stride, ho, wo)
        self.geom = (hp, wp, window, stride)
        return out

    def backward(self, g):
        x = self.inputs[0]
        hp, wp, window, stride = self.geom
        gp = kernels.maxpool_backward(g, self.argmax, hp, wp, window, stride)
        (t, _), (l, _) = self.pads
        return (gp[:, t : t + x.shape[1], l : l + x.shape[2], :],)


class AvgPool2dFn(Function):
    def forward(self, x, window, stride, padding):
        if window < 1 or stride < 1:
            raise ShapeError(f"degenerate pooling window {window} / stride {stride}")
        n, h, w, c = x.shape
        self.pads = _pads(h, w, window, window, stride, 1, padding)
        xp = _pad_input(x, self.pads)
        hp, wp = xp.shape[1:3]
        _check_window(hp, wp, window, window)
        ho, wo = (hp - window) // stride + 1, (wp - window) // stride + 1
        cols = kernels.im2col(xp, window, window, stride, 1, ho, wo)
        ones = _pad_input(np.ones((1, h, w, 1), dtype=x.dtype), self.pads)
        self.count = kernels.im2col(ones, window, window, stride, 1, ho, wo).sum(axis=(3, 4))
        self.geom = (n, hp, wp, ho, wo, window, stride)
        return cols.sum(axis=(3, 4)) / self.count

    def backward(self, g):
        x = self.inputs[0]
        n, hp, wp, ho, wo, window, stride = self.geom
        per = (g / self.count)[:, :, :, None, None, :]
        cols = np.broadcast_to(per, (n, ho, wo, window, window, x.shape[3]))
        gp = kernels.col2im(np.ascontiguousarray(cols), hp, wp, stride, 1)
        (t, _), (l, _) = self.pads
        return (gp[:, t : t + x.shape[1], l : l + x.shape[2], :],)


def pool(x: Tensor, kind: str = "max", window: int = 2, stride: Optional[int] = None, padding: str = "valid") -> Tensor:
    """Max or average pooling over square windows (stride defaults to window)."""
    stride = window if stride is None else stride
    if kind == "max":
        return MaxPool2dFn.apply(x, window=window, stride=stride, padding=padding)
    if kind == "avg":
        return AvgPool2dFn.apply(x, window=window, stride=stride, padding=padding)
    raise ValueError(f"unknown pooling kind {kind!r}")


class UpsampleNearestFn(Function):
    def forward(self, x, factor):
        self.factor = factor
        return x.repeat(factor, axis=1).repeat(factor, axis=2)

    def backward(self, g):
        n, h, w, c = self.inputs[0].shape
        f = self.factor
        return (g.reshape(n, h, f, w, f, c).sum(axis=(2, 4)),)


def upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an NHWC map by an integer factor."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be positive, got {factor}")
    if factor == 1:
        return x
    return UpsampleNearestFn.apply(x, factor=factor)


def upsample2x(x: Tensor) -> Tensor:
    return upsample(x, 2)


# -- normalization / activation / dropout -------------------------------------

NORM_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=axes, keepdims=True)
    return d / sqrt(var + eps) * gamma + beta


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    n, h, w, c = x.shape
    if c % groups:
        raise ShapeError(f"{groups} groups do not divide {c} channels")
    xr = x.reshape(n, h, w, groups, c // groups)
    mu = xr.mean(axis=(1, 2, 4), keepdims=True)
    d = xr - mu
    var = (d * d).mean(axis=(1, 2, 4), keepdims=True)
    y = (d / sqrt(var + eps)).reshape(n, h, w, c)
    return y * gamma + beta


def default_groups(channels: int, preferred: int = 8) -> int:
    """Largest divisor of ``channels`` not exceeding ``preferred``."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def normalize(x: Tensor, kind: Union[str, tuple] = "layer", params: Sequence[Tensor] = ()) -> Tensor:
    """Layer or group normalization followed by a per-channel affine map.

    ``kind`` is ``"layer"``, ``"group"`` (default group count) or
    ``("group", g)``. ``params`` is ``(scale, shift)``; identity when empty.
    """
    c = x.shape[-1]
    if params:
        gamma, beta = params
    else:
        gamma = Tensor(np.ones(c, dtype=x.dtype))
        beta = Tensor(np.zeros(c, dtype=x.dtype))
    if kind == "layer":
        return layer_norm(x, gamma, beta)
    if kind == "group":
        return group_norm(x, default_groups(c), gamma, beta)
    if isinstance(kind, tuple) and kind[0] == "group":
        return group_norm(x, int(kind[1]), gamma, beta)
    raise ValueError(f"unknown normalization {kind!r}")


def activate(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


# -- parameters and modules ---------------------------------------------------


class Parameter(Tensor):
    """Trainable leaf tensor; ``init`` names the initializer that produced it."""

    def __init__(self, data, init: str = "custom", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.init = init


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=None) -> Parameter:
    limit = math.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-limit, limit, size=shape), init="he_uniform", dtype=dtype or default_dtype())


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=None) -> Parameter:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=shape), init="xavier_uniform", dtype=dtype or default_dtype())


def zeros_param(shape, dtype=None) -> Parameter:
    return Parameter(np.zeros(shape), init="zeros", dtype=dtype or default_dtype())


def ones_param(shape, dtype=None) -> Parameter:
    return Parameter(np.ones(shape), init="ones", dtype=dtype or default_dtype())


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()


class Conv2d(Module):
    """Convolution layer; He-uniform weights, zero bias."""

    def __init__(self, in_channels: int, filters: int, kernel=3, stride=1, dilation=1, padding="same",
                 depthwise=False, bias=True, rng=None, init="he_uniform", dtype=None):
        rng = rng if rng is not None else np.random.default_rng()
        self.spec = ConvSpec(kernel=kernel, stride=stride, dilation=dilation, padding=padding,
                             filters=filters, depthwise=depthwise)
        kh, kw = self.spec.kernel
        if depthwise:
            if filters != in_channels:
                raise ValueError("depthwise conv keeps the channel count")
            shape, fan_in, fan_out = (kh, kw, in_channels), kh * kw, kh * kw
        else:
            shape, fan_in, fan_out = (kh, kw, in_channels, filters), kh * kw * in_channels, kh * kw * filters
        if init == "xavier_uniform":
            self.weight = xavier_uniform(shape, fan_in, fan_out, rng, dtype)
        elif init == "zeros":
            self.weight = zeros_param(shape, dtype)
        else:
            self.weight = he_uniform(shape, fan_in, rng, dtype)
        self.bias = zeros_param((filters,), dtype) if bias else None
        self.in_channels = in_channels

    def forward(self, x):
        return conv2d(x, self.spec, (self.weight, self.bias))

    def output_shape(self, shape):
        h, w, _ = shape
        return (*self.spec.output_hw(h, w), self.spec.filters)


class Linear(Module):
    """Position-wise fully connected layer acting on the last axis."""

    def __init__(self, in_features: int, out_features: int, rng=None, init="he_uniform", dtype=None):
        rng = rng if rng is not None else np.random.default_rng()
        if init == "xavier_uniform":
            self.weight = xavier_uniform((in_features, out_features), in_features, out_features, rng, dtype)
        else:
            self.weight = he_uniform((in_features, out_features), in_features, rng, dtype)
        self.bias = zeros_param((out_features,), dtype)

    def forward(self, x):
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
        out = flat @ self.weight + self.bias
        return out.reshape(*lead, out.shape[-1]) if x.ndim != 2 else out


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=None):
        self.weight = ones_param((channels,), dtype)
        self.bias = zeros_param((channels,), dtype)

    def forward(self, x):
        return normalize(x, "layer", (self.weight, self.bias))


class GroupNorm(Module):
    def __init__(self, channels: int, groups: Optional[int] = None, dtype=None):
        self.groups = groups or default_groups(channels)
        if channels % self.groups:
            raise ValueError(f"{self.groups} groups do not divide {channels} channels")
        self.weight = ones_param((channels,), dtype)
        self.bias = zeros_param((channels,), dtype)

    def forward(self, x):
        return normalize(x, ("group", self.groups), (self.weight, self.bias))


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return dropout(x, self.rate, self.training, self.rng)


def se_block(x: Tensor, params: Sequence[Tensor]) -> Tensor:
    """Squeeze-and-excitation gating with ``params = (W1, b1, W2, b2)``."""
    w1, b1, w2, b2 = params
    n, _, _, c = x.shape
    squeezed = x.mean(axis=(1, 2))
    hidden = relu(squeezed @ w1 + b1)
    gate = sigmoid(hidden @ w2 + b2)
    return x * gate.reshape(n, 1, 1, c)


class SEBlock(Module):
    """Channel recalibration; bottleneck width ``max(1, C // reduction)``."""

    def __init__(self, channels: int, reduction: int = 16, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype)

    def forward(self, x):
        return se_block(x, (self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias))
