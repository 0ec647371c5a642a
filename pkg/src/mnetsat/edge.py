"""Sobel gradient magnitude and the edge-guided feature enrichment unit."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .nn import ConvSpec, Conv2d, Module, conv2d
from .tensor import ShapeError, Tensor, pad, relu, sqrt

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
MAG_FLOOR = 1e-12

_SOBEL_SPEC = ConvSpec(kernel=3, padding="valid", filters=1, depthwise=True)


def sobel_magnitude(x: Tensor) -> Tensor:
    """Channel-averaged Sobel gradient magnitude, shape N x H x W x 1.

    Borders are handled by edge replication, so a constant image maps to
    ``sqrt(1e-12)`` everywhere. The kernels are constants; gradients reach
    ``x`` only.
    """
    if x.ndim != 4:
        raise ShapeError(f"sobel expects an NHWC tensor, got shape {x.shape}")
    n, h, w, c = x.shape
    if h < 3 or w < 3:
        raise ShapeError(f"sobel needs spatial extent >= 3, got {h}x{w}")
    xp = pad(x, {1: (1, 1), 2: (1, 1)}, mode="edge")
    kx = Tensor(np.repeat(SOBEL_X[:, :, None], c, axis=2), dtype=x.dtype)
    ky = Tensor(np.repeat(SOBEL_Y[:, :, None], c, axis=2), dtype=x.dtype)
    gx = conv2d(xp, _SOBEL_SPEC, (kx, None))
    gy = conv2d(xp, _SOBEL_SPEC, (ky, None))
    mag = sqrt(gx * gx + gy * gy + MAG_FLOOR)
    return mag.mean(axis=3, keepdims=True)


def egfe_forward(x: Tensor, params: Sequence[Tensor], sobel_enabled: bool = True) -> Tensor:
    """Two 3x3 conv+ReLU layers, plus the broadcast edge map of the input.

    ``params = (w1, b1, w2, b2)``; spatial extent is preserved.
    """
    w1, b1, w2, b2 = params
    spec1 = ConvSpec(kernel=3, filters=w1.shape[-1])
    spec2 = ConvSpec(kernel=3, filters=w2.shape[-1])
    y = relu(conv2d(relu(conv2d(x, spec1, (w1, b1))), spec2, (w2, b2)))
    if sobel_enabled:
        y = y + sobel_magnitude(x)
    return y


class EGFE(Module):
    def __init__(self, in_channels: int, filters: int, sobel: bool = True, rng=None, dtype=None):
        self.conv1 = Conv2d(in_channels, filters, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(filters, filters, 3, rng=rng, dtype=dtype)
        self.sobel = sobel
        self.filters = filters

    def forward(self, x: Tensor, record: Optional[list] = None, name: str = "egfe") -> Tensor:
        y = relu(self.conv2(relu(self.conv1(x))))
        if self.sobel:
            edges = sobel_magnitude(x)
            if record is not None:
                record.append((f"{name}.edge", edges))
            y = y + edges
        return y
