"""Hybrid multi-scale attention bridge: MSFA -> SEAt -> CE-ASPP.

All three blocks map N x h x w x C to the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import (
    Conv2d,
    Dropout,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    SEBlock,
    pool,
    upsample,
    xavier_uniform,
)
from .tensor import ShapeError, Tensor, concat, relu, softmax


@dataclass
class HMAttConfig:
    msfa_dilations: tuple[int, ...] = (1, 6, 12, 18)
    ceaspp_dilations: tuple[int, ...] = (1, 4, 8, 12)
    heads: int = 8
    spatial_reduction: int = 2
    compression_factor: int = 4
    ffn_expansion: int = 2
    dropout_rate: float = 0.1
    se_reduction: int = 16
    msfa_fusion_kernel: int = 7
    seat_dilation: int = 2

    def validate(self, channels: int) -> None:
        if channels % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide {channels} channels")
        if channels % self.compression_factor:
            raise ShapeError(f"compression factor {self.compression_factor} does not divide {channels} channels")
        if min(self.msfa_dilations + self.ceaspp_dilations) < 1:
            raise ValueError("dilation rates must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")


class MSFA(Module):
    """Parallel dilated 3x3 convs, each SE-recalibrated, fused by a large conv
    and normalized with a softmax over channels."""

    def __init__(self, channels: int, cfg: HMAttConfig, use_se: bool = True, rng=None, dtype=None):
        self.branches = [Conv2d(channels, channels, 3, dilation=d, rng=rng, dtype=dtype) for d in cfg.msfa_dilations]
        self.se = [SEBlock(channels, cfg.se_reduction, rng=rng, dtype=dtype) for _ in cfg.msfa_dilations] if use_se else []
        width = channels * len(cfg.msfa_dilations)
        self.fuse = Conv2d(width, channels, cfg.msfa_fusion_kernel, rng=rng, dtype=dtype)

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        return [conv(x) for conv in self.branches]

    def forward(self, x: Tensor) -> Tensor:
        feats = self.branch_outputs(x)
        if self.se:
            feats = [se(f) for se, f in zip(self.se, feats)]
        return softmax(self.fuse(relu(concat(feats, axis=-1))), axis=-1)


class _ReducedProjection(Module):
    # LayerNorm -> dilated 3x3 conv -> average pooling, for one of Q/K/V
    def __init__(self, channels, cfg: HMAttConfig, use_ln, use_pool, rng, dtype):
        self.norm = LayerNorm(channels, dtype=dtype) if use_ln else None
        self.conv = Conv2d(channels, channels, 3, dilation=cfg.seat_dilation, rng=rng, dtype=dtype)
        self.reduction = cfg.spatial_reduction if use_pool else 1

    def forward(self, x):
        if self.norm is not None:
            x = self.norm(x)
        x = self.conv(x)
        if self.reduction > 1:
            x = pool(x, "avg", self.reduction, self.reduction)
        return x


class MHSEAt(Module):
    """Multi-head scaled dot-product attention over a spatially reduced grid."""

    def __init__(self, channels: int, cfg: HMAttConfig, use_ln: bool = True, use_pool: bool = True,
                 rng=None, dtype=None):
        if channels % cfg.heads:
            raise ShapeError(f"{cfg.heads} heads do not divide {channels} channels")
        rng = rng if rng is not None else np.random.default_rng()
        self.heads = cfg.heads
        self.q = _ReducedProjection(channels, cfg, use_ln, use_pool, rng, dtype)
        self.k = _ReducedProjection(channels, cfg, use_ln, use_pool, rng, dtype)
        self.v = _ReducedProjection(channels, cfg, use_ln, use_pool, rng, dtype)
        self.w_q = xavier_uniform((channels, channels), channels, channels, rng, dtype)
        self.w_k = xavier_uniform((channels, channels), channels, channels, rng, dtype)
        self.w_v = xavier_uniform((channels, channels), channels, channels, rng, dtype)
        self.reduction = cfg.spatial_reduction if use_pool else 1
        self.last_attention: Optional[np.ndarray] = None

    def _split_heads(self, grid: Tensor, weight: Parameter) -> Tensor:
        n, h, w, c = grid.shape
        tokens = grid.reshape(n * h * w, c) @ weight
        return tokens.reshape(n, h * w, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Scaled dot-product attention on (N, heads, T, d) tensors."""
        d = q.shape[-1]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
        probs = softmax(scores, axis=-1)
        self.last_attention = probs.data
        return probs @ v

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        r = self.reduction
        if r > h or r > w or h % r or w % r:
            raise ShapeError(f"spatial reduction {r} incompatible with {h}x{w} grid")
        qg = self.q(x)
        hr, wr = qg.shape[1:3]
        q = self._split_heads(qg, self.w_q)
        k = self._split_heads(self.k(x), self.w_k)
        v = self._split_heads(self.v(x), self.w_v)
        out = self.attend(q, k, v)
        grid = out.transpose(0, 2, 1, 3).reshape(n, hr, wr, c)
        return upsample(grid, r) + x


class SEAt(Module):
    """MHSEAt followed by dropout and a residual position-wise feed-forward."""

    def __init__(self, channels: int, cfg: HMAttConfig, use_ln: bool = True, use_pool: bool = True,
                 rng=None, dtype=None):
        self.attention = MHSEAt(channels, cfg, use_ln=use_ln, use_pool=use_pool, rng=rng, dtype=dtype)
        self.dropout = Dropout(cfg.dropout_rate)
        self.fc1 = Linear(channels, cfg.ffn_expansion * channels, rng=rng, dtype=dtype)
        self.fc2 = Linear(cfg.ffn_expansion * channels, channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        m = self.dropout(self.attention(x))
        return m + self.fc2(relu(self.fc1(m)))


class _ConvGNReLU(Module):
    def __init__(self, cin, cout, kernel=1, dilation=1, depthwise=False, rng=None, dtype=None):
        self.conv = Conv2d(cin, cout, kernel, dilation=dilation, depthwise=depthwise, rng=rng, dtype=dtype)
        self.norm = GroupNorm(cout, dtype=dtype)

    def forward(self, x):
        return relu(self.norm(self.conv(x)))


class CEASPP(Module):
    """Channel-compressed atrous pyramid with gated residual fusion.

    Branches: depthwise atrous 3x3 convs plus a (2x2 stride-1 max-pool,
    pointwise conv) route, each followed by GroupNorm and ReLU.
    """

    def __init__(self, channels: int, cfg: HMAttConfig, compress: bool = True, gate: bool = True,
                 rng=None, dtype=None):
        if compress and channels % cfg.compression_factor:
            raise ShapeError(f"compression factor {cfg.compression_factor} does not divide {channels} channels")
        inner = channels // cfg.compression_factor if compress else channels
        self.compress = _ConvGNReLU(channels, inner, 1, rng=rng, dtype=dtype) if compress else None
        self.atrous = [_ConvGNReLU(inner, inner, 3, dilation=d, depthwise=True, rng=rng, dtype=dtype)
                       for d in cfg.ceaspp_dilations]
        self.pool_branch = _ConvGNReLU(inner, inner, 1, rng=rng, dtype=dtype)
        self.fuse = _ConvGNReLU(inner * (len(cfg.ceaspp_dilations) + 1), channels, 1, rng=rng, dtype=dtype)
        self.gate = gate

    def gate_path(self, x: Tensor) -> Tensor:
        fc = self.compress(x) if self.compress is not None else x
        branches = [b(fc) for b in self.atrous]
        branches.append(self.pool_branch(pool(fc, "max", 2, 1, padding="same")))
        return self.fuse(concat(branches, axis=-1))

    def forward(self, x: Tensor) -> Tensor:
        g = self.gate_path(x)
        if self.gate:
            return x * g + x
        return g + x


class HMAtt(Module):
    """Bridge composed of the enabled blocks; disabled blocks act as identity."""

    def __init__(self, channels: int, cfg: HMAttConfig, use_msfa=True, use_seat=True, use_ceaspp=True,
                 msfa_se=True, seat_ln=True, seat_gap=True, ceaspp_cc=True, ceaspp_icf=True,
                 rng=None, dtype=None):
        cfg.validate(channels)
        self.msfa = MSFA(channels, cfg, use_se=msfa_se, rng=rng, dtype=dtype) if use_msfa else None
        self.seat = SEAt(channels, cfg, use_ln=seat_ln, use_pool=seat_gap, rng=rng, dtype=dtype) if use_seat else None
        self.ceaspp = CEASPP(channels, cfg, compress=ceaspp_cc, gate=ceaspp_icf, rng=rng, dtype=dtype) if use_ceaspp else None

    def forward(self, x: Tensor, record: Optional[list] = None) -> Tensor:
        for name in ("msfa", "seat", "ceaspp"):
            block = getattr(self, name)
            if block is not None:
                x = block(x)
                if record is not None:
                    record.append((f"bridge.{name}", x))
        return x
