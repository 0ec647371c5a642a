"""Full encoder / bridge / decoder segmentation network and its shape contract."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .edge import EGFE
from .hmatt import HMAtt, HMAttConfig
from .nn import Conv2d, Dropout, Module, conv_output_extent, pool, upsample2x
from .tensor import ShapeError, Tensor, concat, sigmoid

# encoder (block, H, W, C) rows at 512 x 512 input with 64 base filters
REFERENCE_ENCODER_DIMS = (
    ("EGFE1", 512, 512, 64),
    ("Down1", 256, 256, 64),
    ("EGFE2", 256, 256, 128),
    ("Down2", 128, 128, 128),
    ("EGFE3", 128, 128, 256),
    ("Down3", 64, 64, 256),
    ("EGFE4", 64, 64, 512),
    ("Down4", 32, 32, 512),
    ("EGFE5", 32, 32, 1024),
    ("Down5", 16, 16, 1024),
)

# decoder (block, H, W, C) rows at the same setting; the stage-1 EGFE row is
# omitted since a 1-channel head follows it
REFERENCE_DECODER_DIMS = (
    ("Up5", 32, 32, 1024),
    ("EGFE5", 32, 32, 512),
    ("Up4", 64, 64, 512),
    ("EGFE4", 64, 64, 256),
    ("Up3", 128, 128, 256),
    ("EGFE3", 128, 128, 128),
    ("Up2", 256, 256, 128),
    ("EGFE2", 256, 256, 64),
    ("Up1", 512, 512, 64),
)


HEAD_INIT_SCALE = 1e-2


@dataclass
class Ablation:
    egfe_sobel: bool = True
    use_msfa: bool = True
    use_seat: bool = True
    use_ceaspp: bool = True
    msfa_se: bool = True
    seat_ln: bool = True
    seat_gap: bool = True
    ceaspp_cc: bool = True
    ceaspp_icf: bool = True

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def all_off(cls) -> "Ablation":
        return cls(**{name: False for name in cls.names()})


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (512, 512)
    base_filters: int = 64
    stages: int = 5
    hmatt: HMAttConfig = field(default_factory=HMAttConfig)
    ablation: Ablation = field(default_factory=Ablation)
    in_channels: int = 3

    def __post_init__(self):
        if isinstance(self.input_size, int):
            self.input_size = (self.input_size, self.input_size)
        self.input_size = tuple(int(v) for v in self.input_size)

    def validate(self) -> None:
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        factor = 2 ** self.stages
        h, w = self.input_size
        if h % factor or w % factor:
            raise ShapeError(f"input {h}x{w} is not divisible by 2^{self.stages}={factor}")

    def encoder_filters(self, stage: int) -> int:
        return self.base_filters * 2 ** (stage - 1)

    def decoder_filters(self, stage: int) -> int:
        # halves the skip width at every stage, never below base_filters
        return self.base_filters * 2 ** max(stage - 2, 0)

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder_filters(self.stages)

    def to_dict(self) -> dict:
        return asdict(self)


class MNetSAt(Module):
    """U-shaped segmentation network with an attention bridge.

    Encoder stage i: EGFE (base * 2^(i-1) filters) then 2x2 max-pool.
    Decoder stage i: 2x upsample, concatenate the stage-i encoder output,
    EGFE. Head: 1x1 conv to one channel and sigmoid.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=None):
        cfg.validate()
        self.cfg = cfg
        ab = cfg.ablation
        self.encoder = []
        cin = cfg.in_channels
        for i in range(1, cfg.stages + 1):
            f = cfg.encoder_filters(i)
            self.encoder.append(EGFE(cin, f, sobel=ab.egfe_sobel, rng=rng, dtype=dtype))
            cin = f
        self.bridge = HMAtt(
            cfg.bottleneck_channels, cfg.hmatt,
            use_msfa=ab.use_msfa, use_seat=ab.use_seat, use_ceaspp=ab.use_ceaspp,
            msfa_se=ab.msfa_se, seat_ln=ab.seat_ln, seat_gap=ab.seat_gap,
            ceaspp_cc=ab.ceaspp_cc, ceaspp_icf=ab.ceaspp_icf,
            rng=rng, dtype=dtype,
        )
        # decoder[0] is stage 1 so that names line up with the encoder
        decoder = {}
        up_channels = cfg.bottleneck_channels
        for i in range(cfg.stages, 0, -1):
            f = cfg.decoder_filters(i)
            decoder[i] = EGFE(up_channels + cfg.encoder_filters(i), f, sobel=ab.egfe_sobel, rng=rng, dtype=dtype)
            up_channels = f
        self.decoder = [decoder[i] for i in range(1, cfg.stages + 1)]
        # shrunken init: the untrained network predicts ~0.5 instead of
        # saturating on the large unnormalized decoder activations, while
        # still passing gradient to every upstream layer
        self.head = Conv2d(cfg.decoder_filters(1), 1, 1, rng=rng, dtype=dtype)
        self.head.weight.data *= HEAD_INIT_SCALE

    def set_rng(self, rng: np.random.Generator) -> None:
        """Give every dropout layer the generator it draws masks from."""
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def logits(self, x: Tensor, record: Optional[list] = None) -> Tensor:
        cfg = self.cfg
        expected = (*cfg.input_size, cfg.in_channels)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model expects N x {expected[0]} x {expected[1]} x {expected[2]} input, got {x.shape}")
        skips = []
        for i, block in enumerate(self.encoder, start=1):
            x = block(x, record=record, name=f"enc{i}.egfe")
            skips.append(x)
            x = pool(x, "max", 2, 2)
            if record is not None:
                record.append((f"enc{i}.egfe", skips[-1]))
                record.append((f"enc{i}.down", x))
        x = self.bridge(x, record=record)
        for i in range(cfg.stages, 0, -1):
            x = upsample2x(x)
            if record is not None:
                record.append((f"dec{i}.up", x))
            x = concat([x, skips[i - 1]], axis=-1)
            x = self.decoder[i - 1](x, record=record, name=f"dec{i}.egfe")
            if record is not None:
                record.append((f"dec{i}.egfe", x))
        out = self.head(x)
        if record is not None:
            record.append(("head", out))
        return out

    def forward(self, x: Tensor, record: Optional[list] = None) -> Tensor:
        return sigmoid(self.logits(x, record=record))


def build(cfg: ModelConfig, rng: Optional[np.random.Generator] = None, seed: int = 0, dtype=None) -> MNetSAt:
    rng = rng if rng is not None else np.random.default_rng(seed)
    model = MNetSAt(cfg, rng, dtype=dtype)
    model.set_rng(np.random.default_rng(rng.integers(2**63)))
    return model


def forward(model: MNetSAt, batch) -> Tensor:
    return model(batch if isinstance(batch, Tensor) else Tensor(batch))


# -- symbolic shape propagation ----------------------------------------------


@dataclass
class ShapeTrace:
    entries: list[tuple[str, tuple[int, int, int]]] = field(default_factory=list)

    def add(self, name: str, extents: tuple[int, int, int]) -> tuple[int, int, int]:
        self.entries.append((name, tuple(int(v) for v in extents)))
        return self.entries[-1][1]

    def __getitem__(self, name: str) -> tuple[int, int, int]:
        for key, ext in self.entries:
            if key == name:
                return ext
        raise KeyError(name)

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "H", "W", "C"])
        for name, (h, w, c) in self.entries:
            writer.writerow([name, h, w, c])
        return buf.getvalue()

    def format(self) -> str:
        width = max(len(n) for n in self.names()) if self.entries else 0
        return "\n".join(f"{name:<{width}}  N x {h} x {w} x {c}" for name, (h, w, c) in self.entries)


def _conv_shape(name, shape, filters, k, dilation=1, stride=1):
    h, w, _ = shape
    try:
        return (conv_output_extent(h, k, stride, dilation, "same"), conv_output_extent(w, k, stride, dilation, "same"), filters)
    except ShapeError as exc:
        raise ShapeError(f"{name}: {exc}") from None


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{name}: {msg}")


def trace_shapes(cfg: ModelConfig) -> ShapeTrace:
    """Propagate extents through the network without allocating anything."""
    try:
        cfg.validate()
    except ShapeError as exc:
        raise ShapeError(f"input: {exc}") from None
    ab, hc = cfg.ablation, cfg.hmatt
    trace = ShapeTrace()
    shape = trace.add("input", (*cfg.input_size, cfg.in_channels))
    skips = {}
    for i in range(1, cfg.stages + 1):
        f = cfg.encoder_filters(i)
        name = f"enc{i}.egfe"
        mid = _conv_shape(name, shape, f, 3)
        shape = _conv_shape(name, mid, f, 3)
        _require(shape[:2] == trace.entries[-1][1][:2], name, "EGFE must preserve spatial extent")
        skips[i] = trace.add(name, shape)
        h, w, c = shape
        _require(h % 2 == 0 and w % 2 == 0, f"enc{i}.down", f"cannot halve {h}x{w}")
        shape = trace.add(f"enc{i}.down", (h // 2, w // 2, c))

    c = shape[2]
    try:
        hc.validate(c)
    except ShapeError as exc:
        raise ShapeError(f"bridge: {exc}") from None
    if ab.use_msfa:
        for d in hc.msfa_dilations:
            trace.add(f"bridge.msfa.branch_d{d}", _conv_shape(f"bridge.msfa.branch_d{d}", shape, c, 3, dilation=d))
        cat = trace.add("bridge.msfa.concat", (shape[0], shape[1], c * len(hc.msfa_dilations)))
        shape = trace.add("bridge.msfa", _conv_shape("bridge.msfa.fuse", cat, c, hc.msfa_fusion_kernel))
    if ab.use_seat:
        r = hc.spatial_reduction if ab.seat_gap else 1
        h, w, _ = shape
        _require(r <= h and r <= w and h % r == 0 and w % r == 0, "bridge.seat", f"reduction {r} incompatible with {h}x{w}")
        proj = _conv_shape("bridge.seat.proj", shape, c, 3, dilation=hc.seat_dilation)
        trace.add("bridge.seat.tokens", (proj[0] // r, proj[1] // r, c))
        trace.add("bridge.seat.ffn_hidden", (h, w, c * hc.ffn_expansion))
        shape = trace.add("bridge.seat", (h, w, c))
    if ab.use_ceaspp:
        inner = c // hc.compression_factor if ab.ceaspp_cc else c
        if ab.ceaspp_cc:
            trace.add("bridge.ceaspp.compress", _conv_shape("bridge.ceaspp.compress", shape, inner, 1))
        for d in hc.ceaspp_dilations:
            trace.add(f"bridge.ceaspp.branch_d{d}", _conv_shape(f"bridge.ceaspp.branch_d{d}", shape, inner, 3, dilation=d))
        trace.add("bridge.ceaspp.branch_pool", (shape[0], shape[1], inner))
        cat = trace.add("bridge.ceaspp.concat", (shape[0], shape[1], inner * (len(hc.ceaspp_dilations) + 1)))
        shape = trace.add("bridge.ceaspp", _conv_shape("bridge.ceaspp.fuse", cat, c, 1))

    for i in range(cfg.stages, 0, -1):
        h, w, c = shape
        shape = trace.add(f"dec{i}.up", (2 * h, 2 * w, c))
        sh, sw, sc = skips[i]
        _require((sh, sw) == shape[:2], f"dec{i}.concat", f"skip {sh}x{sw} does not match upsampled {shape[0]}x{shape[1]}")
        cat = trace.add(f"dec{i}.concat", (sh, sw, c + sc))
        f = cfg.decoder_filters(i)
        shape = trace.add(f"dec{i}.egfe", _conv_shape(f"dec{i}.egfe", _conv_shape(f"dec{i}.egfe", cat, f, 3), f, 3))
    shape = trace.add("head", _conv_shape("head", shape, 1, 1))
    _require(shape == (*cfg.input_size, 1), "head", f"output {shape} does not match input extent")
    return trace


def encoder_rows(trace: ShapeTrace, stages: int) -> list[tuple[str, int, int, int]]:
    """Encoder rows of a trace in (block, H, W, C) form."""
    rows = []
    for i in range(1, stages + 1):
        rows.append((f"EGFE{i}", *trace[f"enc{i}.egfe"]))
        rows.append((f"Down{i}", *trace[f"enc{i}.down"]))
    return rows


def decoder_rows(trace: ShapeTrace, stages: int) -> list[tuple[str, int, int, int]]:
    rows = []
    for i in range(stages, 0, -1):
        rows.append((f"Up{i}", *trace[f"dec{i}.up"]))
        rows.append((f"EGFE{i}", *trace[f"dec{i}.egfe"]))
    return rows
