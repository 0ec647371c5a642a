"""Losses, Adam, plateau scheduling, augmentation and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, stack
from .metrics import evaluate
from .tensor import NonFiniteError, Tape, Tensor, backward, clip, log

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


# -- losses ---------------------------------------------------------------------


@dataclass
class LossConfig:
    gamma: float = 0.5
    delta: float = 0.5
    epsilon: float = 1.0

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0 or self.gamma + self.delta <= 0:
            raise ValueError(f"loss weights must be non-negative with a positive sum, got {self.gamma}, {self.delta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _as_pair(y_p, y_g):
    y_p = y_p if isinstance(y_p, Tensor) else Tensor(y_p)
    y_g = y_g if isinstance(y_g, Tensor) else Tensor(y_g, dtype=y_p.dtype)
    if y_p.shape != y_g.shape:
        raise ValueError(f"prediction shape {y_p.shape} != target shape {y_g.shape}")
    return y_p, y_g


def dice_loss(y_p, y_g, eps: float = 1.0) -> Tensor:
    """Soft Dice loss summed over the whole batch."""
    y_p, y_g = _as_pair(y_p, y_g)
    inter = (y_p * y_g).sum()
    denom = (y_g + y_p).sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def bce_loss(y_p, y_g) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y_p, y_g = _as_pair(y_p, y_g)
    p = clip(y_p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(y_g * log(p) + (1.0 - y_g) * log(1.0 - p)).mean()


def total_loss(y_p, y_g, cfg: Optional[LossConfig] = None) -> Tensor:
    cfg = cfg or LossConfig()
    return cfg.gamma * dice_loss(y_p, y_g, cfg.epsilon) + cfg.delta * bce_loss(y_p, y_g)


# -- optimizer / scheduler ----------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """Bias-corrected Adam update. Updates ``state`` in place and returns new arrays."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} vs gradient {g.shape} vs state {state.m[i].shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append((p - step).astype(p.dtype))
    return out


class Adam:
    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps)
        for p, arr in zip(self.params, new):
            p.data = arr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class PlateauScheduler:
    """Halve the learning rate when the monitored metric stops improving."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-6,
                 min_delta: float = 1e-4):
        if not 0 < factor < 1:
            raise ValueError(f"factor must lie in (0, 1), got {factor}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.min_delta = min_delta
        self.best = -math.inf
        self.wait = 0

    def step(self, value: float) -> float:
        if value > self.best + self.min_delta:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


def plateau_scheduler(history: Sequence[float], state: PlateauScheduler) -> float:
    """Feed the newest entry of ``history`` to ``state`` and return the new lr."""
    if not history:
        raise ValueError("history is empty")
    return state.step(history[-1])


# -- augmentation -----------------------------------------------------------------


def apply_geometry(image: np.ndarray, mask: np.ndarray, dx: float = 0.0, dy: float = 0.0, angle: float = 0.0,
                   flip_h: bool = False, flip_v: bool = False, fill: str = "edge") -> tuple[np.ndarray, np.ndarray]:
    """Mirror, rotate about the centre (degrees), then translate by (dx, dy) px.

    Nearest-neighbour inverse mapping. Pixels mapped from outside the frame
    repeat the nearest border pixel (``fill="edge"``) or are zero (``"zero"``).
    """
    if fill not in ("edge", "zero"):
        raise ValueError(f"fill must be 'edge' or 'zero', got {fill!r}")
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # undo translation, then rotation, then mirroring
    x = xs - dx - cx
    y = ys - dy - cy
    if angle:
        t = math.radians(angle)
        c, s = math.cos(t), math.sin(t)
        x, y = c * x + s * y, -s * x + c * y
    x = x + cx
    y = y + cy
    if flip_h:
        x = (w - 1) - x
    if flip_v:
        y = (h - 1) - y
    xi = np.rint(x).astype(int)
    yi = np.rint(y).astype(int)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    xi = np.clip(xi, 0, w - 1)
    yi = np.clip(yi, 0, h - 1)
    if fill == "edge":
        return image[yi, xi].astype(image.dtype), mask[yi, xi].astype(mask.dtype)
    keep = inside[:, :, None]
    return (
        np.where(keep, image[yi, xi], 0).astype(image.dtype),
        np.where(keep, mask[yi, xi], 0).astype(mask.dtype),
    )


def augment(sample: Sample, rng: np.random.Generator, count: int = 8) -> list[Sample]:
    """``count`` independently transformed copies of ``sample``."""
    h, w = sample.image.shape[:2]
    out = []
    for k in range(count):
        dx = rng.uniform(-0.1, 0.1) * w
        dy = rng.uniform(-0.1, 0.1) * h
        angle = rng.uniform(-30.0, 30.0)
        contrast = rng.uniform(0.8, 1.2)
        flip_h, flip_v = rng.random() < 0.5, rng.random() < 0.5
        image, mask = apply_geometry(sample.image, sample.mask, dx, dy, angle, flip_h, flip_v)
        mean = image.mean()
        image = np.clip((image - mean) * contrast + mean, 0.0, 1.0).astype(sample.image.dtype)
        out.append(Sample(image, mask, f"{sample.id}#aug{k}"))
    return out


# -- config ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 70
    augment_per_image: int = 8
    seed: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 0.5

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.augment_per_image < 0:
            raise ValueError("lr, batch size, epochs and augment count must be non-negative (batch size positive)")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau factor must lie in (0, 1), got {self.plateau_factor}")


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def coerce(value: str, like):
    """Convert config text to the type of ``like``."""
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def train_config_from(values: dict) -> TrainConfig:
    base = TrainConfig()
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name in values:
            v = values[f.name]
            kwargs[f.name] = coerce(v, getattr(base, f.name)) if isinstance(v, str) else v
    return TrainConfig(**kwargs)


# -- training loop ----------------------------------------------------------------


LOG_FIELDS = ("epoch", "train_loss", "val_dsc", "lr")


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_val_dsc: float = -1.0
    best_epoch: int = 0
    checkpoint: Optional[Path] = None
    log_path: Optional[Path] = None

    @property
    def losses(self) -> list[float]:
        return [row["train_loss"] for row in self.log]


def expand_training_set(samples: Sequence[Sample], count: int, rng: np.random.Generator) -> list[Sample]:
    """Originals followed by ``count`` augmented copies of each."""
    out = list(samples)
    for s in samples:
        out.extend(augment(s, rng, count))
    return out


def _format_row(row: dict) -> list[str]:
    return [str(row["epoch"]), f"{row['train_loss']:.8f}", f"{row['val_dsc']:.8f}", f"{row['lr']:.8g}"]


def train(model, dataset: dict, cfg: TrainConfig, loss_cfg: Optional[LossConfig] = None,
          out_dir: Optional[str | os.PathLike] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Fit ``model`` on ``dataset['train']``, selecting on ``dataset['val']``.

    Writes ``train_log.csv`` and ``best.ckpt`` under ``out_dir`` when given.
    """
    loss_cfg = loss_cfg or LossConfig()
    if not dataset.get("train") or not dataset.get("val"):
        raise ValueError("dataset needs non-empty 'train' and 'val' splits")
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    aug_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in streams)
    model.set_rng(dropout_rng)
    dtype = model.parameters()[0].dtype

    train_set = expand_training_set(dataset["train"], cfg.augment_per_image, aug_rng)
    images, masks = stack(train_set)
    images, masks = images.astype(dtype), masks.astype(dtype)

    optimizer = Adam(model.parameters(), lr=cfg.lr)
    scheduler = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        result.log_path = out / "train_log.csv"
        with open(result.log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step += 1
            optimizer.zero_grad()
            with Tape() as tape:
                loss = total_loss(model(Tensor(images[idx])), Tensor(masks[idx]), loss_cfg)
                value = float(loss.item())
                if not math.isfinite(value):
                    raise NonFiniteError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                backward(loss, tape)
            optimizer.step()
            total += value * len(idx)
            seen += len(idx)
        val_dsc = evaluate(model, dataset["val"], cfg.threshold).dsc
        row = {"epoch": epoch, "train_loss": total / seen, "val_dsc": val_dsc, "lr": optimizer.lr}
        result.log.append(row)
        if out is not None:
            with open(result.log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_format_row(row))
        if val_dsc > result.best_val_dsc:
            result.best_val_dsc, result.best_epoch = val_dsc, epoch
            if out is not None:
                result.checkpoint = out / "best.ckpt"
                save_checkpoint(result.checkpoint, model.state_dict())
        optimizer.lr = plateau_scheduler([r["val_dsc"] for r in result.log], scheduler)
        logger.info("epoch %d loss %.5f val_dsc %.4f lr %.3g", epoch, row["train_loss"], val_dsc, row["lr"])
        if on_epoch is not None:
            on_epoch(row)
    return result


def restore(model, path: str | os.PathLike) -> None:
    model.load_state_dict(load_checkpoint(path))


def config_summary(cfg: TrainConfig) -> dict:
    return asdict(cfg)
