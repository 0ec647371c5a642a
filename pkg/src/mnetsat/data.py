"""Image/mask ingestion, resizing and dataset splitting.

Dataset layout::

    root/images/<stem>.png|pgm|ppm
    root/masks/<stem>.png|pgm|ppm
    root/manifest.jsonl          (optional; one {"id", "split"} object per line)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W x 1, float32 in {0, 1}
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise DataError(f"sample {self.id!r}: image extent {self.image.shape[:2]} != mask extent {self.mask.shape[:2]}")


@dataclass
class DatasetManifest:
    root: str
    assignments: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def ids(self, split: str) -> list[str]:
        return [i for i, s in self.assignments.items() if s == split]

    def write(self, path: Optional[str | os.PathLike] = None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / "manifest.jsonl"
        with open(path, "w") as fh:
            for ident, split_name in self.assignments.items():
                fh.write(json.dumps({"id": ident, "split": split_name}) + "\n")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike, root: Optional[str] = None) -> "DatasetManifest":
        assignments = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    row = json.loads(line)
                    assignments[row["id"]] = row["split"]
        return cls(root=str(root if root is not None else Path(path).parent), assignments=assignments)


# -- codecs -------------------------------------------------------------------


def _open_checked(path: str | os.PathLike) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if img.format not in ("PNG", "PPM"):
        raise DataError(f"{path}: unsupported format {img.format}")
    if img.format == "PNG" and img.info.get("interlace"):
        raise DataError(f"{path}: interlaced PNG is not supported")
    if img.mode not in ("L", "RGB", "RGBA", "P", "1", "LA"):
        raise DataError(f"{path}: unsupported bit depth / mode {img.mode}")
    return img


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit image as H x W x 3 float32 in [0, 1]."""
    img = _open_checked(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit mask, thresholded at 128, as H x W x 1 float32."""
    img = _open_checked(path).convert("L")
    return (np.asarray(img) >= 128).astype(np.float32)[:, :, None]


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a [0, 1] image; format follows the suffix (.png, .ppm, .pgm)."""
    arr = _to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm" and arr.ndim == 3:
        arr = _to_uint8(np.asarray(image).mean(axis=2))
    Image.fromarray(arr).save(path, format="PNG" if suffix == ".png" else "PPM")


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    write_image(path, (np.asarray(mask) > 0.5).astype(np.float32).reshape(mask.shape[0], mask.shape[1]))


def load_sample(image_path: str | os.PathLike, mask_path: str | os.PathLike, id: Optional[str] = None) -> Sample:
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if image.shape[:2] != mask.shape[:2]:
        raise DataError(
            f"image {image_path} is {image.shape[0]}x{image.shape[1]} but mask {mask_path} is {mask.shape[0]}x{mask.shape[1]}"
        )
    return Sample(image=image, mask=mask, id=id if id is not None else Path(image_path).stem)


# -- resizing -------------------------------------------------------------------


def _bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = img.shape[:2]

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    y0, y1, fy = coords(h, src_h)
    x0, x1, fx = coords(w, src_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(img.dtype)


def _nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = img.shape[:2]
    ys = np.minimum(((np.arange(h) + 0.5) * src_h / h).astype(int), src_h - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * src_w / w).astype(int), src_w - 1)
    return img[ys][:, xs]


def resize(sample: Sample, target: tuple[int, int] | int) -> Sample:
    """Bilinear resize of the image, nearest-neighbour resize of the mask."""
    if isinstance(target, int):
        target = (target, target)
    h, w = target
    if h <= 0 or w <= 0:
        raise DataError(f"resize target must be positive, got {target}")
    if sample.image.shape[:2] == (h, w):
        return Sample(sample.image.copy(), sample.mask.copy(), sample.id)
    return Sample(_bilinear(sample.image, h, w), _nearest(sample.mask, h, w), sample.id)


# -- splitting / dataset discovery ----------------------------------------------


def split(ids: Sequence[str], seed: int = 0, root: str = "") -> DatasetManifest:
    """Shuffle ids deterministically into 80% train, 10% val, rest test."""
    ids = list(ids)
    n = len(ids)
    if n < 10:
        raise DataError(f"need at least 10 samples to split 8:1:1, got {n}")
    if len(set(ids)) != n:
        raise DataError("sample ids must be unique")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = (8 * n) // 10, n // 10
    assignments = {}
    for rank, k in enumerate(order):
        assignments[ids[k]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    assignments = {i: assignments[i] for i in sorted(assignments)}
    return DatasetManifest(root=root, assignments=assignments, seed=seed)


def _index(folder: Path) -> dict[str, Path]:
    out = {}
    if not folder.is_dir():
        return out
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise DataError(f"two files share the stem {p.stem!r} in {folder}")
            out[p.stem] = p
    return out


def find_pairs(root: str | os.PathLike) -> dict[str, tuple[Path, Path]]:
    """Map stem -> (image path, mask path) for every stem present in both folders."""
    root = Path(root)
    images, masks = _index(root / "images"), _index(root / "masks")
    if not images:
        raise DataError(f"no images found under {root / 'images'}")
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DataError(f"images without masks: {missing[:5]}")
    return {stem: (images[stem], masks[stem]) for stem in images}


def load_manifest(root: str | os.PathLike, seed: int = 0) -> DatasetManifest:
    path = Path(root) / "manifest.jsonl"
    if path.exists():
        return DatasetManifest.read(path, root=str(root))
    return split(sorted(find_pairs(root)), seed=seed, root=str(root))


def load_dataset(
    root: str | os.PathLike,
    size: Optional[tuple[int, int]] = None,
    splits: Iterable[str] = SPLITS,
    seed: int = 0,
) -> dict[str, list[Sample]]:
    """Load samples per split, resized to ``size`` when given."""
    pairs = find_pairs(root)
    manifest = load_manifest(root, seed=seed)
    out: dict[str, list[Sample]] = {}
    for name in splits:
        samples = []
        for ident in manifest.ids(name):
            if ident not in pairs:
                raise DataError(f"manifest id {ident!r} has no files under {root}")
            s = load_sample(*pairs[ident], id=ident)
            samples.append(resize(s, size) if size is not None else s)
        out[name] = samples
    return out


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch samples into N x H x W x 3 images and N x H x W x 1 masks."""
    return (
        np.stack([s.image for s in samples]).astype(np.float32),
        np.stack([s.mask for s in samples]).astype(np.float32),
    )
