"""Paired image ingestion, splitting and blur-severity statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import DeblurLabError, EmptyDatasetError, ParameterError
from ..metrics_loss import psnr, ssim

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPLITS = ("train", "val", "test")


class ImageDecodeError(DeblurLabError, IOError):
    def __init__(self, path, reason):
        super().__init__(f"cannot decode image {path}: {reason}")
        self.path = str(path)


def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an image as float64 RGB in [0, 1], bilinear-resized to ``size`` (H, W)."""
    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(path, exc) from exc
    arr = np.asarray(rgb, dtype=np.float64) / 255.0
    if size is None or tuple(size) == arr.shape[:2]:
        return arr
    h, w = size
    chans = [np.asarray(Image.fromarray(arr[:, :, c].astype(np.float32), mode="F")
                        .resize((w, h), Image.BILINEAR), dtype=np.float64) for c in range(3)]
    return np.clip(np.stack(chans, axis=2), 0.0, 1.0)


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, arr: np.ndarray) -> None:
    a = to_uint8(arr)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    Image.fromarray(a).save(path, format="PNG")


@dataclass
class Pair:
    id: str
    blurred: np.ndarray
    sharp: np.ndarray
    blurred_path: str | None = None
    sharp_path: str | None = None
    split: str | None = None


@dataclass
class PairedDataset:
    pairs: list
    img_size: tuple
    warnings: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def subset(self, split: str) -> "PairedDataset":
        return PairedDataset([p for p in self.pairs if p.split == split], self.img_size)

    @classmethod
    def from_arrays(cls, blurred, sharp, ids=None, splits=None) -> "PairedDataset":
        if len(blurred) != len(sharp):
            raise ParameterError("blurred and sharp lists differ in length")
        ids = ids or [f"{i:05d}" for i in range(len(blurred))]
        splits = splits or [None] * len(blurred)
        pairs = [Pair(i, np.asarray(b, dtype=np.float64), np.asarray(s, dtype=np.float64), split=sp)
                 for i, b, s, sp in zip(ids, blurred, sharp, splits)]
        size = pairs[0].sharp.shape[:2] if pairs else (0, 0)
        return cls(pairs, tuple(size))


def _images_by_stem(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise ParameterError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def ingest(blurred_dir, sharp_dir, img_size: tuple[int, int] = (256, 256)) -> PairedDataset:
    """Pair images by filename stem, resize and normalize them.

    Files without a partner are excluded and listed in ``warnings``.
    """
    blurred = _images_by_stem(Path(blurred_dir))
    sharp = _images_by_stem(Path(sharp_dir))
    warnings = []
    for stem in sorted(set(blurred) ^ set(sharp)):
        path = blurred.get(stem) or sharp.get(stem)
        side = "blurred" if stem in blurred else "sharp"
        warnings.append({"path": str(path), "reason": f"unpaired {side} image"})
        log.warning("excluding unpaired %s image %s", side, path)
    stems = sorted(set(blurred) & set(sharp))
    if not stems:
        raise EmptyDatasetError(f"no image pairs found in {blurred_dir} and {sharp_dir}")
    pairs = [Pair(stem, load_image(blurred[stem], img_size), load_image(sharp[stem], img_size),
                  str(blurred[stem]), str(sharp[stem])) for stem in stems]
    return PairedDataset(pairs, tuple(img_size), warnings)


DEFAULT_FRACTIONS = {"train": 0.7, "test": 0.2, "val": 0.1}


def _counts_from_fractions(n: int, fractions: dict) -> dict:
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9 or any(f < 0 for f in fractions.values()):
        raise ParameterError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    exact = {k: f * n for k, f in fractions.items()}
    counts = {k: int(math.floor(v + 1e-9)) for k, v in exact.items()}
    leftover = n - sum(counts.values())
    order = sorted(fractions, key=lambda k: (-(exact[k] - counts[k]), SPLITS.index(k)))
    for k in order[:leftover]:
        counts[k] += 1
    return counts


def split(dataset: PairedDataset, fractions: dict | None = None, counts: dict | None = None,
          seed: int = 0) -> PairedDataset:
    """Assign each pair to train/val/test by a seeded shuffle.

    Pass either ``fractions`` (summing to 1) or ``counts`` (summing to the
    dataset size), both keyed by split name.
    """
    n = len(dataset)
    if counts is not None:
        if any(c < 0 for c in counts.values()):
            raise ParameterError("split counts must be nonnegative")
        if sum(counts.values()) > n:
            raise ParameterError(f"split counts {counts} exceed dataset size {n}")
        if sum(counts.values()) != n:
            raise ParameterError(f"split counts {counts} must sum to dataset size {n}")
    else:
        counts = _counts_from_fractions(n, fractions or DEFAULT_FRACTIONS)
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ParameterError(f"unknown split names {sorted(unknown)}")
    perm = np.random.default_rng(seed).permutation(n)
    labels = [None] * n
    pos = 0
    for name in SPLITS:
        for idx in perm[pos:pos + counts.get(name, 0)]:
            labels[idx] = name
        pos += counts.get(name, 0)
    pairs = [replace(p, split=lab) for p, lab in zip(dataset.pairs, labels)]
    return PairedDataset(pairs, dataset.img_size, list(dataset.warnings))


def severity_stats(dataset: PairedDataset) -> dict:
    """PSNR and SSIM of every blurred image against its sharp partner."""
    if len(dataset) == 0:
        raise EmptyDatasetError("severity_stats needs at least one pair")
    p = np.array([psnr(pair.blurred, pair.sharp) for pair in dataset.pairs])
    s = np.array([ssim(pair.blurred, pair.sharp) for pair in dataset.pairs])
    summary = lambda v: {"min": float(v.min()), "mean": float(v.mean()), "max": float(v.max())}
    return {"n": len(dataset), "psnr": summary(p), "ssim": summary(s)}
