"""Evaluation reports and single-image restoration."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..blur_synth import BlurKernel
from ..classical import DeconvRequest, deconvolve
from ..errors import DimensionError, EmptyDatasetError, ParameterError
from ..metrics_loss import psnr, ssim
from ..model import REFERENCE_PARAM_COUNT_M, ModelParams, predict
from .checkpoint import Checkpoint
from .data import PairedDataset, load_image, save_png

# full-scale figures published for the CNN-ViT model, kept for comparison only
REFERENCE = {"psnr_db": 32.20, "ssim": 0.934, "params_m": REFERENCE_PARAM_COUNT_M, "time_ms": 61.0}


@dataclass
class EvalReport:
    rows: list
    param_count: int | None = None
    mean_inference_ms: float = 0.0
    reference: dict = field(default_factory=lambda: dict(REFERENCE))

    @property
    def aggregates(self) -> dict:
        p = np.array([r["psnr_db"] for r in self.rows])
        s = np.array([r["ssim"] for r in self.rows])
        return {"mean_psnr": float(p.mean()), "mean_ssim": float(s.mean()),
                "min_psnr": float(p.min()), "max_psnr": float(p.max()),
                "min_ssim": float(s.min()), "max_ssim": float(s.max())}

    def to_dict(self) -> dict:
        return {"rows": self.rows, "aggregates": self.aggregates,
                "timing": {"mean_inference_ms": self.mean_inference_ms},
                "param_count": self.param_count, "reference": self.reference}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["id", "psnr_db", "ssim"])
            w.writeheader()
            w.writerows(self.rows)


def _predictor(model):
    """Return ``(fn, param_count, img_size)`` for a checkpoint, params or callable."""
    if isinstance(model, Checkpoint):
        model = model.model_params()
    if isinstance(model, ModelParams):
        return (lambda img: predict(model, img)), model.param_count, tuple(model.config.img_size)
    if callable(model):
        return model, None, None
    raise ParameterError(f"cannot evaluate with {type(model).__name__}")


def evaluate(pairs, model) -> EvalReport:
    """Score ``model`` on every pair (a dataset, split subset or list of pairs).

    ``model`` may be a :class:`Checkpoint`, :class:`ModelParams` or any
    callable mapping a blurred array to a restored one.
    """
    pairs = pairs.pairs if isinstance(pairs, PairedDataset) else list(pairs)
    if not pairs:
        raise EmptyDatasetError("nothing to evaluate")
    fn, count, size = _predictor(model)
    rows, elapsed = [], 0.0
    for pair in pairs:
        if size is not None and pair.blurred.shape[:2] != size:
            raise DimensionError(f"pair {pair.id} is {pair.blurred.shape[:2]}, model expects {size}")
        t0 = time.perf_counter()
        out = fn(pair.blurred)
        elapsed += time.perf_counter() - t0
        rows.append({"id": pair.id, "psnr_db": psnr(out, pair.sharp), "ssim": ssim(out, pair.sharp)})
    return EvalReport(rows, count, 1000.0 * elapsed / len(pairs))


def deblur_single(image_path, out_path, checkpoint: Checkpoint | None = None,
                  method: str | None = None, kernel: BlurKernel | None = None,
                  params: dict | None = None, img_size=None) -> np.ndarray:
    """Restore one image and write it as PNG.

    With a checkpoint the image is resized to the model's input size; with
    a classical ``method`` a ``kernel`` is required and ``img_size`` is
    optional.  No metrics are computed.
    """
    if checkpoint is not None:
        model = checkpoint.model_params()
        out = predict(model, load_image(image_path, model.config.img_size))
    elif method is not None:
        if kernel is None:
            raise ParameterError("classical deblurring needs a kernel")
        req = DeconvRequest(load_image(image_path, img_size), kernel, method, params or {})
        out = deconvolve(req)
    else:
        raise ParameterError("deblur_single needs a checkpoint or a classical method")
    out = np.clip(out, 0.0, 1.0)
    save_png(out_path, out)
    return out
