"""Per-sample Adam training loop with validation-driven callbacks."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import tensor_core as tc
from ..errors import CheckpointError, ConfigurationError, EmptyDatasetError, NumericError
from ..metrics_loss import LossWeights, PerceptualExtractor, composite_loss, default_extractor, psnr
from ..model import ModelConfig, ModelParams, build_model, forward, predict
from .checkpoint import Checkpoint
from .data import PairedDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 100
    batch_size: int = 1
    lr: float = 1e-4
    early_stop_patience: int = 10
    lr_plateau_patience: int = 5
    lr_plateau_factor: float = 0.5
    min_lr: float = 1e-6
    epoch_time_budget_s: float = 300.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_batches: bool = False

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if self.batch_size != 1:
            raise ConfigurationError(f"batch_size must be 1, got {self.batch_size}")
        if self.epochs_max < 1:
            raise ConfigurationError("epochs_max must be >= 1")
        if self.lr <= 0 or self.min_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.epoch_time_budget_s <= 0:
            raise ConfigurationError("epoch_time_budget_s must be positive")
        if self.early_stop_patience < 1 or self.lr_plateau_patience < 1:
            raise ConfigurationError("patience values must be >= 1")
        if not 0.0 < self.lr_plateau_factor < 1.0:
            raise ConfigurationError("lr_plateau_factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}``; missing sections take defaults."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    unknown = set(d) - {"model", "train"}
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    return ModelConfig.from_dict(d.get("model", {})), TrainConfig.from_dict(d.get("train", {}))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    final_params: ModelParams
    stopped_early: bool


def _step_seed(seed: int, epoch: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, k]).generate_state(1)[0])


def mean_val_psnr(params: ModelParams, pairs) -> float:
    return float(np.mean([psnr(predict(params, p.blurred), p.sharp) for p in pairs]))


def _write_snapshot(out_dir, payload) -> str | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / "divergence.json"
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


def train(dataset: PairedDataset, model_config: ModelConfig, train_config: TrainConfig,
          out_dir=None, val_metric=None, init_params: ModelParams | None = None,
          extractor: PerceptualExtractor | None = None) -> TrainResult:
    """Train on the ``train`` split, validating on ``val`` after every epoch.

    Each epoch visits the training pairs in a seeded order; each pair gets a
    forward pass, the composite loss, backward and one Adam step.  The epoch
    is cut short once its wall time passes ``epoch_time_budget_s``.  After
    validation the best checkpoint is kept (``best.dbck`` in ``out_dir``),
    the learning rate is halved on plateaus, and training stops when the
    validation PSNR has not improved for ``early_stop_patience`` epochs.

    ``val_metric(epoch, params)`` replaces the validation PSNR when given.
    History rows go to ``history.jsonl`` in ``out_dir`` and are returned.
    """
    tcfg = train_config
    model_config.validate()
    train_pairs = [p for p in dataset.pairs if p.split == "train"]
    val_pairs = [p for p in dataset.pairs if p.split == "val"]
    if not train_pairs:
        raise EmptyDatasetError("train split is empty")
    if not val_pairs and val_metric is None:
        raise EmptyDatasetError("val split is empty")
    extractor = extractor or default_extractor()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    hist_file = open(out / "history.jsonl", "w") if out is not None else None
    batch_file = open(out / "batches.jsonl", "w") if out is not None and tcfg.log_batches else None

    model = init_params or build_model(model_config)
    params = dict(model.tensors)
    state = tc.AdamState()
    lr = tcfg.lr
    best_psnr = -math.inf
    best_ckpt = None
    since_best = 0
    since_plateau = 0
    history = []
    stopped_early = False
    try:
        for epoch in range(1, tcfg.epochs_max + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train_pairs))
            losses = []
            budget_hit = False
            for k, idx in enumerate(order):
                pair = train_pairs[idx]
                current = ModelParams(model_config, params)
                pred = forward(current, pair.blurred, mode="train", seed=_step_seed(tcfg.seed, epoch, k))
                loss = composite_loss(pred, pair.sharp, tcfg.loss_weights, extractor)
                value = loss.item()
                if not math.isfinite(value):
                    snap = _write_snapshot(out, {
                        "epoch": epoch, "step": k, "sample": pair.id, "loss": repr(value), "lr": lr,
                        "param_norms": {n: float(np.linalg.norm(t.values)) for n, t in params.items()}})
                    raise NumericError(f"non-finite loss {value} at epoch {epoch}, sample {pair.id}"
                                       + (f"; snapshot at {snap}" if snap else ""))
                loss.backward()
                grads = {n: t.grad for n, t in params.items()}
                params, state = tc.adam_step(params, grads, state, lr)
                losses.append(value)
                if batch_file is not None:
                    batch_file.write(json.dumps({"epoch": epoch, "step": k, "id": pair.id,
                                                 "loss": value}) + "\n")
                if time.perf_counter() - t0 > tcfg.epoch_time_budget_s:
                    budget_hit = True
                    log.warning("epoch %d hit the %.1fs budget after %d samples",
                                epoch, tcfg.epoch_time_budget_s, k + 1)
                    break

            current = ModelParams(model_config, params)
            val = val_metric(epoch, current) if val_metric else mean_val_psnr(current, val_pairs)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_psnr": float(val),
                   "lr": lr, "seconds": time.perf_counter() - t0, "samples": len(losses),
                   "budget_exceeded": budget_hit}
            history.append(row)
            if hist_file is not None:
                hist_file.write(json.dumps(row) + "\n")
                hist_file.flush()
            log.info("epoch %d loss %.5f val_psnr %.3f lr %.2e", epoch, row["train_loss"], val, lr)

            if val > best_psnr:
                best_psnr = val
                since_best = since_plateau = 0
                best_ckpt = Checkpoint.from_model(current, state, tcfg.to_dict(), val, epoch)
                if out is not None:
                    best_ckpt.save(out / "best.dbck")
            else:
                since_best += 1
                since_plateau += 1
                if since_plateau >= tcfg.lr_plateau_patience:
                    lr = max(lr * tcfg.lr_plateau_factor, tcfg.min_lr)
                    since_plateau = 0
            if since_best >= tcfg.early_stop_patience:
                stopped_early = True
                log.info("early stop at epoch %d", epoch)
                break
    finally:
        for f in (hist_file, batch_file):
            if f is not None:
                f.close()
    if best_ckpt is None:
        raise CheckpointError("validation never produced a finite score; no checkpoint kept")
    return TrainResult(best_ckpt, history, ModelParams(model_config, params), stopped_early)


def read_history(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
