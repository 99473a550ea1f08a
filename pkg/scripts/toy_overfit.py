"""Overfit the reduced CNN-ViT on a handful of blurred text images.

Prints the blurred-input baseline PSNR and the PSNR of the trained model on
the same pairs, and writes history.jsonl / best.dbck to --out.

    python scripts/toy_overfit.py --epochs 200 --pairs 8 --out runs/toy
"""

import argparse
import time
from dataclasses import dataclass

import numpy as np

from deblur_lab.blur_synth import DegradationConfig, apply_blur, make_kernel
from deblur_lab.metrics_loss import LossWeights, psnr
from deblur_lab.model import ModelConfig
from deblur_lab.pipeline import PairedDataset, TrainConfig, train
from deblur_lab.pipeline.training import mean_val_psnr
from deblur_lab.synthetic import text_scene


@dataclass
class ToyConfig:
    pairs: int = 8
    img: int = 64
    kernel_size: int = 13
    epochs: int = 200
    lr: float = 1e-3
    mae_only: bool = False
    seed: int = 0
    out: str = "runs/toy"


def main(cfg: ToyConfig):
    sharp = [text_scene(cfg.img, seed=1000 + i) for i in range(cfg.pairs)]
    blurred = [apply_blur(s, DegradationConfig(make_kernel("trajectory", cfg.kernel_size, i)))
               for i, s in enumerate(sharp)]
    ds = PairedDataset.from_arrays(blurred, sharp, splits=["train"] * cfg.pairs)
    baseline = np.mean([psnr(b, s) for b, s in zip(blurred, sharp)])
    weights = LossWeights(1, 0, 0, 0) if cfg.mae_only else LossWeights()
    tcfg = TrainConfig(epochs_max=cfg.epochs, lr=cfg.lr, early_stop_patience=10 ** 6,
                       loss_weights=weights, seed=cfg.seed)
    t0 = time.perf_counter()
    result = train(ds, ModelConfig.reduced(cfg.img), tcfg, out_dir=cfg.out,
                   val_metric=lambda e, p: mean_val_psnr(p, ds.pairs))
    shown = result.history[::max(1, cfg.epochs // 10)]
    if shown[-1] is not result.history[-1]:
        shown.append(result.history[-1])
    for row in shown:
        print(f"epoch {row['epoch']:4d}  loss {row['train_loss']:.4f}  psnr {row['val_psnr']:.2f}  lr {row['lr']:.1e}")
    final = mean_val_psnr(result.final_params, ds.pairs)
    print(f"baseline {baseline:.2f} dB -> trained {final:.2f} dB ({final - baseline:+.2f}); "
          f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--pairs", type=int, default=ToyConfig.pairs)
    p.add_argument("--epochs", type=int, default=ToyConfig.epochs)
    p.add_argument("--lr", type=float, default=ToyConfig.lr)
    p.add_argument("--mae-only", action="store_true", help="train with the MAE term alone")
    p.add_argument("--seed", type=int, default=ToyConfig.seed)
    p.add_argument("--out", default=ToyConfig.out)
    a = p.parse_args()
    main(ToyConfig(pairs=a.pairs, epochs=a.epochs, lr=a.lr, mae_only=a.mae_only, seed=a.seed, out=a.out))
