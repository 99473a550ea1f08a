"""PSNR/SSIM of the classical solvers on a small synthetic blurred set.

    python scripts/classical_baselines.py --n 10 --size 128 --noise 0.01
"""

import argparse
from dataclasses import dataclass

import numpy as np

from deblur_lab.blur_synth import DegradationConfig, apply_blur, make_kernel
from deblur_lab.classical import DeconvRequest, deconvolve
from deblur_lab.metrics_loss import psnr, ssim
from deblur_lab.synthetic import text_scene


@dataclass
class BaselineConfig:
    n: int = 10
    size: int = 128
    kernel_size: int = 15
    noise: float = 0.01
    seed: int = 0


SETTINGS = {
    "inverse": {"epsilon": 1e-3},
    "wiener": {"nsr": 1e-2},
    "richardson_lucy": {"iterations": 30},
    "landweber": {"iterations": 100, "tau": 1.0},
    "tv": {"lambda": 0.005, "iterations": 150},
}


def main(cfg: BaselineConfig):
    rows = {"blurred": [], **{m: [] for m in SETTINGS}}
    for i in range(cfg.n):
        sharp = text_scene(cfg.size, seed=cfg.seed * 1000 + i)
        kernel = make_kernel("trajectory", cfg.kernel_size, cfg.seed ^ i)
        y = apply_blur(sharp, DegradationConfig(kernel, noise_sigma=cfg.noise, rng_seed=i))
        rows["blurred"].append((psnr(y, sharp), ssim(y, sharp)))
        for method, params in SETTINGS.items():
            out = deconvolve(DeconvRequest(y, kernel, method, params))
            rows[method].append((psnr(out, sharp), ssim(out, sharp)))
    print(f"{'method':<18}{'PSNR':>8}{'SSIM':>8}")
    for method, vals in rows.items():
        v = np.array(vals)
        print(f"{method:<18}{v[:, 0].mean():8.2f}{v[:, 1].mean():8.3f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=BaselineConfig.n)
    p.add_argument("--size", type=int, default=BaselineConfig.size)
    p.add_argument("--noise", type=float, default=BaselineConfig.noise)
    p.add_argument("--seed", type=int, default=BaselineConfig.seed)
    a = p.parse_args()
    main(BaselineConfig(n=a.n, size=a.size, noise=a.noise, seed=a.seed))
