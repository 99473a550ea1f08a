"""Blur kernels next to their log Fourier magnitude, plus an anisotropy score.

    python scripts/kernel_spectra.py --out runs/spectra --count 4
"""

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from deblur_lab import blur_synth as bs


@dataclass
class SpectraConfig:
    out: str = "runs/spectra"
    count: int = 4
    sizes: tuple = (13, 19, 25, 31)
    spectrum_size: int = 256
    seed: int = 0


def kernel_png(kernel, scale=8):
    v = kernel.values / kernel.values.max()
    img = Image.fromarray(np.round(v * 255).astype(np.uint8), mode="L")
    return img.resize((kernel.size * scale,) * 2, Image.NEAREST)


def main(cfg: SpectraConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"{'kernel':<14}{'size':>5}{'anisotropy':>12}{'min|H|':>10}")
    for i in range(cfg.count):
        size = cfg.sizes[i % len(cfg.sizes)]
        kernel = bs.generate_trajectory_kernel(size, cfg.seed ^ i)
        spec = bs.kernel_spectrum(kernel, (cfg.spectrum_size,) * 2, log_scaled=True)
        kernel_png(kernel).save(out / f"kernel_{i}.png")
        spec.save_png(out / f"spectrum_{i}.png")
        raw = bs.kernel_spectrum(kernel, (cfg.spectrum_size,) * 2).magnitude
        print(f"kernel_{i:<7}{size:>5}{bs.spectrum_anisotropy(kernel):>12.2f}{raw.min():>10.2e}")
    delta = bs.BlurKernel.delta(13)
    print(f"{'delta':<14}{13:>5}{bs.spectrum_anisotropy(delta):>12.2f}{1.0:>10.2e}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=SpectraConfig.out)
    p.add_argument("--count", type=int, default=SpectraConfig.count)
    p.add_argument("--seed", type=int, default=SpectraConfig.seed)
    a = p.parse_args()
    main(SpectraConfig(out=a.out, count=a.count, seed=a.seed))
