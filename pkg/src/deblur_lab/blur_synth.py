"""Motion-blur kernels, the blur degradation model, and kernel spectra.

The degradation is ``y = k * x + n``: a true 2-D convolution of each channel
with a normalized PSF ``k`` plus i.i.d. Gaussian noise, clamped to [0, 1].

Two kernel generators are provided.  ``generate_linear_kernel`` rasterizes a
straight segment; ``generate_trajectory_kernel`` rasterizes a random camera
path whose heading and speed drift smoothly.  Both go through the same
sampler, so a trajectory with zero jitter is exactly a linear kernel.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ParameterError

KERNEL_GENERATOR_VERSION = 1
MIN_KERNEL_SIZE = 3
MAX_KERNEL_SIZE = 63
SUM_TOLERANCE = 1e-9

# path sampler resolution: 32 segments, each split into 16 time samples
_PATH_STEPS = 32
_SUBSAMPLES = 16


@dataclass(frozen=True, eq=False)
class BlurKernel:
    """Odd-sized, nonnegative PSF that sums to one."""

    values: np.ndarray
    generator: str = "custom"
    angle_degrees: float = 0.0
    length_px: float = 1.0
    seed: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ParameterError(f"kernel must be square, got shape {v.shape}")
        size = v.shape[0]
        if size % 2 == 0 or not MIN_KERNEL_SIZE <= size <= MAX_KERNEL_SIZE:
            raise ParameterError(
                f"kernel size must be odd in [{MIN_KERNEL_SIZE}, {MAX_KERNEL_SIZE}], got {size}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ParameterError("kernel values must be finite and nonnegative")
        total = v.sum()
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise ParameterError(f"kernel must sum to 1 (got {total!r})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_array(cls, arr, normalize: bool = True, **meta) -> "BlurKernel":
        arr = np.asarray(arr, dtype=np.float64)
        if normalize:
            arr = arr / arr.sum()
        return cls(arr, **meta)

    @classmethod
    def delta(cls, size: int = 3) -> "BlurKernel":
        v = np.zeros((size, size))
        v[size // 2, size // 2] = 1.0
        return cls(v, generator="delta")


@dataclass(frozen=True)
class DegradationConfig:
    kernel: BlurKernel
    noise_sigma: float = 0.0
    boundary: str = "circular"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_sigma < 1.0:
            raise ParameterError(f"noise_sigma must lie in [0, 1), got {self.noise_sigma}")
        if self.boundary not in ("circular", "reflect"):
            raise ParameterError(f"boundary must be 'circular' or 'reflect', got {self.boundary!r}")


@dataclass(frozen=True, eq=False)
class SpectrumImage:
    """Kernel DFT magnitude with the zero frequency moved to ``(H//2, W//2)``."""

    height: int
    width: int
    magnitude: np.ndarray
    log_scaled: bool = False

    @property
    def dc(self) -> float:
        return float(self.magnitude[self.height // 2, self.width // 2])

    def to_uint8(self) -> np.ndarray:
        peak = self.magnitude.max()
        scaled = self.magnitude / peak if peak > 0 else self.magnitude
        return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)

    def save_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.to_uint8(), mode="L").save(path)


# ---------------------------------------------------------------------------
# kernel generation


def _check_size(size: int) -> None:
    if int(size) != size or size % 2 == 0 or not MIN_KERNEL_SIZE <= size <= MAX_KERNEL_SIZE:
        raise ParameterError(
            f"kernel size must be an odd int in [{MIN_KERNEL_SIZE}, {MAX_KERNEL_SIZE}], got {size}")


def _path_points(headings: np.ndarray, speeds: np.ndarray, arc_length: float) -> np.ndarray:
    """Time-uniform samples along a polyline, returned as (x, y) offsets.

    ``y`` grows downwards (image rows), so positive angles point up-right.
    """
    steps = np.stack([speeds * np.cos(headings), -speeds * np.sin(headings)], axis=1)
    total = speeds.sum()
    steps *= arc_length / total
    corners = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    frac = np.arange(_SUBSAMPLES) / _SUBSAMPLES
    pts = corners[:-1, None, :] + frac[None, :, None] * steps[:, None, :]
    return np.vstack([pts.reshape(-1, 2), corners[-1:]])


def _rasterize(points: np.ndarray, size: int) -> np.ndarray:
    """Center the path on the kernel, shrink it to fit, bilinearly splat."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    points = points - (lo + hi) / 2.0
    extent = float((hi - lo).max())
    if extent > size - 1:
        points = points * ((size - 1) / extent)
    c = (size - 1) / 2.0
    px, py = points[:, 0] + c, points[:, 1] + c
    x0 = np.clip(np.floor(px), 0, size - 2).astype(int)
    y0 = np.clip(np.floor(py), 0, size - 2).astype(int)
    fx, fy = px - x0, py - y0
    k = np.zeros((size, size))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            np.add.at(k, (y0 + dy, x0 + dx), wy * wx)
    return k / k.sum()


def generate_linear_kernel(size: int, angle_degrees: float, length_px: float,
                           seed: int = 0) -> BlurKernel:
    """Anti-aliased straight streak through the kernel center.

    ``length_px`` counts pixels covered along the streak, so ``length_px=1``
    gives a delta kernel.  ``seed`` is only recorded as metadata.
    """
    _check_size(size)
    if not 1.0 <= length_px <= size:
        raise ParameterError(f"length_px must lie in [1, {size}], got {length_px}")
    headings = np.full(_PATH_STEPS, math.radians(angle_degrees))
    pts = _path_points(headings, np.ones(_PATH_STEPS), length_px - 1.0)
    return BlurKernel(_rasterize(pts, size), generator="linear",
                      angle_degrees=float(angle_degrees), length_px=float(length_px),
                      seed=int(seed))


def generate_trajectory_kernel(size: int, seed: int, jitter: float = 1.0) -> BlurKernel:
    """Random camera-shake kernel from a smoothed random walk.

    The initial heading, streak length and drift noise are all drawn from
    ``seed``.  ``jitter`` scales both the heading drift (radians of random-walk
    spread over the whole path) and the speed variation; ``jitter=0`` yields
    the straight kernel ``generate_linear_kernel(size, angle, length)``.
    """
    _check_size(size)
    if jitter < 0:
        raise ParameterError(f"jitter must be nonnegative, got {jitter}")
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(0.0, 180.0))
    length = float(rng.uniform(max(1.0, 0.4 * size), float(size)))
    turn = np.cumsum(rng.standard_normal(_PATH_STEPS)) / math.sqrt(_PATH_STEPS)
    accel = rng.standard_normal(_PATH_STEPS)
    # moving average keeps speed changes smooth over ~5 segments
    speed_noise = np.convolve(accel, np.ones(5) / math.sqrt(5), mode="same")
    headings = math.radians(angle) + jitter * turn
    speeds = np.exp(0.5 * jitter * speed_noise)
    pts = _path_points(headings, speeds, length - 1.0)
    return BlurKernel(_rasterize(pts, size), generator="trajectory",
                      angle_degrees=angle, length_px=length, seed=int(seed))


def kernel_size_schedule(n: int, start: int = 13, stop: int = 31, step: int = 2) -> list[int]:
    """Kernel size for each of ``n`` corpus samples.

    Sizes run over ``range(start, stop + 1, step)`` and advance every
    ``ceil(n / number_of_sizes)`` samples.
    """
    sizes = list(range(start, stop + 1, step))
    if not sizes:
        raise ParameterError(f"empty size range {start}:{stop}:{step}")
    for s in sizes:
        _check_size(s)
    per = max(1, math.ceil(n / len(sizes)))
    return [sizes[min(i // per, len(sizes) - 1)] for i in range(n)]


# ---------------------------------------------------------------------------
# degradation


def _as_hwc(image: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None], True
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ParameterError(f"image must be HxW, HxWx1 or HxWx3, got shape {img.shape}")
    return img, False


def convolve_image(image: np.ndarray, kernel: BlurKernel, boundary: str = "circular") -> np.ndarray:
    """Per-channel true convolution (kernel flipped) without noise or clamping."""
    img, squeeze = _as_hwc(image)
    if kernel.size > min(img.shape[:2]):
        raise ParameterError(f"kernel size {kernel.size} exceeds image size {img.shape[:2]}")
    mode = "wrap" if boundary == "circular" else "reflect"
    flipped = kernel.values[::-1, ::-1]
    out = np.stack([ndimage.correlate(img[:, :, c], flipped, mode=mode)
                    for c in range(img.shape[2])], axis=2)
    return out[:, :, 0] if squeeze else out


def apply_blur(sharp: np.ndarray, config: DegradationConfig, clip: bool = True) -> np.ndarray:
    """Blur, add Gaussian noise of std ``noise_sigma``, clamp to [0, 1]."""
    out = convolve_image(sharp, config.kernel, config.boundary)
    if config.noise_sigma > 0:
        out = out + np.random.default_rng(config.rng_seed).normal(0.0, config.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


def psf_to_otf(kernel_values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """DFT of the kernel zero-padded to ``shape`` with its center moved to (0, 0)."""
    kh, kw = kernel_values.shape
    h, w = shape
    if kh > h or kw > w:
        raise ParameterError(f"kernel {kernel_values.shape} larger than target {shape}")
    padded = np.zeros((h, w))
    padded[:kh, :kw] = kernel_values
    padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.fft2(padded)


def kernel_spectrum(kernel: BlurKernel, target_size: tuple[int, int],
                    log_scaled: bool = False) -> SpectrumImage:
    h, w = target_size
    mag = np.fft.fftshift(np.abs(psf_to_otf(kernel.values, (h, w))))
    if log_scaled:
        mag = np.log1p(mag)
    return SpectrumImage(height=h, width=w, magnitude=mag, log_scaled=log_scaled)


def spectrum_anisotropy(kernel: BlurKernel, target_size: tuple[int, int] = (64, 64)) -> float:
    """Ratio of the principal spreads of spectral energy (1 for isotropic).

    A directional streak suppresses high frequencies along its direction, so
    the ratio grows with how elongated the blur is.
    """
    spec = kernel_spectrum(kernel, target_size).magnitude ** 2
    h, w = target_size
    fy, fx = np.meshgrid(np.arange(h) - h // 2, np.arange(w) - w // 2, indexing="ij")
    total = spec.sum()
    cov = np.array([[np.sum(spec * fx * fx), np.sum(spec * fx * fy)],
                    [np.sum(spec * fx * fy), np.sum(spec * fy * fy)]]) / total
    ev = np.linalg.eigvalsh(cov)
    return float(np.sqrt(ev[1] / max(ev[0], 1e-300)))


# ---------------------------------------------------------------------------
# kernel file format


def save_kernel(path, kernel: BlurKernel) -> None:
    """Write ``PSF v1 <size>`` followed by ``size`` rows of floats."""
    lines = [f"PSF v1 {kernel.size}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in kernel.values]
    Path(path).write_text("\n".join(lines) + "\n")


def load_kernel(path) -> BlurKernel:
    text = Path(path).read_text().split("\n")
    header = text[0].split()
    if len(header) != 3 or header[:2] != ["PSF", "v1"]:
        raise ParameterError(f"{path}: not a PSF v1 file (header {text[0]!r})")
    size = int(header[2])
    rows = [line.split() for line in text[1:1 + size]]
    if len(rows) != size or any(len(r) != size for r in rows):
        raise ParameterError(f"{path}: expected {size} rows of {size} values")
    values = np.array([[float(v) for v in r] for r in rows])
    return BlurKernel(values, generator="file")


# ---------------------------------------------------------------------------
# paired corpus


@dataclass
class CorpusSample:
    id: str
    sharp: np.ndarray
    blurred: np.ndarray
    kernel: BlurKernel
    meta: dict = field(default_factory=dict)


def make_kernel(generator: str, size: int, seed: int, jitter: float = 1.0) -> BlurKernel:
    if generator == "trajectory":
        return generate_trajectory_kernel(size, seed, jitter)
    if generator == "linear":
        rng = np.random.default_rng(seed)
        angle = float(rng.uniform(0.0, 180.0))
        length = float(rng.uniform(max(1.0, 0.4 * size), float(size)))
        return generate_linear_kernel(size, angle, length, seed)
    raise ParameterError(f"unknown kernel generator {generator!r}")


def build_corpus(sharp_images, n: int, sizes=(13, 31, 2), generator: str = "trajectory",
                 noise_sigma: float = 0.0, boundary: str = "circular", seed: int = 0,
                 jitter: float = 1.0, jobs: int = 1) -> list[CorpusSample]:
    """Blur ``n`` samples with kernel sizes stepped across the run.

    ``sharp_images`` is a sequence of ``(id, image)``; sample ``i`` uses image
    ``i % len(sharp_images)`` and the per-sample seed ``seed ^ i``.  Results
    are ordered by sample index regardless of ``jobs``.
    """
    if not sharp_images:
        raise ParameterError("no sharp images supplied")
    schedule = kernel_size_schedule(n, *sizes)

    def one(i: int) -> CorpusSample:
        src_id, img = sharp_images[i % len(sharp_images)]
        s = seed ^ i
        kernel = make_kernel(generator, schedule[i], s, jitter)
        cfg = DegradationConfig(kernel, noise_sigma=noise_sigma, boundary=boundary, rng_seed=s)
        return CorpusSample(id=f"{i:05d}_{src_id}", sharp=np.asarray(img, dtype=np.float64),
                            blurred=apply_blur(img, cfg), kernel=kernel,
                            meta={"source": src_id, "kernel_size": schedule[i], "seed": s,
                                  "generator": generator, "angle_degrees": kernel.angle_degrees,
                                  "length_px": kernel.length_px})

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]
