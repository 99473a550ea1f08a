"""Image quality metrics and the composite restoration loss.

Metrics take plain arrays in [0, peak]; the loss functions take a
:class:`~deblur_lab.tensor_core.DiffTensor` prediction so they can be
differentiated.  SSIM uses an 11x11 Gaussian window (sigma 1.5) applied with
'valid' extent, ``C1 = (0.01 peak)^2`` and ``C2 = (0.03 peak)^2``; the array
and tensor versions evaluate the same expression in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, DimensionError
from .tensor_core import ConvSpec, DiffTensor

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PERCEPTUAL_SEED = 0xD3B1


def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr_from_mse(mse_value: float, peak: float = 1.0) -> float:
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    if mse_value == 0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse_value)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical images."""
    return psnr_from_mse(mse(a, b), peak)


def _filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return tc._filter_axis_valid(tc._filter_axis_valid(img, taps, 0), taps, 1)


def ssim_map(a, b, peak: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    taps = gaussian_taps()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter(a, taps), _filter(b, taps)
    s_aa = _filter(a * a, taps) - mu_a * mu_a
    s_bb = _filter(b * b, taps) - mu_b * mu_b
    s_ab = _filter(a * b, taps) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over the local map and channels."""
    return float(np.mean(ssim_map(a, b, peak)))


@dataclass(frozen=True)
class MetricResult:
    mse: float
    psnr_db: float
    ssim: float
    mae: float


def compute_metrics(pred, target, peak: float = 1.0) -> MetricResult:
    m = mse(pred, target)
    return MetricResult(mse=m, psnr_db=psnr_from_mse(m, peak), ssim=ssim(pred, target, peak),
                        mae=mae(pred, target))


# ---------------------------------------------------------------------------
# differentiable terms


def _const(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def mse_loss(pred: DiffTensor, target) -> DiffTensor:
    return tc.tensor_mean(tc.square(tc.sub(pred, _const(target))))


def mae_loss(pred: DiffTensor, target) -> DiffTensor:
    return tc.tensor_mean(tc.absolute(tc.sub(pred, _const(target))))


def ssim_tensor(pred: DiffTensor, target, peak: float = 1.0) -> DiffTensor:
    """Differentiable mean SSIM, same formula as :func:`ssim`."""
    target = _const(target)
    if pred.shape != target.shape:
        raise DimensionError(f"image shapes differ: {pred.shape} vs {target.shape}")
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    taps = gaussian_taps()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    f = lambda t: tc.separable_filter_valid(t, taps)
    mu_a, mu_b = f(pred), f(target)
    s_aa = f(pred * pred) - mu_a * mu_a
    s_bb = f(target * target) - mu_b * mu_b
    s_ab = f(pred * target) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return tc.tensor_mean(num / den)


class PerceptualExtractor:
    """Frozen three-stage conv feature extractor (3->16->32->64, 3x3, stride 2, ReLU).

    Stands in for pretrained VGG16 features: weights are He-uniform draws
    from a fixed seed and never change.
    """

    CHANNELS = (3, 16, 32, 64)

    def __init__(self, seed: int = PERCEPTUAL_SEED):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.specs = []
        self.weights = []
        for cin, cout in zip(self.CHANNELS[:-1], self.CHANNELS[1:]):
            spec = ConvSpec(3, 3, cin, cout, stride=2, padding="same")
            limit = math.sqrt(6.0 / (9 * cin))
            w = DiffTensor(rng.uniform(-limit, limit, (3, 3, cin, cout)))
            b = DiffTensor(np.zeros(cout))
            self.specs.append(spec)
            self.weights.append((w, b))

    def features(self, x) -> list[DiffTensor]:
        x = _const(x)
        if x.ndim != 3 or x.shape[2] != 3:
            raise DimensionError(f"perceptual extractor needs [H, W, 3] input, got {x.shape}")
        feats = []
        for spec, (w, b) in zip(self.specs, self.weights):
            x = tc.relu(tc.conv2d(x, w, b, spec))
            feats.append(x)
        return feats


_DEFAULT_EXTRACTOR = None


def default_extractor() -> PerceptualExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = PerceptualExtractor()
    return _DEFAULT_EXTRACTOR


def perceptual_loss(pred: DiffTensor, target, extractor: PerceptualExtractor | None = None) -> DiffTensor:
    """Sum over stages of the mean squared feature difference."""
    extractor = extractor or default_extractor()
    target = _const(target)
    if pred.shape != target.shape:
        raise DimensionError(f"image shapes differ: {pred.shape} vs {target.shape}")
    with tc.no_grad():
        target_feats = [f.detach() for f in extractor.features(target)]
    total = None
    for fp, ft in zip(extractor.features(pred), target_feats):
        term = tc.tensor_mean(tc.square(tc.sub(fp, ft)))
        total = term if total is None else tc.add(total, term)
    return total


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # MAE
    beta: float = 1.0    # MSE
    gamma: float = 0.1   # perceptual
    delta: float = 0.5   # 1 - SSIM

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma, self.delta)
        if any(v < 0 for v in w):
            raise ConfigurationError(f"loss weights must be nonnegative, got {w}")
        if not any(v > 0 for v in w):
            raise ConfigurationError("at least one loss weight must be positive")


def composite_loss(pred: DiffTensor, target, weights: LossWeights | None = None,
                   extractor: PerceptualExtractor | None = None, return_terms: bool = False):
    """``alpha MAE + beta MSE + gamma perceptual + delta (1 - SSIM)``.

    Terms with zero weight are skipped entirely.  With ``return_terms`` a
    dict of the unweighted term values is returned as well.
    """
    weights = weights or LossWeights()
    target = _const(target)
    if pred.shape != target.shape:
        raise DimensionError(f"image shapes differ: {pred.shape} vs {target.shape}")
    parts = []
    terms = {}
    if weights.alpha:
        t = mae_loss(pred, target)
        terms["mae"] = t.item()
        parts.append(t if weights.alpha == 1.0 else t * weights.alpha)
    if weights.beta:
        t = mse_loss(pred, target)
        terms["mse"] = t.item()
        parts.append(t if weights.beta == 1.0 else t * weights.beta)
    if weights.gamma:
        t = perceptual_loss(pred, target, extractor)
        terms["perceptual"] = t.item()
        parts.append(t * weights.gamma)
    if weights.delta:
        t = tc.sub(1.0, ssim_tensor(pred, target))
        terms["ssim_loss"] = t.item()
        parts.append(t * weights.delta)
    total = parts[0]
    for p in parts[1:]:
        total = tc.add(total, p)
    return (total, terms) if return_terms else total
