"""Non-blind classical deconvolution under circular boundary conditions.

All solvers work per channel in the Fourier domain, where circular
convolution with the PSF is a pointwise product with its transfer function
``H``.  Tikhonov regularization with an identity prior is the ``epsilon``
term of :func:`inverse_filter`:  ``X = Y conj(H) / (|H|^2 + epsilon)`` is the
minimizer of ``||k*x - y||^2 + epsilon ||x||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blur_synth import BlurKernel, psf_to_otf
from .errors import ConvergenceError, NumericError, ParameterError

METHODS = ("inverse", "wiener", "richardson_lucy", "landweber", "tv")


@dataclass
class DeconvRequest:
    blurred: np.ndarray
    kernel: BlurKernel
    method: str = "wiener"
    params: dict = field(default_factory=dict)
    boundary: str = "circular"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.boundary != "circular":
            raise ParameterError("classical solvers require circular boundary handling")


class _Operator:
    """Circular convolution by a PSF and its adjoint, applied over H x W x C."""

    def __init__(self, kernel: BlurKernel, shape: tuple[int, int]):
        if kernel.size > min(shape):
            raise ParameterError(f"kernel size {kernel.size} exceeds image size {shape}")
        self.otf = psf_to_otf(kernel.values, shape)[:, :, None]

    def fwd(self, x):
        return np.real(np.fft.ifft2(np.fft.fft2(x, axes=(0, 1)) * self.otf, axes=(0, 1)))

    def adj(self, x):
        return np.real(np.fft.ifft2(np.fft.fft2(x, axes=(0, 1)) * np.conj(self.otf), axes=(0, 1)))


def _prepare(blurred):
    y = np.asarray(blurred, dtype=np.float64)
    squeeze = y.ndim == 2
    if squeeze:
        y = y[:, :, None]
    if y.ndim != 3:
        raise ParameterError(f"image must be HxW or HxWxC, got shape {y.shape}")
    return y, squeeze


def _finish(x, squeeze, clip):
    if clip:
        x = np.clip(x, 0.0, 1.0)
    return x[:, :, 0] if squeeze else x


def _spectral_divide(y, kernel, floor, clip):
    y, squeeze = _prepare(y)
    H = psf_to_otf(kernel.values, y.shape[:2])[:, :, None]
    num = np.fft.fft2(y, axes=(0, 1)) * np.conj(H)
    den = np.abs(H) ** 2 + floor
    # exact spectral zeros with no floor: leave those frequencies empty
    safe = den > 0
    X = np.where(safe, num / np.where(safe, den, 1.0), 0.0)
    x = np.real(np.fft.ifft2(X, axes=(0, 1)))
    return _finish(x, squeeze, clip)


def inverse_filter(blurred, kernel: BlurKernel, epsilon: float = 0.0, clip: bool = True):
    """``X = Y conj(H) / (|H|^2 + epsilon)``; bins where the denominator is 0 are zeroed."""
    if epsilon < 0:
        raise ParameterError(f"epsilon must be >= 0, got {epsilon}")
    return _spectral_divide(blurred, kernel, float(epsilon), clip)


def wiener_filter(blurred, kernel: BlurKernel, nsr: float = 1e-3, clip: bool = True):
    """Wiener deconvolution with a scalar noise-to-signal power ratio."""
    if nsr < 0:
        raise ParameterError(f"nsr must be >= 0, got {nsr}")
    return _spectral_divide(blurred, kernel, float(nsr), clip)


RL_FLOOR = 1e-12


def richardson_lucy(blurred, kernel: BlurKernel, iterations: int = 50, clip: bool = True,
                    callback=None):
    """Multiplicative Richardson-Lucy updates starting from the observation.

    Pixels are floored at ``RL_FLOOR`` first.  ``callback(t, x)`` is invoked
    after each iteration with the unclipped estimate.
    """
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    y, squeeze = _prepare(blurred)
    y = np.maximum(y, RL_FLOOR)
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise NumericError("observation has non-positive or non-finite pixels after flooring")
    op = _Operator(kernel, y.shape[:2])
    x = y.copy()
    for t in range(iterations):
        ratio = y / np.maximum(op.fwd(x), RL_FLOOR)
        x = x * op.adj(ratio)
        if callback is not None:
            callback(t + 1, x)
    return _finish(x, squeeze, clip)


def landweber(blurred, kernel: BlurKernel, iterations: int = 100, tau: float = 1.0,
              clip: bool = True, callback=None):
    """Gradient descent on ``0.5 ||k*x - y||^2`` from ``x = y``.

    ``max|H|^2 = 1`` for a normalized nonnegative kernel, so any
    ``tau`` in (0, 2) keeps the residual non-increasing.
    """
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    if not 0.0 < tau < 2.0:
        raise ParameterError(f"tau must lie in (0, 2), got {tau}")
    y, squeeze = _prepare(blurred)
    op = _Operator(kernel, y.shape[:2])
    x = y.copy()
    for t in range(iterations):
        x = x + tau * op.adj(y - op.fwd(x))
        if callback is not None:
            callback(t + 1, x)
    return _finish(x, squeeze, clip)


def residual_norm(x, y, kernel: BlurKernel) -> float:
    x, _ = _prepare(x)
    y, _ = _prepare(y)
    r = _Operator(kernel, y.shape[:2]).fwd(x) - y
    return float(np.sum(r * r))


TV_EPS = 1e-6
MAX_HALVINGS = 30


def _grad(x):
    return np.roll(x, -1, axis=1) - x, np.roll(x, -1, axis=0) - x


def _div(px, py):
    return (px - np.roll(px, 1, axis=1)) + (py - np.roll(py, 1, axis=0))


def tv_objective(x, y, op: _Operator, lam: float) -> float:
    r = op.fwd(x) - y
    gx, gy = _grad(x)
    return float(0.5 * np.sum(r * r) + lam * np.sum(np.sqrt(gx * gx + gy * gy + TV_EPS)))


def tv_deblur(blurred, kernel: BlurKernel, lam: float = 0.01, iterations: int = 200,
              step: float = 1.0, clip: bool = True, callback=None):
    """Smoothed isotropic TV deconvolution by backtracking gradient descent.

    Minimizes ``0.5 ||k*x - y||^2 + lam * sum sqrt(|grad x|^2 + eps)`` with
    circular forward differences.  A trial step that raises the objective is
    halved (the reduced step is kept for later iterations).
    ``callback(t, x, objective)`` runs after each accepted iteration.
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    if iterations < 1 or step <= 0:
        raise ParameterError("iterations must be >= 1 and step > 0")
    y, squeeze = _prepare(blurred)
    op = _Operator(kernel, y.shape[:2])
    x = y.copy()
    f = tv_objective(x, y, op, lam)
    for t in range(iterations):
        g = op.adj(op.fwd(x) - y)
        if lam > 0:
            gx, gy = _grad(x)
            mag = np.sqrt(gx * gx + gy * gy + TV_EPS)
            g = g - lam * _div(gx / mag, gy / mag)
        for _ in range(MAX_HALVINGS + 1):
            trial = x - step * g
            f_trial = tv_objective(trial, y, op, lam)
            if f_trial <= f:
                break
            step *= 0.5
        else:
            if f_trial - f > 1e-12 * max(abs(f), 1.0):
                raise ConvergenceError(f"objective still increasing after {MAX_HALVINGS} step halvings")
            break  # stalled at rounding level: treat as converged
        x, f = trial, f_trial
        if callback is not None:
            callback(t + 1, x, f)
    return _finish(x, squeeze, clip)


def deconvolve(req: DeconvRequest, clip: bool = True):
    """Dispatch a :class:`DeconvRequest` to its solver."""
    p = dict(req.params)
    if req.method == "inverse":
        return inverse_filter(req.blurred, req.kernel, p.get("epsilon", 0.0), clip)
    if req.method == "wiener":
        return wiener_filter(req.blurred, req.kernel, p.get("nsr", 1e-3), clip)
    if req.method == "richardson_lucy":
        return richardson_lucy(req.blurred, req.kernel, int(p.get("iterations", 50)), clip)
    if req.method == "landweber":
        return landweber(req.blurred, req.kernel, int(p.get("iterations", 100)),
                         p.get("tau", 1.0), clip)
    return tv_deblur(req.blurred, req.kernel, p.get("lambda", 0.01), int(p.get("iterations", 200)),
                     p.get("step", 1.0), clip)
