"""Fidelity metrics for patches and distribution distances for oracle tasks."""

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist

from .oracle import GaussianMixture, gaussian_kl

__all__ = ["EvalReport", "psnr", "ssim", "mmd2", "fit_gaussian_kl", "per_mode_kl", "PSNR_CAP"]

PSNR_CAP = 99.0


@dataclass
class EvalReport:
    task: str
    step: int
    n_samples: int
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    mmd2: Optional[float] = None
    fit_kl: Optional[float] = None
    mode_kl: Optional[list] = None
    baseline_psnr: Optional[float] = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for peak value 1, capped at ``PSNR_CAP``."""
    a, b = _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(a, b, window=8):
    """Mean SSIM over all ``window x window`` uniform windows (population statistics)."""
    a, b = _check_same(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"patch {a.shape} smaller than window {window}")
    c1, c2 = 0.01**2, 0.03**2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _kernel_sum(X, Y, bandwidth, exclude_diag=False, chunk=2048):
    total = 0.0
    for i in range(0, X.shape[0], chunk):
        K = np.exp(-0.5 * cdist(X[i : i + chunk], Y, "sqeuclidean") / bandwidth**2)
        if exclude_diag:
            rows = np.arange(K.shape[0])
            K[rows, i + rows] = 0.0
        total += K.sum()
    return total


def mmd2(X, Y, bandwidth=1.0):
    """Unbiased squared MMD with an RBF kernel ``exp(-|x-y|^2 / (2 h^2))``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X[:, None] if X.ndim == 1 else X
    Y = Y[:, None] if Y.ndim == 1 else Y
    m, n = X.shape[0], Y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("mmd2 needs at least two samples per set")
    kxx = _kernel_sum(X, X, bandwidth, exclude_diag=True) / (m * (m - 1))
    kyy = _kernel_sum(Y, Y, bandwidth, exclude_diag=True) / (n * (n - 1))
    kxy = _kernel_sum(X, Y, bandwidth) / (m * n)
    # symmetric summation order so mmd2(X, Y) == mmd2(Y, X) exactly
    kxy = 0.5 * (kxy + _kernel_sum(Y, X, bandwidth) / (m * n))
    return float(kxx + kyy - 2.0 * kxy)


def _fit(X, jitter):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    D = X.shape[1]
    if X.shape[0] <= D + 1:
        raise ValueError(f"need more than {D + 1} samples to fit a {D}-D Gaussian")
    cov = np.atleast_2d(np.cov(X, rowvar=False)) + jitter * np.eye(D)
    try:
        return GaussianMixture.gaussian(X.mean(axis=0), cov)
    except ValueError as exc:
        raise ValueError("fitted covariance is singular") from exc


def fit_gaussian_kl(X, target, jitter=1e-6):
    """``KL(N(mean(X), cov(X)) || target)`` for a single-Gaussian target."""
    if target.n_components != 1:
        raise ValueError("target must be a single Gaussian")
    return gaussian_kl(_fit(X, jitter), target)


def per_mode_kl(X, target, jitter=1e-6):
    """Assign samples to the target component with largest responsibility, then fit each mode.

    Returns one KL per component; ``inf`` when a mode received too few samples.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X[:, None] if X.ndim == 1 else X
    assign = np.argmax(target.responsibilities(X), axis=1)
    out = []
    for k in range(target.n_components):
        comp = GaussianMixture.gaussian(target.means[k], target.covs[k])
        sel = X[assign == k]
        out.append(gaussian_kl(_fit(sel, jitter), comp) if sel.shape[0] > X.shape[1] + 1 else math.inf)
    return out
