"""Image quality metrics, attention complexity accounting and cluster separation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import blocks as B
from . import tensor as T

PSNR_CAP_DB = 99.99
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class FlopReport:
    H: int
    W: int
    C: int
    heads: int
    analytic_sa: int
    analytic_mrap: int
    measured_mrap_core: int


@dataclass
class ClusterReport:
    silhouette_encoder: float
    silhouette_output: float
    n_per_label: int
    feature_dims: tuple[int, int]


# ----------------------------------------------------------------------------
# quality
# ----------------------------------------------------------------------------

def psnr_metric(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs return the 99.99 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def psnr_bits(a: np.ndarray, b: np.ndarray, bits: int = 8) -> float:
    """PSNR with peak ``2**bits - 1`` for integer-range images."""
    return psnr_metric(a, b, peak=float(2 ** bits - 1))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable filter over the last two axes, valid positions only
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim_metric(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    Accepts ``[H, W]`` or ``[C, H, W]`` arrays.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------------------
# complexity
# ----------------------------------------------------------------------------

def _positive(**dims: int) -> None:
    bad = {k: v for k, v in dims.items() if v < 1}
    if bad:
        raise ValueError(f"dimensions must be positive, got {bad}")


def flops_sa(H: int, W: int, C: int) -> int:
    """Cost of global spatial self-attention: ``4*HW*C^2 + 2*(HW)^2*C``."""
    _positive(H=H, W=W, C=C)
    hw = H * W
    return 4 * hw * C * C + 2 * hw * hw * C


def flops_mrap(H: int, W: int, C: int) -> int:
    """Cost of channel-wise rearranged attention: ``5*HW*C^2 + HW*C``."""
    _positive(H=H, W=W, C=C)
    hw = H * W
    return 5 * hw * C * C + hw * C


def mrap_core_macs(H: int, W: int, C: int, heads: int) -> int:
    """Closed form for the two attention matmuls: ``2 * h * (C/h)^2 * HW``."""
    d = C // heads
    return 2 * heads * d * d * H * W


def measure_mrap_core(H: int, W: int, C: int, heads: int, seed: int = 0) -> int:
    """Run one MRAP forward on a random ``[1, C, H, W]`` input and count its matmul MACs."""
    if C % heads:
        raise ValueError(f"heads={heads} must divide C={C}")
    rng = np.random.default_rng(seed)
    params = B.Init(rng).mrap(C, heads, with_prompts=True)
    x = T.Tensor(rng.standard_normal((1, C, H, W)).astype(np.float32))
    with T.no_grad(), T.MacCounter() as counter:
        B.mrap(x, params)
    return counter.macs


def flop_report(H: int, W: int, C: int, heads: int) -> FlopReport:
    return FlopReport(H, W, C, heads, flops_sa(H, W, C), flops_mrap(H, W, C),
                      measure_mrap_core(H, W, C, heads))


# ----------------------------------------------------------------------------
# clustering
# ----------------------------------------------------------------------------

def silhouette(features: Sequence, labels: Sequence) -> float:
    """Mean silhouette coefficient under Euclidean distance."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = [getattr(lab, "value", lab) for lab in labels]
    if len(labels) != len(x):
        raise ValueError("features and labels differ in length")
    uniq = sorted(set(labels))
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two labels")
    lab_idx = np.array([uniq.index(lab) for lab in labels])
    counts = np.bincount(lab_idx, minlength=len(uniq))
    if (counts < 2).any():
        raise ValueError("silhouette needs at least two samples per label")

    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1))
    # mean distance from each sample to every label's members
    onehot = np.eye(len(uniq))[lab_idx]
    sums = dist @ onehot
    own = onehot.astype(bool)
    a = sums[own] / (counts[lab_idx] - 1)
    means = sums / counts[None, :]
    means[own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())
