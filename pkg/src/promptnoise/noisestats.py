"""Noise-residual statistics and image-quality metrics.

Residuals are float arrays of shape ``(H, W, 3)`` holding ``noisy - clean`` for
images normalized to ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ConfigError, ContractError

VAR_EPS = 1e-12
KLD_EPS = 1e-10
DEFAULT_RHO = 7
DEFAULT_BINS = 256


def residual(noisy: np.ndarray, clean: np.ndarray) -> np.ndarray:
    """``noisy - clean`` in float64, after a shape check."""
    if noisy.shape != clean.shape:
        raise ContractError(f"shape mismatch {noisy.shape} vs {clean.shape}")
    return np.asarray(noisy, dtype=np.float64) - np.asarray(clean, dtype=np.float64)


def _correlation_plane(plane: np.ndarray, rho: int) -> np.ndarray:
    H, W = plane.shape
    pad = rho - 1
    xp = np.ascontiguousarray(np.pad(plane, pad, mode="reflect"), dtype=np.float64)
    return kernels.correlation_map(xp, H, W, rho, VAR_EPS)


def local_correlation_map(
    n: np.ndarray, rho: int = DEFAULT_RHO, per_channel: bool = False
) -> np.ndarray:
    """Pearson correlation between each pixel's window and its shifted copies.

    For pixel ``p`` and offset ``d`` in the ``rho x rho`` neighbourhood, channel
    ``d`` holds the correlation between the values in the window centred on ``p``
    and the values in the same window displaced by ``d``. Offsets are laid out
    row-major, so the centre channel is ``(rho**2 - 1) // 2``. Windows with
    variance below ``1e-12`` yield 0. Borders use reflect padding.

    Args:
        n: Residual of shape ``(H, W, 3)`` (or ``(H, W)``).
        rho: Odd window size, ``3 <= rho <= min(H, W)``.
        per_channel: Correlate each colour channel separately instead of the
            channel mean.

    Returns:
        ``(H, W, rho**2)``, or ``(H, W, C, rho**2)`` when ``per_channel``.
    """
    n = np.asarray(n, dtype=np.float64)
    if n.ndim not in (2, 3):
        raise ContractError(f"expected (H, W) or (H, W, C), got {n.shape}")
    H, W = n.shape[:2]
    if rho % 2 == 0 or rho < 3:
        raise ConfigError(f"rho must be odd and >= 3, got {rho}")
    if rho > min(H, W):
        raise ConfigError(f"rho={rho} exceeds image extent {H}x{W}")
    if n.ndim == 2:
        return _correlation_plane(n, rho)
    if per_channel:
        return np.stack([_correlation_plane(n[..., c], rho) for c in range(n.shape[2])], axis=2)
    return _correlation_plane(n.mean(axis=2), rho)


def rowcol_average(cm: np.ndarray) -> np.ndarray:
    """Row and column means of the ``rho x rho`` offset grid in the last axis.

    Returns ``(..., 2 * rho)``: the first ``rho`` entries are means over each grid
    row, the last ``rho`` over each grid column.
    """
    n = cm.shape[-1]
    rho = math.isqrt(n)
    if rho * rho != n:
        raise ContractError(f"last axis {n} is not a square")
    grid = cm.reshape(*cm.shape[:-1], rho, rho)
    return np.concatenate([grid.mean(axis=-1), grid.mean(axis=-2)], axis=-1)


@dataclass(frozen=True)
class NoiseHistogram:
    bin_edges: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_values(cls, values, bins: int = DEFAULT_BINS, eps: float = KLD_EPS):
        """Equal-width histogram on [-1, 1], eps-smoothed and renormalized."""
        flat = np.ascontiguousarray(np.ravel(values), dtype=np.float64)
        if flat.size == 0:
            raise ContractError("cannot build a histogram from no values")
        counts = kernels.histogram_counts(flat, bins, -1.0, 1.0).astype(np.float64)
        p = counts / counts.sum() + eps
        return cls(np.linspace(-1.0, 1.0, bins + 1), p / p.sum())


def kld_from_histograms(p: NoiseHistogram, q: NoiseHistogram) -> float:
    """``sum p log(p / q)`` in nats."""
    pp, qq = p.probabilities, q.probabilities
    if pp.shape != qq.shape:
        raise ContractError("histograms have different bin counts")
    return float(np.sum(pp * (np.log(pp) - np.log(qq))))


def _pool(residuals) -> np.ndarray:
    if isinstance(residuals, np.ndarray):
        arrs = [residuals]
    else:
        arrs = [np.asarray(r) for r in residuals]
    if not arrs or all(a.size == 0 for a in arrs):
        raise ContractError("empty residual set")
    return np.concatenate([a.ravel() for a in arrs])


def kld(real, fake, bins: int = DEFAULT_BINS) -> float:
    """KL divergence between pooled histograms of two residual sets.

    Each argument is a residual array or an iterable of them; all values are
    pooled into one ``bins``-bin histogram on [-1, 1].
    """
    p = NoiseHistogram.from_values(_pool(real), bins)
    q = NoiseHistogram.from_values(_pool(fake), bins)
    return kld_from_histograms(p, q)


def akld(
    clean: np.ndarray,
    real_noisy: np.ndarray,
    gen: Callable[[np.ndarray], np.ndarray],
    n_samples: int = 10,
    bins: int = DEFAULT_BINS,
) -> float:
    """Mean KLD between the real residual and ``n_samples`` generated residuals."""
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    real = residual(real_noisy, clean)
    p = NoiseHistogram.from_values(real, bins)
    total = 0.0
    for _ in range(n_samples):
        fake = np.asarray(gen(clean))
        if fake.shape != clean.shape:
            raise ContractError(f"generator returned {fake.shape}, expected {clean.shape}")
        total += kld_from_histograms(p, NoiseHistogram.from_values(residual(fake, clean), bins))
    return total / n_samples


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Colour images are scored per channel and averaged. Local statistics near the
    border (within 5 pixels) are excluded from the mean.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, k1, k2) for c in range(a.shape[2])]))
    win = _gaussian_window()
    pad = len(win) // 2
    if min(a.shape) <= 2 * pad:
        raise ContractError(f"image {a.shape} smaller than the 11x11 window")

    def blur(x):
        y = ndimage.correlate1d(x, win, axis=0, mode="reflect")
        return ndimage.correlate1d(y, win, axis=1, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    s_aa = blur(a * a) - mu_a**2
    s_bb = blur(b * b) - mu_b**2
    s_ab = blur(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    smap = num / den
    return float(smap[pad:-pad, pad:-pad].mean())


def channel_moments(residuals: Sequence[np.ndarray] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of a pooled residual set."""
    if isinstance(residuals, np.ndarray):
        residuals = [residuals]
    stacked = np.concatenate([np.reshape(r, (-1, r.shape[-1])) for r in residuals], axis=0)
    return stacked.mean(axis=0), stacked.std(axis=0)


def summarize(rows: Iterable[dict], keys: Sequence[str]) -> dict:
    """Arithmetic means of the given numeric columns."""
    rows = list(rows)
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}
