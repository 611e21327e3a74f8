"""Closed-form consistency-training schedules.

Everything here runs in double precision on plain Python floats / numpy arrays
so that the unit tests can compare against exact values. The training loop
converts to tensors at the call site.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError

__all__ = [
    "SigmaSchedule",
    "Curriculum",
    "TimestepSampler",
    "EDMCoefficients",
    "curriculum_steps",
    "sigma_at",
    "sigma_grid",
    "timestep_probs",
    "edm_coeffs",
    "pseudo_huber",
    "loss_weight",
    "add_noise",
    "dump_csv",
]


@dataclass(frozen=True)
class SigmaSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    tau: float = 7.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class Curriculum:
    """Discretization curriculum: number of noise levels as a function of iteration.

    ``s1=1280`` is the original iCT value; 160 is the default here.
    """

    s0: int = 10
    s1: int = 160
    K: int = 250_000
    floored: bool = False

    def __post_init__(self):
        if self.s0 < 1 or self.s1 < self.s0:
            raise ConfigError(f"need 1 <= s0 <= s1, got s0={self.s0}, s1={self.s1}")
        if self.K <= 0:
            raise ConfigError(f"K must be positive, got {self.K}")
        if self.k_prime < 1:
            raise ConfigError(f"K={self.K} too small for s0={self.s0}, s1={self.s1}")

    @property
    def k_prime(self) -> int:
        return math.floor(self.K / (math.log2(self.s1 / self.s0) + 1))


CURRICULUM_PRESETS = {
    "png": Curriculum(s0=10, s1=160),
    "ict": Curriculum(s0=10, s1=1280),
}


@dataclass(frozen=True)
class TimestepSampler:
    p_mean: float = -1.1
    p_std: float = 2.0

    def __post_init__(self):
        if self.p_std <= 0:
            raise ConfigError(f"p_std must be positive, got {self.p_std}")


@dataclass(frozen=True)
class EDMCoefficients:
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ConfigError(f"sigma_data must be positive, got {self.sigma_data}")


def curriculum_steps(k: int, c: Curriculum) -> int:
    """Number of discretization steps N at iteration ``k``.

    ``N = min(s0 * 2**(k / K'), s1) + 1`` with ``K' = floor(K / (log2(s1/s0) + 1))``.
    The exponent is real-valued unless ``c.floored`` is set, in which case it is
    ``floor(k / K')`` and N moves in stair steps.
    """
    if not 0 <= k <= c.K:
        raise ContractError(f"iteration {k} outside [0, {c.K}]")
    expo = (k // c.k_prime) if c.floored else k / c.k_prime
    return int(math.floor(min(c.s0 * 2.0**expo, c.s1))) + 1


def sigma_at(t: int, N: int, s: SigmaSchedule = SigmaSchedule()) -> float:
    """Noise level of step ``t`` (1-based) on an ``N``-point Karras grid."""
    if N < 2:
        raise ContractError(f"need N >= 2, got {N}")
    if not 1 <= t <= N:
        raise IndexError(f"step {t} outside [1, {N}]")
    if t == 1:
        return float(s.sigma_min)
    if t == N:
        return float(s.sigma_max)
    lo = s.sigma_min ** (1.0 / s.tau)
    hi = s.sigma_max ** (1.0 / s.tau)
    return float((lo + (t - 1) / (N - 1) * (hi - lo)) ** s.tau)


def sigma_grid(N: int, s: SigmaSchedule = SigmaSchedule()) -> np.ndarray:
    """All ``N`` noise levels, ascending, endpoints pinned exactly."""
    if N < 2:
        raise ContractError(f"need N >= 2, got {N}")
    lo = s.sigma_min ** (1.0 / s.tau)
    hi = s.sigma_max ** (1.0 / s.tau)
    ramp = np.arange(N, dtype=np.float64) / (N - 1)
    grid = (lo + ramp * (hi - lo)) ** s.tau
    grid[0], grid[-1] = s.sigma_min, s.sigma_max
    return grid


def timestep_probs(
    N: int, s: SigmaSchedule = SigmaSchedule(), ts: TimestepSampler = TimestepSampler()
) -> np.ndarray:
    """Lognormal-induced probability of each interval ``t = 1..N-1``.

    Entry ``i`` is the probability of drawing ``t = i + 1``, i.e. the pair
    ``(sigma_t, sigma_{t+1})``.
    """
    log_sig = np.log(sigma_grid(N, s))
    cdf = erf((log_sig - ts.p_mean) / (math.sqrt(2.0) * ts.p_std))
    p = np.diff(cdf)
    return p / p.sum()


def edm_coeffs(sigma_t, sigma_0: float = 0.002, e: EDMCoefficients = EDMCoefficients()):
    """Return ``(c_in, c_skip, c_out)`` for the boundary-respecting parameterization.

    ``sigma_t`` may be a float or an array; array-likes are evaluated elementwise.
    """
    sd2 = e.sigma_data**2
    below = sigma_t < sigma_0
    if bool(below.any() if hasattr(below, "any") else below):
        raise ContractError("sigma_t must be >= sigma_0")
    if isinstance(sigma_t, (int, float)):
        c_in = 1.0 / math.sqrt(sd2 + sigma_t**2)
        c_skip = sd2 / ((sigma_t - sigma_0) ** 2 + sd2)
        c_out = e.sigma_data * (sigma_t - sigma_0) * c_in
        return c_in, c_skip, c_out
    # torch tensors and numpy arrays share this arithmetic
    c_in = (sd2 + sigma_t**2) ** -0.5
    c_skip = sd2 / ((sigma_t - sigma_0) ** 2 + sd2)
    c_out = e.sigma_data * (sigma_t - sigma_0) * c_in
    return c_in, c_skip, c_out


def pseudo_huber(x, y, m: int | None = None):
    """``sqrt(||x - y||^2 + c^2) - c`` with ``c = 0.00054 * sqrt(m)``.

    Works on numpy arrays and torch tensors. ``m`` defaults to the element count.
    """
    if tuple(x.shape) != tuple(y.shape):
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if m is None:
        m = int(np.prod(x.shape)) if len(x.shape) else 1
    c = 0.00054 * math.sqrt(m)
    sq = ((x - y) ** 2).sum()
    # same value as sqrt(sq + c^2) - c without the cancellation for small sq
    return sq / ((sq + c * c) ** 0.5 + c)


def loss_weight(sigma_t: float, sigma_t1: float) -> float:
    """CT weighting ``1 / (sigma_{t+1} - sigma_t)``."""
    gap = sigma_t1 - sigma_t
    if not gap > 0:
        raise ContractError(f"need sigma_t1 > sigma_t, got {sigma_t} and {sigma_t1}")
    return 1.0 / gap


def add_noise(x0, sigma_t, eps):
    """Variance-exploding forward process ``x0 + sigma_t * eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ContractError(f"shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}")
    return x0 + sigma_t * eps


def dump_csv(
    N: int,
    s: SigmaSchedule = SigmaSchedule(),
    ts: TimestepSampler = TimestepSampler(),
) -> str:
    """CSV with one row per grid point: ``t, sigma, p, lambda``.

    The last row has no outgoing interval, so its ``p`` and ``lambda`` are empty.
    """
    grid = sigma_grid(N, s)
    probs = timestep_probs(N, s, ts)
    out = io.StringIO()
    out.write("t,sigma,p,lambda\n")
    for i, sig in enumerate(grid):
        if i < N - 1:
            lam = loss_weight(grid[i], grid[i + 1])
            out.write(f"{i + 1},{sig:.17g},{probs[i]:.17g},{lam:.17g}\n")
        else:
            out.write(f"{i + 1},{sig:.17g},,\n")
    return out.getvalue()
