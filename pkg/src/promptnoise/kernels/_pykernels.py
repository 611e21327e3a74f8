"""Pure numpy versions of the compiled kernels (same signatures and arithmetic)."""

import numpy as np


def _integral(a):
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=out[1:, 1:])
    return out


def _box(I, i, j, k, H, W):
    return I[i + k : i + k + H, j + k : j + k + W] - I[i : i + H, j + k : j + k + W] \
        - I[i + k : i + k + H, j : j + W] + I[i : i + H, j : j + W]


def correlation_map(xp, H, W, rho, var_eps):
    r = rho // 2
    n = rho * rho
    x = xp - xp.mean()
    Ix = _integral(x)
    Ixx = _integral(x * x)
    ch_rows, ch_cols = H + 2 * r, W + 2 * r

    sa = _box(Ix, r, r, rho, H, W) / n
    va = _box(Ixx, r, r, rho, H, W) / n - sa * sa
    ok_a = va >= var_eps
    out = np.zeros((H, W, n), dtype=np.float64)
    ch = 0
    for dy in range(rho):
        for dx in range(rho):
            if dy == r and dx == r:
                out[..., ch] = np.where(ok_a, va / np.sqrt(np.where(ok_a, va * va, 1.0)), 0.0)
                ch += 1
                continue
            prod = x[r : r + ch_rows, r : r + ch_cols] * x[dy : dy + ch_rows, dx : dx + ch_cols]
            Ip = _integral(prod)
            sb = _box(Ix, dy, dx, rho, H, W) / n
            vb = _box(Ixx, dy, dx, rho, H, W) / n - sb * sb
            ok = ok_a & (vb >= var_eps)
            cov = _box(Ip, 0, 0, rho, H, W) / n - sa * sb
            out[..., ch] = np.where(ok, cov / np.sqrt(np.where(ok, va * vb, 1.0)), 0.0)
            ch += 1
    return out


def histogram_counts(values, bins, lo, hi):
    idx = np.floor((np.asarray(values, dtype=np.float64) - lo) * (bins / (hi - lo)))
    idx = np.clip(idx, 0, bins - 1).astype(np.int64)
    return np.bincount(idx, minlength=bins).astype(np.int64)
