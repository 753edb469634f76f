"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, O(n^2) counting, dense
sweeps) and shares no code with the library paths it checks.
"""

from __future__ import annotations

import numpy as np


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom))


def pair_count_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """O(n^2) Mann-Whitney statistic with half credit for ties."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def count_far_frr(target: np.ndarray, nontarget: np.ndarray, tau: float) -> tuple[float, float]:
    """Direct counting at one threshold; accept iff score >= tau."""
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    far = float(np.sum(nontarget >= tau)) / len(nontarget)
    frr = float(np.sum(target < tau)) / len(target)
    return far, frr


def sweep_eer(target: np.ndarray, nontarget: np.ndarray) -> tuple[float, float]:
    """Exhaustive threshold sweep plus linear interpolation at the
    (FAR - FRR) sign change."""
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    taus = [-np.inf] + sorted(set(np.concatenate([target, nontarget]).tolist())) + [np.inf]
    fars, frrs = [], []
    for tau in taus:
        far, frr = count_far_frr(target, nontarget, tau)
        fars.append(far)
        frrs.append(frr)
    for i in range(len(taus) - 1):
        d0 = fars[i] - frrs[i]
        d1 = fars[i + 1] - frrs[i + 1]
        if d0 >= 0.0 and d1 < 0.0:
            t = 0.0 if d0 == d1 else d0 / (d0 - d1)
            eer = fars[i] + t * (fars[i + 1] - fars[i])
            lo = taus[i] if np.isfinite(taus[i]) else taus[i + 1]
            hi = taus[i + 1] if np.isfinite(taus[i + 1]) else taus[i]
            tau_eer = lo + t * (hi - lo) if np.isfinite(lo) and np.isfinite(hi) else lo
            return float(eer), float(tau_eer)
    raise AssertionError("no FAR/FRR crossing found")


def double_loop_rms_max(matrix: np.ndarray) -> float:
    """max over rows of the root-mean-square over columns, via loops."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n, m = matrix.shape
    best = -np.inf
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += matrix[i, j] ** 2
        best = max(best, (acc / m) ** 0.5)
    return float(best)


def riemann_mean(xs: np.ndarray, ys: np.ndarray, n_points: int = 1_000_000) -> float:
    """Fine-grid Riemann average of a piecewise-linear curve y(x)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    order = np.argsort(xs)
    xs, ys = xs[order], ys[order]
    grid = np.linspace(xs[0], xs[-1], n_points)
    vals = np.interp(grid, xs, ys)
    return float(vals.mean())
