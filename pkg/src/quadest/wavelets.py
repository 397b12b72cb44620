"""Compactly supported wavelet scaling functions via the cascade algorithm.

Only father functions are needed: truncating a wavelet expansion at
resolution level I spans the same space as the level-I scaled translates
of the father function, so the projection kernel collapses to a single
sum over those translates.  On the unit interval the translates are
periodized, which keeps them exactly orthonormal without boundary
corrections.

Scaling-filter coefficients are hard-coded for the 4-tap family (exact
closed form involving sqrt(3)) and the 6- and 8-tap families (published
double-precision values); orthonormality of the filter is verified at
construction time.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from math import comb

SMOOTH_FAMILIES = ("db2", "db3", "db4")


class WaveletError(ValueError):
    """Unsupported family or resolution too coarse for the support."""


def _daubechies(p: int) -> np.ndarray:
    """Length-2p scaling filter via spectral factorization.

    Roots of the autocorrelation polynomial inside the unit circle are
    assigned to the filter, giving the extremal-phase family; coefficients
    come out accurate to a few ulps, unlike published decimal tables.
    """
    acorr = [comb(p - 1 + j, j) for j in range(p)]
    poly = np.array([1.0])
    for _ in range(p):
        poly = np.convolve(poly, [0.5, 0.5])
    if p > 1:
        for y in np.roots(acorr[::-1]):
            zr = np.roots([1.0, 4.0 * y - 2.0, 1.0])
            r = zr[np.argmin(np.abs(zr))]
            poly = np.convolve(poly, np.array([1.0, -r]) / (1.0 - r))
    return np.real(poly) * np.sqrt(2.0)


@lru_cache(maxsize=8)
def scaling_filter(family: str) -> np.ndarray:
    if family not in SMOOTH_FAMILIES:
        raise WaveletError(
            f"unknown wavelet family {family!r}; choose 'haar' or one of {SMOOTH_FAMILIES}"
        )
    h = _daubechies(int(family[2:]))
    if abs(h.sum() - np.sqrt(2.0)) > 1e-12:
        raise WaveletError(f"{family}: filter does not sum to sqrt(2)")
    for m in range(1, len(h) // 2):
        if abs(np.dot(h[: len(h) - 2 * m], h[2 * m :])) > 1e-12:
            raise WaveletError(f"{family}: filter fails orthonormality at shift {m}")
    h.setflags(write=False)
    return h


@lru_cache(maxsize=8)
def scaling_table(family: str, levels: int = 14) -> tuple[np.ndarray, int]:
    """Tabulate the father function on [0, support] at spacing 2^-levels.

    Values are produced by the refinement relation phi(t) =
    sqrt(2) * sum_c h_c phi(2t - c), starting from the exact values at the
    integers (eigenvector of the refinement matrix), so every tabulated
    dyadic value is exact up to floating-point rounding.
    """
    h = scaling_filter(family)
    support = len(h) - 1
    # integer values: eigenvector for eigenvalue 1 of M[a, b] = sqrt(2) h[2a - b]
    interior = support - 1
    mat = np.zeros((interior, interior))
    for a in range(1, support):
        for b in range(1, support):
            c = 2 * a - b
            if 0 <= c <= support:
                mat[a - 1, b - 1] = np.sqrt(2.0) * h[c]
    w, v = np.linalg.eig(mat)
    pick = int(np.argmin(np.abs(w - 1.0)))
    ints = np.real(v[:, pick])
    ints = ints / ints.sum()

    n = support * (1 << levels) + 1
    table = np.zeros(n)
    table[(np.arange(1, support)) << levels] = ints
    step = 1 << levels
    for lev in range(levels):
        half = step >> 1
        # refine: phi at odd multiples of 2^-(lev+1)
        targets = np.arange(half, n, step)
        vals = np.zeros(targets.size)
        for c, hc in enumerate(h):
            src = 2 * targets - c * (1 << levels)
            ok = (src >= 0) & (src < n)
            vals[ok] += np.sqrt(2.0) * hc * table[src[ok]]
        table[targets] = vals
        step = half
    return table, levels


def scaling_values(family: str, t: np.ndarray, levels: int = 14) -> np.ndarray:
    """phi(t), linear interpolation on the dyadic table (exact at dyadics)."""
    table, lev = scaling_table(family, levels)
    support = len(scaling_filter(family)) - 1
    t = np.asarray(t, dtype=float)
    u = t * (1 << lev)
    idx = np.floor(u).astype(np.int64)
    inside = (idx >= 0) & (idx < support * (1 << lev))
    idx_c = np.clip(idx, 0, support * (1 << lev) - 1)
    frac = u - idx
    vals = table[idx_c] * (1.0 - frac) + table[idx_c + 1] * frac
    return np.where(inside, vals, np.where(u == support * (1 << lev), table[-1], 0.0))


def periodized_basis(
    family: str, level: int, x: np.ndarray, levels: int = 14
) -> np.ndarray:
    """Values of the k = 2^level periodized translates at points x in [0, 1].

    Returns an (len(x), k) array.  Requires 2^level >= filter support so
    each translate wraps at most once.
    """
    h = scaling_filter(family)
    support = len(h) - 1
    k = 1 << level
    if k < support:
        raise WaveletError(
            f"level {level} too coarse for {family} (support {support}); need 2^level >= {support}"
        )
    x = np.asarray(x, dtype=float).ravel()
    u = (1 << level) * x
    out = np.zeros((x.size, k))
    base = np.floor(u).astype(np.int64)
    scale = np.sqrt(float(k))
    for s in range(support):
        j = np.mod(base - s, k)
        arg = u - base + s  # (2^I x - j) mod k restricted to [s, s+1)
        vals = scaling_values(family, arg, levels)
        np.add.at(out, (np.arange(x.size), j), scale * vals)
    return out


def periodized_pair_eval(
    family: str, level: int, x1: np.ndarray, x2: np.ndarray, levels: int = 14
) -> np.ndarray:
    """Elementwise kernel sum_j e_j(x1) e_j(x2) for broadcast point arrays."""
    h = scaling_filter(family)
    support = len(h) - 1
    k = 1 << level
    x1, x2 = np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float))
    shape = x1.shape
    u1 = (k * x1).ravel()
    u2 = (k * x2).ravel()
    b1 = np.floor(u1).astype(np.int64)
    b2 = np.floor(u2).astype(np.int64)
    out = np.zeros(u1.size)
    # translates j contributing at x: j = floor(u) - s (mod k), s = 0..support-1
    for s1 in range(support):
        v1 = scaling_values(family, u1 - b1 + s1, levels)
        j1 = np.mod(b1 - s1, k)
        for s2 in range(support):
            j2 = np.mod(b2 - s2, k)
            match = j1 == j2
            if not np.any(match):
                continue
            v2 = scaling_values(family, u2[match] - b2[match] + s2, levels)
            out[match] += v1[match] * v2
    return (float(k) * out).reshape(shape)
