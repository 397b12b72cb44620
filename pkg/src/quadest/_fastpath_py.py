"""NumPy implementations of the pair-sum primitives.

Signature-compatible with the compiled extension ``quadest._fastpath``;
``quadest._backend`` picks whichever is importable.  All reductions use
NumPy sums (pairwise accumulation), so results are deterministic.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def pair_sum_dense(kmat: np.ndarray, y: np.ndarray) -> float:
    """Sum of K[r,s]*y[r]*y[s] over ordered pairs r != s."""
    kmat = np.asarray(kmat, dtype=float)
    y = np.asarray(y, dtype=float)
    total = float(y @ kmat @ y)
    diag = float(np.dot(np.diagonal(kmat), y * y))
    return total - diag


def asym_pair_sum_dense(kmat: np.ndarray, left: np.ndarray, right: np.ndarray) -> float:
    """Sum of K[r,s]*left[r]*right[s] over ordered pairs r != s."""
    kmat = np.asarray(kmat, dtype=float)
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    total = float(left @ kmat @ right)
    diag = float(np.dot(np.diagonal(kmat), left * right))
    return total - diag


def cell_sums(idx: np.ndarray, y: np.ndarray, ncells: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell sums S_j = sum(y), Q_j = sum(y^2) for assigned cell indices."""
    idx = np.asarray(idx, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    s = np.bincount(idx, weights=y, minlength=ncells)
    q = np.bincount(idx, weights=y * y, minlength=ncells)
    return s, q


def cell_pair_sum(
    idx: np.ndarray, y: np.ndarray, values: np.ndarray
) -> float:
    """Sum over pairs r != s in the same cell of values[cell]*y[r]*y[s]."""
    s, q = cell_sums(idx, y, len(values))
    return float(np.dot(np.asarray(values, dtype=float), s * s - q))


def trig_pair_stats(
    x: np.ndarray, y: np.ndarray, k: int, omega: float
) -> tuple[float, float]:
    """Power of weighted trigonometric sums for the Dirichlet identity.

    Returns (sum over |j| <= k of |sum_r y_r e^(i j omega x_r)|^2, sum_r y_r^2).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    j = np.arange(k + 1)
    phase = np.exp(1j * omega * np.outer(x, j))
    coeffs = y @ phase
    power = np.abs(coeffs) ** 2
    # negative frequencies mirror the positive ones for real y
    total = float(power[0] + 2.0 * power[1:].sum())
    return total, float(np.dot(y, y))
