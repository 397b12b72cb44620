"""B-spline bases on [0, 1] by the Cox-de Boor recursion, plus banded Grams.

The knot layout is the clamped augmentation of a strictly increasing
interior sequence: each boundary knot is repeated ``order`` times, giving
a basis of ``len(interior) + order`` splines that is nonnegative and sums
to one on the interval.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded


class SplineError(ValueError):
    """Bad knot layout or an ill-conditioned Gram matrix."""


def clamped_knots(interior: np.ndarray, order: int) -> np.ndarray:
    """Augmented knot vector 0^order, t_1 < ... < t_l, 1^order."""
    interior = np.asarray(interior, dtype=float)
    if interior.size and (
        np.any(np.diff(interior) <= 0)
        or interior[0] <= 0.0
        or interior[-1] >= 1.0
    ):
        raise SplineError("interior knots must be strictly increasing inside (0, 1)")
    if order < 1:
        raise SplineError("spline order must be at least 1")
    return np.concatenate(
        (np.zeros(order), interior, np.ones(order))
    )


def uniform_knots(cells: int, order: int) -> np.ndarray:
    """Clamped knots with `cells` equal subintervals of [0, 1]."""
    if cells < 1:
        raise SplineError("need at least one cell")
    return clamped_knots(np.arange(1, cells) / cells, order)


def dimension(knots: np.ndarray, order: int) -> int:
    return len(knots) - order


def basis_matrix(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """Dense (len(x), k) matrix of B-spline values by Cox-de Boor.

    Points must lie in [0, 1]; the right endpoint is assigned to the last
    interval so the basis still sums to one there.
    """
    x = np.asarray(x, dtype=float).ravel()
    k = dimension(knots, order)
    n = x.size
    vals = np.zeros((n, k))
    if np.any((x < -1e-12) | (x > 1.0 + 1e-12)):
        raise SplineError("spline basis evaluated outside [0, 1]")
    # order-1 indicators on half-open spans (t_j, t_{j+1}], zero joining the
    # first real span, matching the package-wide cell convention
    idx = np.searchsorted(knots, x, side="left") - 1
    idx = np.clip(idx, order - 1, len(knots) - order - 1)
    b = np.zeros((n, len(knots) - 1))
    b[np.arange(n), idx] = 1.0
    for r in range(2, order + 1):
        nb = np.zeros((n, len(knots) - r))
        for j in range(len(knots) - r):
            left_den = knots[j + r - 1] - knots[j]
            right_den = knots[j + r] - knots[j + 1]
            if left_den > 0:
                nb[:, j] += (x - knots[j]) / left_den * b[:, j]
            if right_den > 0:
                nb[:, j] += (knots[j + r] - x) / right_den * b[:, j + 1]
        b = nb
    vals[:, :] = b[:, :k]
    return vals


class BandedGram:
    """Cholesky of the banded B-spline Gram matrix in L2(G)."""

    def __init__(self, gram_banded_lower: np.ndarray):
        try:
            self._cho = cholesky_banded(gram_banded_lower, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SplineError(f"Gram matrix is not positive definite: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve_banded((self._cho, True), rhs)

    def inverse(self) -> np.ndarray:
        k = self._cho.shape[1]
        return self.solve(np.eye(k))


def gram_banded(basis: np.ndarray, weights: np.ndarray, order: int) -> np.ndarray:
    """Lower banded storage of B^T diag(weights) B (bandwidth order-1)."""
    k = basis.shape[1]
    banded = np.zeros((order, k))
    wb = basis * weights[:, None]
    for d in range(order):
        banded[d, : k - d] = np.einsum("ij,ij->j", wb[:, d:], basis[:, : k - d])
    return banded
