"""Symmetric kernels on the design space and their operator calculus.

Five families are provided: dyadic indicator (Haar) projections, tensor
wavelet projections (exact Haar family or smooth Daubechies families via
the cascade algorithm), Dirichlet (Fourier) projections, convolution
kernels, and spline Gram-inverse projections.  Two wrappers modify any
kernel: division by sqrt(g(x1) g(x2)) turns a projection for a dominating
measure into the projection for the weighted measure, and twicing
K + K* - K K* makes the approximation bias of a non-orthogonal kernel
quadratic.

Every kernel evaluates pointwise through :meth:`Kernel.eval`; operator
applications, squared norms, and diagonal-block integrals run through
quadrature on a :class:`~quadest.measures.MeasureModel` grid, with exact
closed forms where the kernel is piecewise constant and FFT shortcuts for
the Dirichlet family.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bsplines, wavelets
from ._backend import cell_pair_sum, trig_pair_stats
from .measures import Domain, MeasureModel, centered_circle, unit_cube, unit_interval

_EVAL_BLOCK = 1 << 22
_DIRICHLET_EPS = 1e-8


class KernelError(ValueError):
    """Invalid kernel construction or degenerate inputs."""


@dataclass(frozen=True)
class CellInfo:
    """Diagonal cell structure: K(x, y) = diag[c] when c(x) = c(y) = c, else 0."""

    edges: np.ndarray
    diag: np.ndarray

    @property
    def count(self) -> int:
        return len(self.diag)

    def index(self, x: np.ndarray) -> np.ndarray:
        return cell_index_from_edges(self.edges, x)


def cell_index_from_edges(edges: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Half-open (a, b] cell index; the left endpoint joins the first cell."""
    idx = np.searchsorted(edges[1:-1], np.asarray(x, dtype=float), side="left")
    return idx.astype(np.int64)


@dataclass
class NormEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


class Kernel:
    """Base class: symmetric measurable kernel on domain x domain."""

    kind: str = "abstract"
    twiced: bool = False

    def __init__(self, domain: Domain):
        self.domain = domain

    # -- evaluation -------------------------------------------------------

    def _eval_elem(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eval(self, x1, x2):
        """Kernel value, broadcasting over point arrays."""
        d = self.domain.ndim
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        self.domain.check(x1)
        self.domain.check(x2)
        if d == 1:
            b1, b2 = np.broadcast_arrays(x1, x2)
        else:
            b1, b2 = np.broadcast_arrays(x1, x2)
            if b1.shape[-1] != d:
                raise KernelError(f"points must have trailing dimension {d}")
        out = self._eval_elem(b1, b2)
        if np.isscalar(x1) and np.isscalar(x2):
            return float(out)
        return out

    def __call__(self, x1, x2):
        return self.eval(x1, x2)

    def pair_matrix(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Dense matrix K(x1[i], x2[j])."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if self.domain.ndim == 1:
            return self.eval(x1[:, None], x2[None, :])
        return self.eval(x1[:, None, :], x2[None, :, :])

    # -- capabilities (None = not available, generic path used) -----------

    def pair_sum(self, x: np.ndarray, y: np.ndarray) -> float | None:
        """Sum of K(x_r, x_s) y_r y_s over ordered pairs r != s, or None."""
        return None

    def asym_pair_sum(
        self, x: np.ndarray, left: np.ndarray, right: np.ndarray
    ) -> float | None:
        """Sum of K(x_r, x_s) left_r right_s over ordered pairs, or None."""
        return None

    def cell_info(self) -> CellInfo | None:
        return None

    def basis_at(self, x: np.ndarray) -> np.ndarray | None:
        """(m, k) basis values with K(u, v) = basis(u) @ A @ basis(v).T."""
        return None

    def coeff_matrix(self) -> np.ndarray | None:
        """The A matrix pairing with :meth:`basis_at` (None = identity)."""
        return None

    def gram_factor(self, G: MeasureModel) -> np.ndarray | None:
        """Basis values on G's grid, when a finite basis factorization exists."""
        x = G.nodes if self.domain.ndim == 1 else G.points
        return self.basis_at(x)

    def quad_spacing_hint(self) -> float | None:
        """Max grid spacing that resolves |K|^q for quadrature, if K oscillates."""
        return None

    # -- quadrature operator calculus --------------------------------------

    def grid_matrix(self, G: MeasureModel) -> np.ndarray:
        """Dense kernel matrix on the quadrature grid (memory permitting)."""
        n = G.points.shape[0]
        if n * n > (1 << 28):
            raise KernelError(f"grid matrix {n}x{n} too large; use blocked paths")
        pts = G.nodes if self.domain.ndim == 1 else G.points
        return self.pair_matrix(pts, pts)

    def apply_grid(self, G: MeasureModel, fgrid: np.ndarray) -> np.ndarray:
        """The operator f -> integral of f(v) K(., v) dG(v) on the grid."""
        q = np.asarray(fgrid, dtype=float).ravel() * G.gweights
        B = self.gram_factor(G)
        if B is not None:
            coeffs = B.T @ q
            A = self.coeff_matrix()
            if A is not None:
                coeffs = A @ coeffs
            return B @ coeffs
        return self._blocked_apply(G, q, G.nodes if self.domain.ndim == 1 else G.points)

    def apply_at(self, G: MeasureModel, fgrid: np.ndarray, x: np.ndarray) -> np.ndarray:
        """The same operator image evaluated at arbitrary points."""
        q = np.asarray(fgrid, dtype=float).ravel() * G.gweights
        Bx = self.basis_at(np.asarray(x, dtype=float))
        if Bx is not None:
            B = self.gram_factor(G)
            coeffs = B.T @ q
            A = self.coeff_matrix()
            if A is not None:
                coeffs = A @ coeffs
            return Bx @ coeffs
        return self._blocked_apply(G, q, np.asarray(x, dtype=float))

    def _blocked_apply(
        self, G: MeasureModel, q: np.ndarray, targets: np.ndarray
    ) -> np.ndarray:
        src = G.nodes if self.domain.ndim == 1 else G.points
        n_src = src.shape[0]
        m = targets.shape[0]
        out = np.empty(m)
        rows = max(1, _EVAL_BLOCK // max(n_src, 1))
        for i in range(0, m, rows):
            blk = targets[i : i + rows]
            out[i : i + rows] = self.pair_matrix(blk, src) @ q
        return out

    def weighted_sq_norm(self, G: MeasureModel, weight: np.ndarray | None = None) -> float:
        """Double integral of K^2 (w x w) d(G x G) by grid contraction."""
        w = np.ones(G.points.shape[0]) if weight is None else np.asarray(weight).ravel()
        info = self.cell_info()
        if info is not None and self.domain.ndim == 1:
            masses = G.weighted_cell_integrals(w, info.edges)
            return float(np.dot(info.diag**2, masses**2))
        B = self.gram_factor(G)
        if B is not None:
            M = B.T @ (B * (w * G.gweights)[:, None])
            A = self.coeff_matrix()
            if A is not None:
                M = A @ M
            return float(np.einsum("ij,ji->", M, M))
        return self._blocked_sq_norm(G, w)

    def _blocked_sq_norm(self, G: MeasureModel, w: np.ndarray) -> float:
        pts = G.nodes if self.domain.ndim == 1 else G.points
        q = w * G.gweights
        n = pts.shape[0]
        rows = max(1, _EVAL_BLOCK // n)
        total = 0.0
        for i in range(0, n, rows):
            kblk = self.pair_matrix(pts[i : i + rows], pts)
            total += float(q[i : i + rows] @ (kblk * kblk) @ q)
        return total

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        raise NotImplementedError

    def _base_json(self) -> dict:
        return {"kind": self.kind, "domain": self.domain.to_json()}


# ---------------------------------------------------------------------------
# restricted-block quadrature shared by the condition checker
# ---------------------------------------------------------------------------


def local_grid(
    kernel: Kernel, G: MeasureModel, a: float, b: float, min_nodes: int = 16
) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint nodes and G-weights on (a, b] fine enough for the kernel."""
    hint = kernel.quad_spacing_hint()
    spacing = min(G.step[0], hint) if hint else G.step[0]
    m = int(np.clip(np.ceil((b - a) / spacing), min_nodes, 1 << 20))
    h = (b - a) / m
    nodes = a + (np.arange(m) + 0.5) * h
    dens = G.grid_lookup(G.density, nodes)
    return nodes, dens * h


def cell_restricted_integral(
    kernel: Kernel,
    G: MeasureModel,
    a: float,
    b: float,
    weight: np.ndarray,
    power: float = 2.0,
) -> float:
    """Integral of |K|^power (w x w) over the block (a, b] x (a, b] w.r.t. G x G.

    power=1 integrates the signed kernel itself.
    """
    info = kernel.cell_info()
    if info is not None and G.ndim == 1:
        edges = _segment_edges(info.edges, a, b)
        if edges is None:
            return 0.0
        masses = G.weighted_cell_integrals(weight, edges)
        mids = 0.5 * (edges[:-1] + edges[1:])
        vals = info.diag[info.index(mids)]
        vals = vals if power == 1.0 else np.abs(vals) ** power
        return float(np.dot(vals, masses**2))
    nodes, gw = local_grid(kernel, G, a, b)
    q = G.grid_lookup(weight, nodes) * gw
    n = nodes.shape[0]
    rows = max(1, _EVAL_BLOCK // n)
    total = 0.0
    for i in range(0, n, rows):
        kblk = kernel.pair_matrix(nodes[i : i + rows], nodes)
        kblk = kblk if power == 1.0 else np.abs(kblk) ** power
        total += float(q[i : i + rows] @ kblk @ q)
    return total


def _segment_edges(cell_edges: np.ndarray, a: float, b: float) -> np.ndarray | None:
    inner = cell_edges[(cell_edges > a) & (cell_edges < b)]
    if b <= a:
        return None
    return np.concatenate(([a], inner, [b]))


# ---------------------------------------------------------------------------
# kernel families
# ---------------------------------------------------------------------------


class ConstantKernel(Kernel):
    """K identically equal to a constant; useful as a degenerate reference."""

    kind = "constant"

    def __init__(self, value: float, domain: Domain | None = None):
        super().__init__(domain or unit_interval())
        self.value = float(value)

    def _eval_elem(self, x1, x2):
        base = x1 if self.domain.ndim == 1 else x1[..., 0]
        return np.full_like(np.asarray(base, dtype=float), self.value)

    def pair_sum(self, x, y):
        y = np.asarray(y, dtype=float)
        s = float(y.sum())
        return self.value * (s * s - float(np.dot(y, y)))

    def asym_pair_sum(self, x, left, right):
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        return self.value * (
            float(left.sum()) * float(right.sum()) - float(np.dot(left, right))
        )

    def cell_info(self):
        if self.domain.ndim != 1:
            return None
        lo, hi = self.domain.lo[0], self.domain.hi[0]
        return CellInfo(np.array([lo, hi]), np.array([self.value]))

    def apply_grid(self, G, fgrid):
        return np.full(G.points.shape[0], self.value * G.integrate(fgrid))

    def apply_at(self, G, fgrid, x):
        return np.full(np.asarray(x).shape[0], self.value * G.integrate(fgrid))

    def weighted_sq_norm(self, G, weight=None):
        w = np.ones(G.points.shape[0]) if weight is None else np.asarray(weight).ravel()
        return self.value**2 * G.integrate(w) ** 2

    def to_json(self):
        return {**self._base_json(), "value": self.value}


class HaarKernel(Kernel):
    """Dyadic indicator projection: k * sum_j A_j 1_cell_j(x1) 1_cell_j(x2)."""

    kind = "haar"

    def __init__(self, level: int, coeffs: np.ndarray | None = None):
        super().__init__(unit_interval())
        if level < 0:
            raise KernelError("Haar level must be nonnegative")
        self.level = int(level)
        self.k = 1 << self.level
        if coeffs is None:
            coeffs = np.ones(self.k)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.k,):
            raise KernelError(f"need {self.k} diagonal coefficients, got {coeffs.shape}")
        self.coeffs = coeffs
        self.edges = np.arange(self.k + 1) / self.k
        self._diag = self.k * self.coeffs

    def cell_of(self, x: np.ndarray) -> np.ndarray:
        idx = np.ceil(np.asarray(x, dtype=float) * self.k).astype(np.int64) - 1
        return np.clip(idx, 0, self.k - 1)

    def _eval_elem(self, x1, x2):
        c1 = self.cell_of(x1)
        c2 = self.cell_of(x2)
        return np.where(c1 == c2, self._diag[c1], 0.0)

    def pair_sum(self, x, y):
        return cell_pair_sum(self.cell_of(x), np.asarray(y, dtype=float), self._diag)

    def asym_pair_sum(self, x, left, right):
        idx = self.cell_of(x)
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        sl = np.bincount(idx, weights=left, minlength=self.k)
        sr = np.bincount(idx, weights=right, minlength=self.k)
        slr = np.bincount(idx, weights=left * right, minlength=self.k)
        return float(np.dot(self._diag, sl * sr - slr))

    def cell_info(self):
        return CellInfo(self.edges, self._diag)

    def apply_grid(self, G, fgrid):
        masses = G.weighted_cell_integrals(np.asarray(fgrid, dtype=float), self.edges)
        return (self._diag * masses)[self.cell_of(G.nodes)]

    def apply_at(self, G, fgrid, x):
        masses = G.weighted_cell_integrals(np.asarray(fgrid, dtype=float), self.edges)
        return (self._diag * masses)[self.cell_of(np.asarray(x, dtype=float))]

    def to_json(self):
        return {**self._base_json(), "level": self.level, "coeffs": self.coeffs}


def haar_kernel(level: int, G: MeasureModel) -> HaarKernel:
    """L2(G)-orthogonal projection onto dyadic indicators at 2^level cells."""
    k = 1 << level
    edges = np.arange(k + 1) / k
    probs = G.weighted_cell_integrals(np.ones(G.points.shape[0]), edges)
    if np.any(probs <= 0):
        j = int(np.argmin(probs))
        raise KernelError(f"degenerate measure: G(cell {j}) = {probs[j]:.3g} <= 0")
    return HaarKernel(level, 1.0 / (k * probs))


class HaarSeriesKernel(Kernel):
    """Projection onto the first k elements of the ordered Haar basis.

    For k = 2^L this is the level-L indicator projection; intermediate k
    adds the first k - 2^L wavelets of level L, which keeps the kernel
    piecewise constant on the level-(L+1) dyadic cells.  Unlike
    :class:`HaarKernel` the dimension may be any positive integer, which
    the rate experiments need for smooth size schedules.
    """

    kind = "haar_series"

    def __init__(self, k: int):
        super().__init__(unit_interval())
        if k < 1:
            raise KernelError("dimension must be positive")
        self.k = int(k)
        self.level = int(k - 1).bit_length() - 1 if k > 1 else 0
        if (1 << self.level) > k or k >= (1 << (self.level + 1)):
            self.level = int(np.floor(np.log2(k)))
        self.n_wavelets = self.k - (1 << self.level)
        self.fine = 1 << (self.level + 1)
        self.edges = np.arange(self.fine + 1.0) / self.fine

    def fine_cell(self, x: np.ndarray) -> np.ndarray:
        idx = np.ceil(np.asarray(x, dtype=float) * self.fine).astype(np.int64) - 1
        return np.clip(idx, 0, self.fine - 1)

    def _eval_elem(self, x1, x2):
        c1 = self.fine_cell(x1)
        c2 = self.fine_cell(x2)
        p1, p2 = c1 >> 1, c2 >> 1
        scale = float(1 << self.level)
        sign = np.where((c1 & 1) == (c2 & 1), 1.0, -1.0)
        has_wavelet = p1 < self.n_wavelets
        return np.where(
            p1 == p2, scale * (1.0 + np.where(has_wavelet, sign, 0.0)), 0.0
        )

    def pair_sum(self, x, y):
        y = np.asarray(y, dtype=float)
        idx = self.fine_cell(x)
        s = np.bincount(idx, weights=y, minlength=self.fine)
        q = np.bincount(idx, weights=y * y, minlength=self.fine)
        s_even, s_odd = s[0::2], s[1::2]
        qp = q[0::2] + q[1::2]
        scale = float(1 << self.level)
        total = float(np.dot(np.ones_like(qp), ((s_even + s_odd) ** 2 - qp))) * scale
        r = self.n_wavelets
        if r:
            total += scale * float(((s_even[:r] - s_odd[:r]) ** 2 - qp[:r]).sum())
        return total

    def weighted_sq_norm(self, G, weight=None):
        w = np.ones(G.points.shape[0]) if weight is None else np.asarray(weight).ravel()
        masses = G.weighted_cell_integrals(w, self.edges)
        m_even, m_odd = masses[0::2], masses[1::2]
        scale = float(1 << self.level)
        t = np.zeros(1 << self.level)
        t[: self.n_wavelets] = 1.0
        k_same = scale * (1.0 + t)
        k_cross = scale * (1.0 - t)
        return float(
            np.dot(k_same**2, m_even**2 + m_odd**2) + 2.0 * np.dot(k_cross**2, m_even * m_odd)
        )

    def apply_grid(self, G, fgrid):
        return self.apply_at(G, fgrid, G.nodes)

    def apply_at(self, G, fgrid, x):
        masses = G.weighted_cell_integrals(np.asarray(fgrid, dtype=float), self.edges)
        m_even, m_odd = masses[0::2], masses[1::2]
        scale = float(1 << self.level)
        t = np.zeros(1 << self.level)
        t[: self.n_wavelets] = 1.0
        # value on even fine cell: scale*((1+t) m_even + (1-t) m_odd), odd symmetric
        even_val = scale * ((1.0 + t) * m_even + (1.0 - t) * m_odd)
        odd_val = scale * ((1.0 - t) * m_even + (1.0 + t) * m_odd)
        c = self.fine_cell(np.asarray(x, dtype=float))
        return np.where((c & 1) == 0, even_val[c >> 1], odd_val[c >> 1])

    def to_json(self):
        return {**self._base_json(), "k": self.k}


class TensorWaveletKernel(Kernel):
    """Level-I wavelet projection on [0,1]^d in collapsed father-function form."""

    kind = "wavelet"

    def __init__(self, level: int, dim: int = 1, family: str = "haar"):
        super().__init__(unit_cube(dim) if dim > 1 else unit_interval())
        if level < 0:
            raise KernelError("wavelet level must be nonnegative")
        self.level = int(level)
        self.dim = int(dim)
        self.family = family
        self.k_per_axis = 1 << self.level
        self.k = self.k_per_axis**self.dim
        if family != "haar":
            wavelets.scaling_filter(family)  # validates family and support
            if self.k_per_axis < len(wavelets.scaling_filter(family)) - 1:
                raise wavelets.WaveletError(
                    f"{family} needs 2^level >= filter support"
                )

    def _axis_eval(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        if self.family == "haar":
            k = self.k_per_axis
            c1 = np.clip(np.ceil(x1 * k).astype(np.int64) - 1, 0, k - 1)
            c2 = np.clip(np.ceil(x2 * k).astype(np.int64) - 1, 0, k - 1)
            return np.where(c1 == c2, float(k), 0.0)
        return wavelets.periodized_pair_eval(self.family, self.level, x1, x2)

    def _eval_elem(self, x1, x2):
        if self.dim == 1:
            return self._axis_eval(x1, x2)
        out = self._axis_eval(x1[..., 0], x2[..., 0])
        for a in range(1, self.dim):
            out = out * self._axis_eval(x1[..., a], x2[..., a])
        return out

    def cell_info(self):
        if self.family != "haar" or self.dim != 1:
            return None
        k = self.k_per_axis
        return CellInfo(np.arange(k + 1) / k, np.full(k, float(k)))

    def pair_sum(self, x, y):
        if self.family != "haar":
            return None
        x = np.asarray(x, dtype=float)
        k = self.k_per_axis
        if self.dim == 1:
            idx = np.clip(np.ceil(x * k).astype(np.int64) - 1, 0, k - 1)
        else:
            per_axis = np.clip(np.ceil(x * k).astype(np.int64) - 1, 0, k - 1)
            idx = np.zeros(x.shape[0], dtype=np.int64)
            for a in range(self.dim):
                idx = idx * k + per_axis[:, a]
        return cell_pair_sum(idx, np.asarray(y, dtype=float), np.full(self.k, float(self.k)))

    def basis_at(self, x):
        if self.family == "haar":
            x = np.asarray(x, dtype=float)
            k = self.k_per_axis
            if self.dim == 1:
                idx = np.clip(np.ceil(x * k).astype(np.int64) - 1, 0, k - 1)
                out = np.zeros((x.shape[0], k))
                out[np.arange(x.shape[0]), idx] = np.sqrt(float(k))
                return out
            return None
        if self.dim == 1:
            return wavelets.periodized_basis(self.family, self.level, np.asarray(x, float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rows = wavelets.periodized_basis(self.family, self.level, x[:, 0])
        for a in range(1, self.dim):
            nxt = wavelets.periodized_basis(self.family, self.level, x[:, a])
            rows = np.einsum("ij,il->ijl", rows, nxt).reshape(x.shape[0], -1)
        return rows

    def quad_spacing_hint(self):
        if self.family == "haar":
            return None
        return 1.0 / (8 * self.k_per_axis)

    def to_json(self):
        return {
            **self._base_json(),
            "level": self.level,
            "dim": self.dim,
            "family": self.family,
        }


def wavelet_kernel(level: int, dim: int = 1, family: str = "haar") -> TensorWaveletKernel:
    """Projection kernel of the wavelet expansion truncated at `level`."""
    return TensorWaveletKernel(level, dim, family)


class FourierKernel(Kernel):
    """Dirichlet projection kernel of a truncated Fourier series.

    The classic form lives on [-pi, pi] with the exponentials orthonormal
    for Lebesgue measure; `domain="unit"` rescales to period 1 on [0, 1],
    where the basis is orthonormal for the uniform probability measure.
    Projection dimension is 2k + 1.
    """

    kind = "fourier"

    def __init__(self, k: int, domain: str = "circle"):
        if k < 0:
            raise KernelError("Fourier order must be nonnegative")
        if domain == "circle":
            super().__init__(centered_circle())
        elif domain == "unit":
            super().__init__(unit_interval())
        else:
            raise KernelError("domain must be 'circle' or 'unit'")
        self.k = int(k)
        self.dim_total = 2 * self.k + 1
        self.period = float(self.domain.widths[0])
        self.omega = 2.0 * np.pi / self.period
        self._domain_tag = domain

    def _eval_elem(self, x1, x2):
        u = x1 - x2
        half = np.sin(0.5 * self.omega * u)
        num = np.sin((self.k + 0.5) * self.omega * u)
        diag = np.abs(half) < _DIRICHLET_EPS
        safe = np.where(diag, 1.0, half)
        return np.where(diag, self.dim_total / self.period, num / (self.period * safe))

    def pair_sum(self, x, y):
        power, sumy2 = trig_pair_stats(
            np.asarray(x, dtype=float), np.asarray(y, dtype=float), self.k, self.omega
        )
        return (power - self.dim_total * sumy2) / self.period

    def basis_at(self, x):
        x = np.asarray(x, dtype=float).ravel()
        cols = [np.full(x.size, 1.0 / np.sqrt(self.period))]
        root = np.sqrt(2.0 / self.period)
        for j in range(1, self.k + 1):
            cols.append(root * np.cos(j * self.omega * x))
            cols.append(root * np.sin(j * self.omega * x))
        return np.stack(cols, axis=1)

    def quad_spacing_hint(self):
        return self.period / (8.0 * self.dim_total)

    def _fourier_weights(self, G: MeasureModel, w: np.ndarray) -> np.ndarray:
        """|c_d| for d = 0..2k of the measure w dG via an exactly aligned FFT."""
        if abs(float(G.domain.widths[0]) - self.period) > 1e-12:
            raise KernelError("measure domain does not match the kernel period")
        q = w * G.gweights
        n = q.size
        need = 4 * self.dim_total
        if n < need:
            factor = int(np.ceil(need / n))
            q = np.repeat(q / factor, factor)
            n = q.size
        spec = np.fft.fft(q)
        d = np.arange(2 * self.k + 1)
        return np.abs(spec[d % n])

    def weighted_sq_norm(self, G, weight=None):
        w = np.ones(G.points.shape[0]) if weight is None else np.asarray(weight).ravel()
        c = self._fourier_weights(G, w)
        counts = self.dim_total - np.arange(2 * self.k + 1)
        counts = 2.0 * counts
        counts[0] = self.dim_total
        return float(np.dot(counts, c**2)) / self.period**2

    def apply_grid(self, G, fgrid):
        n = G.points.shape[0]
        if n <= 2 * self.k:
            raise KernelError(
                f"grid of {n} nodes cannot carry Fourier order {self.k}; refine the grid"
            )
        if abs(float(G.domain.widths[0]) - self.period) > 1e-12:
            raise KernelError("measure domain does not match the kernel period")
        q = np.asarray(fgrid, dtype=float).ravel() * G.gweights
        spec = np.fft.fft(q)
        mask = np.zeros(n)
        mask[: self.k + 1] = 1.0
        mask[n - self.k :] = 1.0
        return np.real(np.fft.ifft(spec * mask)) * n / self.period

    def to_json(self):
        return {**self._base_json(), "k": self.k, "variant": self._domain_tag}


_MOTHERS = {
    "box": lambda u: np.where(np.abs(u) <= 0.5, 1.0, 0.0),
    "gaussian": lambda u: np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi),
}


class ConvolutionKernel(Kernel):
    """K(x1, x2) = phi((x1 - x2) / sigma) / sigma for a bounded integrable phi."""

    kind = "convolution"

    def __init__(self, sigma: float, mother: str = "box", domain: Domain | None = None):
        super().__init__(domain or unit_interval())
        if sigma <= 0:
            raise KernelError("bandwidth must be positive")
        if mother not in _MOTHERS:
            raise KernelError(f"unknown mother function {mother!r}")
        self.sigma = float(sigma)
        self.mother = mother

    def _eval_elem(self, x1, x2):
        return _MOTHERS[self.mother]((x1 - x2) / self.sigma) / self.sigma

    def quad_spacing_hint(self):
        return self.sigma / 16.0

    def to_json(self):
        return {**self._base_json(), "sigma": self.sigma, "mother": self.mother}


class SplineGramKernel(Kernel):
    """L2(G)-orthogonal projection onto a Schoenberg spline space.

    The kernel is sum_{i,j} A_{i,j} N_i(x1) N_j(x2) with N the B-spline
    basis of the given order on the clamped knots and A the inverse of the
    banded Gram matrix of the basis in L2(G).
    """

    kind = "spline_gram"

    def __init__(self, knots: np.ndarray, order: int, G: MeasureModel):
        super().__init__(unit_interval())
        self.order = int(order)
        self.knots = np.asarray(knots, dtype=float)
        self.k = bsplines.dimension(self.knots, self.order)
        if self.k < 1:
            raise KernelError("spline space is empty")
        bgrid = bsplines.basis_matrix(G.nodes, self.knots, self.order)
        banded = bsplines.gram_banded(bgrid, G.gweights, self.order)
        try:
            self.coeffs = bsplines.BandedGram(banded).inverse()
        except bsplines.SplineError as exc:
            raise KernelError(str(exc)) from exc
        self.coeffs = 0.5 * (self.coeffs + self.coeffs.T)

    def basis_at(self, x):
        return bsplines.basis_matrix(np.asarray(x, dtype=float), self.knots, self.order)

    def coeff_matrix(self):
        return self.coeffs

    def _eval_elem(self, x1, x2):
        shape = x1.shape
        b1 = self.basis_at(x1.ravel())
        b2 = self.basis_at(x2.ravel())
        return np.einsum("ij,jk,ik->i", b1, self.coeffs, b2).reshape(shape)

    def quad_spacing_hint(self):
        interior = self.knots[self.order - 1 : len(self.knots) - self.order + 1]
        return float(np.diff(np.unique(interior)).min()) / 8.0

    def to_json(self):
        return {
            **self._base_json(),
            "order": self.order,
            "knots": self.knots,
            "coeffs": self.coeffs,
        }


def spline_gram_kernel(knots: np.ndarray, order: int, G: MeasureModel) -> SplineGramKernel:
    return SplineGramKernel(knots, order, G)


class WeightedKernel(Kernel):
    """K(x1, x2) / sqrt(g(x1) g(x2)): the projection for the g-weighted measure."""

    kind = "weighted"

    def __init__(self, base: Kernel, weight, G: MeasureModel):
        super().__init__(base.domain)
        self.base = base
        self.measure = G
        wgrid = G._tabulate(weight, default=1.0)
        if np.any(wgrid <= 0) or not np.all(np.isfinite(wgrid)):
            raise KernelError("weight density must be positive and finite on the grid")
        ratio = float(wgrid.max() / wgrid.min())
        if ratio > 1e12:
            raise KernelError("weight density not bounded away from 0 and infinity")
        self.weight_grid = wgrid

    def weight_at(self, x: np.ndarray) -> np.ndarray:
        return self.measure.grid_lookup(self.weight_grid, x)

    def _eval_elem(self, x1, x2):
        w1 = self.weight_at(x1)
        w2 = self.weight_at(x2)
        return self.base._eval_elem(x1, x2) / np.sqrt(w1 * w2)

    def pair_sum(self, x, y):
        scaled = np.asarray(y, dtype=float) / np.sqrt(self.weight_at(np.asarray(x, float)))
        return self.base.pair_sum(x, scaled)

    def asym_pair_sum(self, x, left, right):
        root = np.sqrt(self.weight_at(np.asarray(x, float)))
        return self.base.asym_pair_sum(
            x, np.asarray(left, dtype=float) / root, np.asarray(right, dtype=float) / root
        )

    def basis_at(self, x):
        b = self.base.basis_at(x)
        if b is None:
            return None
        return b / np.sqrt(self.weight_at(np.asarray(x, float)))[:, None]

    def coeff_matrix(self):
        return self.base.coeff_matrix()

    def gram_factor(self, G):
        b = self.base.gram_factor(G)
        if b is None:
            return None
        return b / np.sqrt(self.measure.grid_lookup(self.weight_grid, G.nodes))[:, None]

    def weighted_sq_norm(self, G, weight=None):
        w = np.ones(G.points.shape[0]) if weight is None else np.asarray(weight).ravel()
        wker = self.measure.grid_lookup(self.weight_grid, G.nodes if G.ndim == 1 else G.points)
        return self.base.weighted_sq_norm(G, w / wker)

    def apply_grid(self, G, fgrid):
        wker = self.measure.grid_lookup(self.weight_grid, G.nodes)
        inner = self.base.apply_grid(G, np.asarray(fgrid, dtype=float) / np.sqrt(wker))
        return inner / np.sqrt(wker)

    def apply_at(self, G, fgrid, x):
        wker = self.measure.grid_lookup(self.weight_grid, G.nodes)
        inner = self.base.apply_at(G, np.asarray(fgrid, dtype=float) / np.sqrt(wker), x)
        return inner / np.sqrt(self.weight_at(np.asarray(x, float)))

    def quad_spacing_hint(self):
        return self.base.quad_spacing_hint()

    def cell_info(self):
        base_info = self.base.cell_info()
        if base_info is None:
            return None
        # stays cellwise only when the weight is constant on each base cell
        edges = base_info.edges
        node_cells = base_info.index(self.measure.nodes)
        k = base_info.count
        wmax = np.full(k, -np.inf)
        wmin = np.full(k, np.inf)
        np.maximum.at(wmax, node_cells, self.weight_grid)
        np.minimum.at(wmin, node_cells, self.weight_grid)
        seen = wmax > -np.inf
        if not np.all(seen) or np.any(wmax[seen] - wmin[seen] > 1e-12 * np.abs(wmax[seen])):
            return None
        return CellInfo(edges, base_info.diag / wmax)

    def to_json(self):
        return {
            **self._base_json(),
            "base": self.base.to_json(),
            "weight": self.weight_grid,
            "measure": self.measure.to_json(),
        }


def weighted(kernel: Kernel, weight, G: MeasureModel) -> WeightedKernel:
    return WeightedKernel(kernel, weight, G)


class TwicedKernel(Kernel):
    """K(x1,x2) + K(x2,x1) - integral of K(x1,z) K(x2,z) dG(z)."""

    kind = "twiced"
    twiced = True

    def __init__(self, base: Kernel, G: MeasureModel):
        super().__init__(base.domain)
        self.base = base
        self.measure = G

    def _eval_elem(self, x1, x2):
        shape = x1.shape
        f1 = x1.ravel() if self.domain.ndim == 1 else x1.reshape(-1, self.domain.ndim)
        f2 = x2.ravel() if self.domain.ndim == 1 else x2.reshape(-1, self.domain.ndim)
        direct = self.base._eval_elem(x1, x2) + self.base._eval_elem(x2, x1)
        src = self.measure.nodes if self.domain.ndim == 1 else self.measure.points
        m = f1.shape[0]
        cross = np.empty(m)
        rows = max(1, _EVAL_BLOCK // src.shape[0])
        for i in range(0, m, rows):
            k1 = self.base.pair_matrix(f1[i : i + rows], src)
            k2 = self.base.pair_matrix(f2[i : i + rows], src)
            cross[i : i + rows] = np.einsum(
                "ij,ij->i", k1 * self.measure.gweights, k2
            )
        return direct.reshape(shape) - cross.reshape(shape)

    def _factor(self, G: MeasureModel):
        B = self.base.gram_factor(G)
        if B is None:
            return None
        A = self.base.coeff_matrix()
        if A is None:
            A = np.eye(B.shape[1])
        M = B.T @ (B * G.gweights[:, None])
        return B, 2.0 * A - A @ M @ A

    def gram_factor(self, G):
        f = self._factor(G)
        return None if f is None else f[0]

    def coeff_matrix(self):
        # only meaningful jointly with gram_factor; recomputed there
        return None

    def apply_grid(self, G, fgrid):
        q = np.asarray(fgrid, dtype=float)
        once = self.base.apply_grid(G, q)
        return 2.0 * once - self.base.apply_grid(G, once)

    def weighted_sq_norm(self, G, weight=None):
        w = np.ones(G.points.shape[0]) if weight is None else np.asarray(weight).ravel()
        f = self._factor(G)
        if f is not None:
            B, A_tw = f
            M = B.T @ (B * (w * G.gweights)[:, None])
            S = A_tw @ M
            return float(np.einsum("ij,ji->", S, S))
        kmat = self.base.grid_matrix(G)
        tw = kmat + kmat.T - (kmat * G.gweights) @ kmat.T
        q = w * G.gweights
        return float(q @ (tw * tw) @ q)

    def quad_spacing_hint(self):
        return self.base.quad_spacing_hint()

    def to_json(self):
        return {
            **self._base_json(),
            "base": self.base.to_json(),
            "measure": self.measure.to_json(),
        }


def twice(kernel: Kernel, G: MeasureModel) -> TwicedKernel:
    return TwicedKernel(kernel, G)


# ---------------------------------------------------------------------------
# operator-level utilities
# ---------------------------------------------------------------------------


def apply_operator(kernel: Kernel, fgrid: np.ndarray, G: MeasureModel) -> np.ndarray:
    """Grid image of the kernel operator applied to a grid function."""
    fgrid = np.asarray(fgrid, dtype=float).ravel()
    if fgrid.size != G.points.shape[0]:
        raise KernelError(
            f"grid function has {fgrid.size} values, measure grid has {G.points.shape[0]}"
        )
    return kernel.apply_grid(G, fgrid)


def apply_operator_at(
    kernel: Kernel, fgrid: np.ndarray, G: MeasureModel, x: np.ndarray
) -> np.ndarray:
    """Kernel operator image evaluated at arbitrary points of the domain."""
    return kernel.apply_at(G, np.asarray(fgrid, dtype=float).ravel(), np.asarray(x, dtype=float))


def operator_norm_estimate(
    kernel: Kernel, G: MeasureModel, max_iter: int = 100, rtol: float = 1e-11
) -> NormEstimate:
    """L2(G) operator norm by power iteration on the discretized K*K.

    Deterministic: fixed start vector, fixed iteration schedule.  When the
    iteration has not settled after `max_iter` steps the last estimate is
    returned with `converged=False`.
    """
    pts = G.points
    s = (pts - np.asarray(G.domain.lo)) / G.domain.widths
    s = s.mean(axis=1)
    v = 1.0 + 0.5 * np.sin(3.0 * np.pi * s) + 0.25 * np.cos(7.0 * np.pi * s)
    nv = np.sqrt(G.inner(v, v))
    v = v / nv
    est = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        tv = kernel.apply_grid(G, v)
        new = np.sqrt(max(G.inner(tv, tv), 0.0))
        if new == 0.0:
            return NormEstimate(0.0, True, iterations)
        ttv = kernel.apply_grid(G, tv)
        nt = np.sqrt(max(G.inner(ttv, ttv), 0.0))
        if nt == 0.0:
            return NormEstimate(new, True, iterations)
        v = ttv / nt
        if abs(new - est) <= rtol * max(new, 1.0):
            est = new
            converged = True
            break
        est = new
    return NormEstimate(float(est), converged, iterations)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def kernel_from_json(doc: dict, G: MeasureModel | None = None) -> Kernel:
    kind = doc["kind"]
    if kind == "haar":
        return HaarKernel(int(doc["level"]), np.asarray(doc["coeffs"], dtype=float))
    if kind == "haar_series":
        return HaarSeriesKernel(int(doc["k"]))
    if kind == "wavelet":
        return TensorWaveletKernel(int(doc["level"]), int(doc["dim"]), doc["family"])
    if kind == "fourier":
        return FourierKernel(int(doc["k"]), doc.get("variant", "circle"))
    if kind == "convolution":
        return ConvolutionKernel(float(doc["sigma"]), doc.get("mother", "box"))
    if kind == "constant":
        return ConstantKernel(float(doc["value"]), Domain.from_json(doc["domain"]))
    if kind == "spline_gram":
        ker = SplineGramKernel.__new__(SplineGramKernel)
        Kernel.__init__(ker, unit_interval())
        ker.order = int(doc["order"])
        ker.knots = np.asarray(doc["knots"], dtype=float)
        ker.k = bsplines.dimension(ker.knots, ker.order)
        ker.coeffs = np.asarray(doc["coeffs"], dtype=float)
        return ker
    if kind == "weighted":
        measure = MeasureModel.from_json(doc["measure"]) if "measure" in doc else G
        if measure is None:
            raise KernelError("weighted kernel needs a measure")
        return WeightedKernel(
            kernel_from_json(doc["base"], measure), np.asarray(doc["weight"], float), measure
        )
    if kind == "twiced":
        measure = MeasureModel.from_json(doc["measure"]) if "measure" in doc else G
        if measure is None:
            raise KernelError("twiced kernel needs a measure")
        return TwicedKernel(kernel_from_json(doc["base"], measure), measure)
    raise KernelError(f"unknown kernel kind {kind!r}")
