"""Design measures on an interval or cube, with midpoint quadrature grids.

A :class:`MeasureModel` bundles the design law G (a probability density on
the domain, tabulated on a uniform midpoint grid) with the conditional
moment functions of the response: mu(x) = E(Y|X=x), mu2(x) = E(Y^2|X=x)
and muq(x) = E(|Y|^q|X=x) for some q > 2.

The grid convention is composite midpoint: for a grid of size N per axis
the nodes are the cell midpoints, which keeps half-open cell boundaries
away from every node.  One-dimensional cell probabilities G((a, b]) are
read off a piecewise-linear CDF, which is exact whenever the density is
constant on grid cells and therefore exact for every dyadic cell of a
uniform density regardless of how fine the dyadic partition is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """A point lies outside the measure's domain."""


class MeasureError(ValueError):
    """The measure model violates a structural requirement."""


@dataclass(frozen=True)
class Domain:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.ndim))
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=1)

    def check(self, x: np.ndarray) -> None:
        ok = self.contains(x)
        if not np.all(ok):
            bad = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.ndim))[
                ~ok
            ][0]
            raise DomainError(f"point {bad} outside domain [{self.lo}, {self.hi}]")

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @staticmethod
    def from_json(doc: dict) -> "Domain":
        return Domain(tuple(doc["lo"]), tuple(doc["hi"]))


def unit_interval() -> Domain:
    return Domain((0.0,), (1.0,))


def centered_circle() -> Domain:
    """The interval [-pi, pi] used by the Dirichlet kernel."""
    return Domain((-np.pi,), (np.pi,))


def unit_cube(d: int) -> Domain:
    return Domain((0.0,) * d, (1.0,) * d)


GridFunc = Callable[[np.ndarray], np.ndarray] | np.ndarray | float | None


class MeasureModel:
    """Design law G plus conditional moments, sampled on a midpoint grid.

    Parameters
    ----------
    domain : Domain
    density : callable, array, scalar or None
        Unnormalized density of G w.r.t. Lebesgue measure; None = uniform.
    grid_size : int
        Nodes per axis (default 4096 for d=1, 64 per axis otherwise).
    mu, mu2, muq : callable, array or scalar
        Conditional moments; defaults mu=0, mu2=1, muq=mu2^(q/2) surrogate.
    q : float
        Moment exponent, must exceed 2.
    bounds : (float, float)
        Admissible range for density, mu2 and muq values on the grid.
    """

    def __init__(
        self,
        domain: Domain,
        density: GridFunc = None,
        grid_size: int | None = None,
        mu: GridFunc = 0.0,
        mu2: GridFunc = 1.0,
        muq: GridFunc = None,
        q: float = 4.0,
        bounds: tuple[float, float] = (1e-8, 1e8),
    ):
        if q <= 2:
            raise MeasureError(f"moment exponent q must exceed 2, got {q}")
        self.domain = domain
        d = domain.ndim
        if grid_size is None:
            grid_size = 4096 if d == 1 else 64
        if grid_size < 2:
            raise MeasureError("grid_size must be at least 2")
        self.grid_size = int(grid_size)
        self.q = float(q)
        self.bounds = bounds

        lo = np.asarray(domain.lo)
        widths = domain.widths
        self.step = widths / self.grid_size
        axes = [
            lo[a] + (np.arange(self.grid_size) + 0.5) * self.step[a] for a in range(d)
        ]
        if d == 1:
            self.nodes = axes[0]
            self.points = axes[0][:, None]
        else:
            mesh = np.meshgrid(*axes, indexing="ij")
            self.points = np.stack([m.ravel() for m in mesh], axis=1)
            self.nodes = self.points
        self.cell_volume = float(np.prod(self.step))

        dens = self._tabulate(density, default=1.0)
        if np.any(dens <= 0):
            raise MeasureError("density must be strictly positive on the grid")
        self._check_bounds("density", dens)
        raw = dens * self.cell_volume
        self.total_mass = float(raw.sum())
        self.gweights = raw / self.total_mass
        self.density = dens / self.total_mass
        self.mu = self._tabulate(mu, default=0.0)
        self.mu2 = self._tabulate(mu2, default=1.0)
        self._check_bounds("mu2", self.mu2)
        if muq is None:
            self.muq = self.mu2 ** (self.q / 2.0)
        else:
            self.muq = self._tabulate(muq, default=1.0)
        self._check_bounds("muq", self.muq)

        # piecewise-linear CDF knots at cell edges (d = 1 only)
        if d == 1:
            self._cdf = np.concatenate(([0.0], np.cumsum(self.gweights)))
            self._cdf[-1] = 1.0
            self._edges = np.concatenate(
                ([domain.lo[0]], self.nodes + 0.5 * self.step[0])
            )

    # -- construction helpers -------------------------------------------------

    def _tabulate(self, f: GridFunc, default: float) -> np.ndarray:
        n = self.points.shape[0]
        if f is None:
            return np.full(n, default)
        if callable(f):
            x = self.nodes if self.domain.ndim == 1 else self.points
            vals = np.asarray(f(x), dtype=float)
            if vals.shape == ():
                vals = np.full(n, float(vals))
            return vals.reshape(n)
        arr = np.asarray(f, dtype=float)
        if arr.shape == ():
            return np.full(n, float(arr))
        if arr.size != n:
            raise MeasureError(f"grid array has {arr.size} values, grid has {n}")
        return arr.reshape(n)

    def _check_bounds(self, name: str, vals: np.ndarray) -> None:
        lo, hi = self.bounds
        vmin, vmax = float(vals.min()), float(vals.max())
        if vmin < lo or vmax > hi:
            raise MeasureError(
                f"{name} range [{vmin:.3g}, {vmax:.3g}] outside bounds [{lo}, {hi}]"
            )

    # -- quadrature ------------------------------------------------------------

    @property
    def ndim(self) -> int:
        return self.domain.ndim

    def integrate(self, fgrid: np.ndarray) -> float:
        """Integral of a grid function against G."""
        return float(np.dot(np.asarray(fgrid).ravel(), self.gweights))

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """L2(G) inner product of two grid functions."""
        return float(np.dot(np.asarray(f).ravel() * self.gweights, np.asarray(g).ravel()))

    def lebesgue_integrate(self, fgrid: np.ndarray) -> float:
        return float(np.asarray(fgrid).ravel().sum() * self.cell_volume)

    def grid_eval(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        x = self.nodes if self.ndim == 1 else self.points
        return np.asarray(f(x), dtype=float).reshape(self.points.shape[0])

    # -- CDF machinery (d = 1) ---------------------------------------------------

    def _require_1d(self) -> None:
        if self.ndim != 1:
            raise MeasureError("operation requires a one-dimensional measure")

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """Piecewise-linear CDF of G at points x (d = 1)."""
        self._require_1d()
        x = np.asarray(x, dtype=float)
        idx = np.clip(
            np.searchsorted(self._edges, x, side="right") - 1, 0, self.grid_size - 1
        )
        left = self._edges[idx]
        frac = np.clip((x - left) / self.step[0], 0.0, 1.0)
        return np.clip(self._cdf[idx] + frac * self.gweights[idx], 0.0, 1.0)

    def cell_prob(self, a: float, b: float) -> float:
        """G((a, b]] via the piecewise-linear CDF."""
        return float(self.cdf(np.asarray([b])) - self.cdf(np.asarray([a])))

    def weighted_cell_integrals(
        self, wgrid: np.ndarray, edges: np.ndarray
    ) -> np.ndarray:
        """Integrals of a grid function w against G over cells (edges[i], edges[i+1]].

        Exact when w * density is constant on grid cells; otherwise
        quadrature-grade like every other grid contraction.
        """
        self._require_1d()
        cum = np.concatenate(([0.0], np.cumsum(np.asarray(wgrid) * self.gweights)))
        idx = np.clip(
            np.searchsorted(self._edges, edges, side="right") - 1,
            0,
            self.grid_size - 1,
        )
        left = self._edges[idx]
        frac = np.clip((edges - left) / self.step[0], 0.0, 1.0)
        vals = cum[idx] + frac * np.asarray(wgrid)[idx] * self.gweights[idx]
        return np.diff(vals)

    def grid_lookup(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Nearest-node lookup of a grid function at arbitrary points.

        The tabulated representation is piecewise constant on grid cells,
        so this is the exact evaluation of that representation.
        """
        values = np.asarray(values, dtype=float).ravel()
        x = np.asarray(x, dtype=float)
        lo = np.asarray(self.domain.lo)
        if self.ndim == 1:
            idx = np.clip(
                np.ceil((x - lo[0]) / self.step[0]).astype(np.int64) - 1,
                0,
                self.grid_size - 1,
            )
            return values[idx]
        pts = np.atleast_2d(x.reshape(-1, self.ndim))
        flat = np.zeros(pts.shape[0], dtype=np.int64)
        for a in range(self.ndim):
            ax = np.clip(
                np.ceil((pts[:, a] - lo[a]) / self.step[a]).astype(np.int64) - 1,
                0,
                self.grid_size - 1,
            )
            flat = flat * self.grid_size + ax
        return values[flat]

    def quantile(self, u: np.ndarray) -> np.ndarray:
        """Inverse CDF; exact for the tabulated piecewise-constant density."""
        self._require_1d()
        u = np.asarray(u, dtype=float)
        idx = np.clip(np.searchsorted(self._cdf, u, side="right") - 1, 0, self.grid_size - 1)
        w = self.gweights[idx]
        frac = np.where(w > 0, (u - self._cdf[idx]) / np.where(w > 0, w, 1.0), 0.0)
        return self._edges[idx] + np.clip(frac, 0.0, 1.0) * self.step[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw iid points from G (d = 1)."""
        return self.quantile(rng.random(size))

    def sample_restricted(
        self, rng: np.random.Generator, size: int, a: float, b: float
    ) -> np.ndarray:
        """Draw iid points from G conditioned on the cell (a, b]."""
        ua, ub = float(self.cdf(np.asarray([a]))), float(self.cdf(np.asarray([b])))
        if ub <= ua:
            raise MeasureError(f"cell ({a}, {b}] has zero G-probability")
        return self.quantile(ua + (ub - ua) * rng.random(size))

    # -- serialization -----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "domain": self.domain.to_json(),
            "grid_size": self.grid_size,
            "q": self.q,
            "density": self.density * self.total_mass,
            "mu": self.mu,
            "mu2": self.mu2,
            "muq": self.muq,
        }

    @staticmethod
    def from_json(doc: dict) -> "MeasureModel":
        return MeasureModel(
            Domain.from_json(doc["domain"]),
            density=np.asarray(doc["density"], dtype=float),
            grid_size=int(doc["grid_size"]),
            mu=np.asarray(doc["mu"], dtype=float),
            mu2=np.asarray(doc["mu2"], dtype=float),
            muq=np.asarray(doc["muq"], dtype=float),
            q=float(doc["q"]),
        )


def uniform_measure(
    domain: Domain | None = None, grid_size: int | None = None, **kw
) -> MeasureModel:
    return MeasureModel(domain or unit_interval(), grid_size=grid_size, **kw)
