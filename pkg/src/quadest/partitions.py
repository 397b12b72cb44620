"""Partitions of the design domain, bin assignment, regularity diagnostics,
and sampling conditioned on bin counts.

The diagnostics quantify how much of the kernel's weighted mass sits in
the union of diagonal blocks cell x cell, how even the cells are, and the
Lyapounov-type quantity that drives conditional normality; the default
cell counts per kernel family follow the concrete schedules used to prove
that admissible partitions exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import (
    ConvolutionKernel,
    FourierKernel,
    HaarKernel,
    HaarSeriesKernel,
    Kernel,
    SplineGramKernel,
    TensorWaveletKernel,
    WeightedKernel,
    cell_index_from_edges,
    cell_restricted_integral,
    local_grid,
    operator_norm_estimate,
)
from .measures import MeasureModel
from .ustat import k_n_weighted


class PartitionError(ValueError):
    """Invalid partition construction or uncovered points."""


@dataclass
class Partition:
    """Ordered half-open interval cells covering a one-dimensional domain."""

    edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.edges) != len(self.probs) + 1:
            raise PartitionError("edges must have one more entry than probs")
        if np.any(np.diff(self.edges) <= 0):
            raise PartitionError("cell edges must be strictly increasing")
        if abs(self.probs.sum() - 1.0) > 1e-10:
            raise PartitionError(
                f"cell probabilities sum to {self.probs.sum():.12f}, not 1"
            )

    @property
    def M(self) -> int:
        return len(self.probs)

    def intervals(self):
        for m in range(self.M):
            yield float(self.edges[m]), float(self.edges[m + 1])

    def assign_points(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x < self.edges[0] - 1e-12) or np.any(x > self.edges[-1] + 1e-12):
            bad = x[(x < self.edges[0] - 1e-12) | (x > self.edges[-1] + 1e-12)][0]
            raise PartitionError(f"point {bad} not covered by the partition")
        return cell_index_from_edges(self.edges, x)

    def to_json(self) -> dict:
        return {"edges": self.edges, "probs": self.probs}

    @staticmethod
    def from_json(doc: dict, G: MeasureModel | None = None) -> "Partition":
        edges = np.asarray(doc["edges"], dtype=float)
        if "probs" in doc:
            probs = np.asarray(doc["probs"], dtype=float)
        else:
            if G is None:
                raise PartitionError("need a measure to compute cell probabilities")
            probs = cell_probs(edges, G)
        return Partition(edges, probs)


@dataclass
class BinAssignment:
    indices: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass
class ConditionReport:
    op_norm: float
    kn_over_n: float
    diag_ratio: float
    max_cell_ratio: float
    max_prob: float
    n_min_prob: float
    lyapounov: float
    simplified_12: float
    q_used: float
    k_n: float

    def to_json(self) -> dict:
        return {
            "op_norm": self.op_norm,
            "kn_over_n": self.kn_over_n,
            "diag_ratio": self.diag_ratio,
            "max_cell_ratio": self.max_cell_ratio,
            "max_prob": self.max_prob,
            "n_min_prob": self.n_min_prob,
            "lyapounov": self.lyapounov,
            "simplified_12": self.simplified_12,
            "q_used": self.q_used,
            "k_n": self.k_n,
        }


def cell_probs(edges: np.ndarray, G: MeasureModel) -> np.ndarray:
    probs = G.weighted_cell_integrals(np.ones(G.points.shape[0]), edges)
    total = probs.sum()
    if abs(total - 1.0) > 1e-10:
        raise PartitionError(f"partition mass {total:.12f} differs from 1")
    return probs / total


def partition_from_edges(edges: np.ndarray, G: MeasureModel) -> Partition:
    return Partition(np.asarray(edges, dtype=float), cell_probs(np.asarray(edges, float), G))


def _kernel_cell_edges(kernel: Kernel) -> np.ndarray | None:
    base = kernel.base if isinstance(kernel, WeightedKernel) else kernel
    if isinstance(base, HaarKernel):
        return base.edges
    if isinstance(base, HaarSeriesKernel):
        return base.edges
    if isinstance(base, TensorWaveletKernel) and base.dim == 1:
        k = base.k_per_axis
        return np.arange(k + 1) / k
    return None


def build_partition(kernel: Kernel, M: int, G: MeasureModel) -> Partition:
    """Partition matched to the kernel family.

    Dyadic-cell kernels are coarsened into blocks of adjacent cells (M must
    divide the cell count); spline kernels use knot-aligned blocks; Fourier
    and convolution kernels get M equal-length intervals.
    """
    if G.ndim != 1:
        raise PartitionError("partitions are supported on one-dimensional domains")
    if M < 1:
        raise PartitionError("cell count must be positive")
    base = kernel.base if isinstance(kernel, WeightedKernel) else kernel
    cells = _kernel_cell_edges(kernel)
    if cells is not None:
        k = len(cells) - 1
        if k % M != 0:
            raise PartitionError(
                f"{M} cells do not align with the kernel's {k} dyadic cells"
            )
        edges = cells[:: k // M]
    elif isinstance(base, SplineGramKernel):
        uniq = np.unique(base.knots)
        spans = len(uniq) - 1
        if M > spans:
            raise PartitionError(f"at most {spans} knot-aligned cells available")
        step = spans // M
        take = list(range(0, spans + 1, step))
        edges = uniq[take]
        edges[-1] = uniq[-1]
        edges = np.unique(edges)
    else:
        if M < 2 and not isinstance(base, (FourierKernel, ConvolutionKernel)):
            pass
        lo, hi = G.domain.lo[0], G.domain.hi[0]
        edges = np.linspace(lo, hi, M + 1)
    return partition_from_edges(edges, G)


def default_cell_count(kernel: Kernel, n: int) -> int:
    """Concrete admissible schedules for each kernel family."""
    base = kernel.base if isinstance(kernel, WeightedKernel) else kernel
    cells = _kernel_cell_edges(kernel)
    if cells is not None:
        k = len(cells) - 1
        target = max(1, min(n, k // 2))
        return 1 << int(np.floor(np.log2(target)))
    if isinstance(base, FourierKernel):
        return max(2, int(np.ceil(2.0 * np.pi * base.k ** (1.0 / 6.0))))
    if isinstance(base, ConvolutionKernel):
        return max(2, int(np.ceil((1.0 / base.sigma) ** (1.0 / 6.0))))
    if isinstance(base, SplineGramKernel):
        spans = len(np.unique(base.knots)) - 1
        m = max(1, min(n, spans // 2))
        while spans % m:
            m -= 1
        return m
    return max(2, int(np.ceil(np.sqrt(n))))


def assign(partition: Partition, sample) -> BinAssignment:
    """Bin indices (half-open cells) and occupancy counts for a sample."""
    x = sample.x if hasattr(sample, "x") else np.asarray(sample, dtype=float)
    if x.shape[0] == 0:
        return BinAssignment(
            np.zeros(0, dtype=np.int64), np.zeros(partition.M, dtype=np.int64)
        )
    idx = partition.assign_points(x)
    counts = np.bincount(idx, minlength=partition.M)
    return BinAssignment(idx, counts)


def check_conditions(
    kernel: Kernel,
    partition: Partition,
    G: MeasureModel,
    n: int,
    q: float = 4.0,
) -> ConditionReport:
    """Numerical values of the regularity conditions for a given n.

    Cell-restricted double integrals run on per-cell grids fine enough for
    the kernel's oscillation scale; the weighted norm and the operator norm
    reuse the kernel's own fast quadrature paths.
    """
    if q <= 2:
        raise PartitionError(f"Lyapounov exponent q must exceed 2, got {q}")
    kn = k_n_weighted(kernel, G)
    diag2 = np.array(
        [
            cell_restricted_integral(kernel, G, a, b, G.mu2, power=2.0)
            for a, b in partition.intervals()
        ]
    )
    diagq = np.array(
        [
            cell_restricted_integral(kernel, G, a, b, G.muq, power=q)
            for a, b in partition.intervals()
        ]
    )
    probs = partition.probs
    max_prob = float(probs.max())
    lyap = (
        kn ** (-q / 2.0)
        * float((probs.max() / n) ** (q / 2.0 - 1.0))
        * float(diagq.sum())
    )
    return ConditionReport(
        op_norm=float(operator_norm_estimate(kernel, G)),
        kn_over_n=kn / n,
        diag_ratio=float(diag2.sum()) / kn,
        max_cell_ratio=float(diag2.max()) / kn,
        max_prob=max_prob,
        n_min_prob=n * float(probs.min()),
        lyapounov=lyap,
        simplified_12=max_prob * kn / n,
        q_used=float(q),
        k_n=kn,
    )


def conditional_resample(
    partition: Partition,
    counts: BinAssignment,
    G: MeasureModel,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw X_r from G restricted to its assigned cell, independently.

    Given the bin-index vector, each observation's position is drawn from
    the renormalized restriction of G to that cell, which reproduces the
    conditional law of the sample given the bin counts.
    """
    idx = counts.indices
    x = np.empty(idx.shape[0])
    for m, (a, b) in enumerate(partition.intervals()):
        where = idx == m
        c = int(where.sum())
        if c == 0:
            continue
        x[where] = G.sample_restricted(rng, c, a, b)
    return x


@dataclass
class CellStats:
    """Per-cell quadrature ingredients of the conditional mean and variance."""

    probs: np.ndarray
    alpha1: np.ndarray  # int int over cell^2 of K (mu x mu) d(G x G)
    alpha2: np.ndarray  # int int over cell^2 of K^2 (mu2 x mu2) d(G x G)
    num_norm: np.ndarray  # int over cell of (K(mu 1_cell))^2 mu2 dG


def conditional_cell_stats(
    kernel: Kernel, partition: Partition, G: MeasureModel
) -> CellStats:
    probs = partition.probs
    m = partition.M
    alpha1 = np.zeros(m)
    alpha2 = np.zeros(m)
    num_norm = np.zeros(m)
    info = kernel.cell_info()
    for cell, (a, b) in enumerate(partition.intervals()):
        alpha1[cell] = cell_restricted_integral(kernel, G, a, b, G.mu, power=1.0)
        alpha2[cell] = cell_restricted_integral(kernel, G, a, b, G.mu2, power=2.0)
        if info is not None and G.ndim == 1:
            inner = info.edges[(info.edges > a) & (info.edges < b)]
            edges = np.concatenate(([a], inner, [b]))
            mu_mass = G.weighted_cell_integrals(G.mu, edges)
            mu2_mass = G.weighted_cell_integrals(G.mu2, edges)
            mids = 0.5 * (edges[:-1] + edges[1:])
            vals = info.diag[info.index(mids)]
            num_norm[cell] = float(np.dot((vals * mu_mass) ** 2, mu2_mass))
        else:
            nodes, gw = local_grid(kernel, G, a, b)
            mu_loc = G.grid_lookup(G.mu, nodes)
            mu2_loc = G.grid_lookup(G.mu2, nodes)
            kmat = kernel.pair_matrix(nodes, nodes)
            kmu = kmat @ (mu_loc * gw)
            num_norm[cell] = float(np.dot(kmu * kmu * mu2_loc, gw))
    return CellStats(probs=probs, alpha1=alpha1, alpha2=alpha2, num_norm=num_norm)


def conditional_mean(stats: CellStats, counts: np.ndarray, n: int) -> float:
    """E(V | bin counts): per-cell pair counts times conditional pair means."""
    counts = np.asarray(counts, dtype=float)
    active = counts >= 2
    if not np.any(active):
        return 0.0
    terms = (
        counts[active]
        * (counts[active] - 1.0)
        * stats.alpha1[active]
        / stats.probs[active] ** 2
    )
    return float(terms.sum()) / (n * (n - 1))


def restricted_variance_exact(stats: CellStats, n: int):
    """Exact variance of the diagonal-restricted statistic.

    The restricted kernel K 1_{union of cell^2} has disjoint diagonal
    blocks, so its three variance ingredients are plain sums of the
    per-cell quadrature quantities.
    """
    from .ustat import VarianceReport

    norm_sq = float(stats.num_norm.sum())
    inner = float(stats.alpha1.sum())
    kn = float(stats.alpha2.sum())
    c = n * (n - 1)
    t1 = 4.0 * (n - 2) / c * norm_sq
    t2 = -(4.0 * (n - 2) + 2.0) / c * inner**2
    t3 = 2.0 * kn / c
    return VarianceReport(t1 + t2 + t3, t1, t2, t3, kn)


def conditional_variance(stats: CellStats, counts: np.ndarray, n: int) -> float:
    """var(V | bin counts) from the per-cell variance decomposition."""
    counts = np.asarray(counts, dtype=float)
    total = 0.0
    nn = n * (n - 1)
    for m in range(len(counts)):
        N = counts[m]
        if N < 2:
            continue
        p = stats.probs[m]
        if p <= 0:
            raise PartitionError(
                f"cell {m} holds {int(N)} points but has zero G-probability"
            )
        pairs = N * (N - 1.0)
        norm_sq = stats.num_norm[m] / p**3
        inner = stats.alpha1[m] / p**2
        knm = stats.alpha2[m] / p**2
        cell_var = (
            4.0 * (N - 2.0) / pairs * norm_sq
            - (4.0 * (N - 2.0) + 2.0) / pairs * inner**2
            + 2.0 * knm / pairs
        )
        total += (pairs / nn) ** 2 * cell_var
    return total
