"""Monte Carlo harness: normality checks (unconditional and conditional on
bin counts), variance verification, multinomial quadratic forms, and rate
experiments over a size schedule.

Reproducibility contract: every replication r draws from the stream
``default_rng([seed, stream_id, r])``, so parallel and serial runs produce
bit-identical per-replication rows, and aggregation is an indexed
reduction over the replication array.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .estimators import (
    fit_cellwise,
    mean_response_estimate,
    nuisance_resolution,
    schedule_dimension,
    sq_regression_estimate,
)
from .kernels import (
    ConstantKernel,
    ConvolutionKernel,
    FourierKernel,
    HaarSeriesKernel,
    Kernel,
    SplineGramKernel,
    TensorWaveletKernel,
    haar_kernel,
    wavelet_kernel,
)
from .bsplines import uniform_knots
from .measures import MeasureModel, centered_circle, unit_interval
from .partitions import (
    BinAssignment,
    CellStats,
    Partition,
    assign,
    build_partition,
    conditional_cell_stats,
    conditional_mean,
    conditional_resample,
    conditional_variance,
    restricted_variance_exact,
)
from .ustat import Sample, expectation, k_n_weighted, u_stat, v_stat


class ConfigError(ValueError):
    """Malformed experiment configuration."""


# stream ids for the counter-based per-replication RNG split
_STREAM_MAIN = 0
_STREAM_COUNTS = 1
_STREAM_CONDITIONAL = 2
_STREAM_RATIO = 3
_STREAM_RATE = 4


def ks_distance_to_normal(values: np.ndarray) -> float:
    """One-sample Kolmogorov-Smirnov distance to the standard normal."""
    z = np.sort(np.asarray(values, dtype=float))
    n = z.size
    if n == 0:
        raise ConfigError("KS distance of an empty sample")
    cdf = ndtr(z)
    up = np.max(np.arange(1, n + 1) / n - cdf)
    down = np.max(cdf - np.arange(0, n) / n)
    return float(max(up, down))


def charlier_1(x, lam):
    """First orthonormal polynomial of the Poisson(lam) law."""
    return (np.asarray(x, dtype=float) - lam) / np.sqrt(lam)


def charlier_2(x, lam):
    """Second orthonormal polynomial of the Poisson(lam) law."""
    x = np.asarray(x, dtype=float)
    return (x * (x - 1.0) - 2.0 * lam * x + lam * lam) / (np.sqrt(2.0) * lam)


# ---------------------------------------------------------------------------
# data generators
# ---------------------------------------------------------------------------


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def haar_theta_coefficients(
    beta: float, c: float, levels: int, sign_seed: int = 20240611, floor: float = 0.1
) -> dict:
    """Density 1 + sum theta_i e_i over the ordered dyadic wavelet basis.

    theta_i = c * i^(-(2 beta + 1)/2) with deterministic signs; c is scaled
    down if needed so the density stays above the floor.  Returns the cell
    values at the finest level together with the coefficient vector and
    the exact value of the integrated squared density.
    """
    if levels < 1 or levels > 22:
        raise ConfigError("haar_theta levels must be in 1..22")
    total = 1 << levels
    i = np.arange(2, total + 1, dtype=float)
    signs = np.where(
        np.random.default_rng(sign_seed).random(total - 1) < 0.5, -1.0, 1.0
    )
    theta = c * i ** (-(2.0 * beta + 1.0) / 2.0) * signs

    def build(thetas: np.ndarray) -> np.ndarray:
        cells = np.ones(1)
        pos = 0
        for lev in range(levels):
            width = 1 << lev
            t = thetas[pos : pos + width] * np.sqrt(float(width))
            nxt = np.empty(2 * width)
            nxt[0::2] = cells + t
            nxt[1::2] = cells - t
            cells = nxt
            pos += width
        return cells

    cells = build(theta)
    gmin = float(cells.min())
    scale = 1.0
    if gmin < floor:
        scale = (1.0 - floor) / (1.0 - gmin)
        theta = theta * scale
        cells = build(theta)
    full = np.concatenate(([1.0], theta))
    return {
        "cells": cells,
        "theta": full,
        "truth": float(np.dot(full, full)),
        "scale_applied": scale,
        "levels": levels,
    }


def theta_partial_sum(theta: np.ndarray, k: int) -> float:
    """Sum of squared coefficients over the first k basis elements."""
    k = min(k, len(theta))
    return float(np.dot(theta[:k], theta[:k]))


_DENSITY_KEYS = {"type", "coeffs", "floor", "beta", "c", "levels", "sign_seed"}
_REGRESSION_KEYS = {"type", "value", "beta", "terms", "phase_seed"}
_NOISE_KEYS = {"type", "sd"}
_GENERATOR_KEYS = {"density", "regression", "noise", "missing"}
_MISSING_KEYS = {"type", "observe_low", "observe_high"}


@dataclass
class Generator:
    """Resolved data generator: density cells/arrays plus moment functions."""

    spec: dict
    domain_tag: str = "unit"

    def __post_init__(self):
        _check_keys(self.spec, _GENERATOR_KEYS, "generator")
        self.density_spec = dict(self.spec.get("density", {"type": "uniform"}))
        self.regression_spec = dict(self.spec.get("regression", {"type": "zero"}))
        self.noise_spec = dict(self.spec.get("noise", {"type": "gaussian", "sd": 1.0}))
        self.missing_spec = (
            dict(self.spec["missing"]) if self.spec.get("missing") else None
        )
        _check_keys(self.density_spec, _DENSITY_KEYS, "generator.density")
        _check_keys(self.regression_spec, _REGRESSION_KEYS, "generator.regression")
        _check_keys(self.noise_spec, _NOISE_KEYS, "generator.noise")
        if self.missing_spec:
            _check_keys(self.missing_spec, _MISSING_KEYS, "generator.missing")
        if self.noise_spec["type"] not in ("gaussian", "uniform", "two_point"):
            raise ConfigError(f"unknown noise law {self.noise_spec['type']!r}")
        self.theta_info: dict | None = None
        if self.density_spec["type"] == "haar_theta":
            self.theta_info = haar_theta_coefficients(
                beta=float(self.density_spec.get("beta", 0.125)),
                c=float(self.density_spec.get("c", 0.08)),
                levels=int(self.density_spec.get("levels", 20)),
                sign_seed=int(self.density_spec.get("sign_seed", 20240611)),
                floor=float(self.density_spec.get("floor", 0.1)),
            )

    # -- pieces ---------------------------------------------------------------

    def density_grid(self, x: np.ndarray) -> np.ndarray:
        kind = self.density_spec["type"]
        if kind == "uniform":
            return np.ones_like(x)
        if kind == "cosine":
            coeffs = np.asarray(self.density_spec.get("coeffs", []), dtype=float)
            floor = float(self.density_spec.get("floor", 0.1))
            g = np.ones_like(x)
            for m, cm in enumerate(coeffs, start=1):
                g = g + cm * np.sqrt(2.0) * np.cos(2.0 * np.pi * m * x)
            if g.min() < floor:
                raise ConfigError(
                    f"cosine density dips to {g.min():.3f}, below the floor {floor}"
                )
            return g
        if kind == "haar_theta":
            cells = self.theta_info["cells"]
            idx = np.clip(
                np.ceil(x * len(cells)).astype(np.int64) - 1, 0, len(cells) - 1
            )
            return cells[idx]
        raise ConfigError(f"unknown density type {kind!r}")

    def regression(self, x: np.ndarray) -> np.ndarray:
        kind = self.regression_spec["type"]
        if kind == "zero":
            return np.zeros_like(x)
        if kind == "constant":
            return np.full_like(x, float(self.regression_spec.get("value", 1.0)))
        if kind == "linear":
            return np.asarray(x, dtype=float)
        if kind == "holder":
            beta = float(self.regression_spec.get("beta", 0.5))
            terms = int(self.regression_spec.get("terms", 12))
            phases = np.random.default_rng(
                int(self.regression_spec.get("phase_seed", 717))
            ).uniform(0, 2 * np.pi, terms)
            out = np.zeros_like(x, dtype=float)
            for j in range(terms):
                out += 2.0 ** (-beta * j) * np.cos(2.0 * np.pi * (1 << j) * x + phases[j])
            return out
        raise ConfigError(f"unknown regression type {kind!r}")

    @property
    def noise_sd(self) -> float:
        return float(self.noise_spec.get("sd", 1.0))

    def noise_fourth_moment(self) -> float:
        sd = self.noise_sd
        kind = self.noise_spec["type"]
        if kind == "gaussian":
            return 3.0 * sd**4
        if kind == "uniform":
            return 9.0 / 5.0 * sd**4
        return sd**4  # two_point

    def draw_noise(self, rng: np.random.Generator, size: int) -> np.ndarray:
        sd = self.noise_sd
        kind = self.noise_spec["type"]
        if kind == "gaussian":
            return sd * rng.standard_normal(size)
        if kind == "uniform":
            return sd * np.sqrt(3.0) * (2.0 * rng.random(size) - 1.0)
        return sd * np.where(rng.random(size) < 0.5, -1.0, 1.0)

    # -- assembled model --------------------------------------------------------

    def build_measure(self, grid_size: int, q: float = 4.0) -> MeasureModel:
        domain = centered_circle() if self.domain_tag == "circle" else unit_interval()
        lo, hi = domain.lo[0], domain.hi[0]

        def unit_of(x):
            return (np.asarray(x, dtype=float) - lo) / (hi - lo)

        def mu(x):
            return self.regression(unit_of(x))

        def mu2(x):
            b = self.regression(unit_of(x))
            return b * b + self.noise_sd**2

        def muq(x):
            b = self.regression(unit_of(x))
            return b**4 + 6.0 * b * b * self.noise_sd**2 + self.noise_fourth_moment()

        return MeasureModel(
            domain,
            density=lambda x: self.density_grid(unit_of(x)),
            grid_size=grid_size,
            mu=mu,
            mu2=mu2,
            muq=muq,
            q=q,
        )

    def draw_sample(self, G: MeasureModel, n: int, rng: np.random.Generator) -> Sample:
        x = G.sample(rng, n)
        lo, hi = G.domain.lo[0], G.domain.hi[0]
        b = self.regression((x - lo) / (hi - lo))
        y = b + self.draw_noise(rng, n)
        if self.missing_spec is None:
            return Sample(x, y)
        p_lo = float(self.missing_spec.get("observe_low", 0.5))
        p_hi = float(self.missing_spec.get("observe_high", 0.9))
        u = (x - lo) / (hi - lo)
        p_obs = p_lo + (p_hi - p_lo) * u
        a = (rng.random(n) < p_obs).astype(float)
        return Sample(x, y * a, a=a)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "scenario",
    "n",
    "reps",
    "seed",
    "kernel",
    "generator",
    "grid_size",
    "threads",
    "conditional",
    "partition_m",
    "q",
    "schedule",
    "multinomial",
    "spot_check",
}
_KERNEL_KEYS = {"kind", "k", "level", "sigma", "mother", "dim", "family", "variant", "order", "cells", "value", "weight"}
_SCHEDULE_KEYS = {"n_values", "beta", "c", "levels", "reps", "basis"}
_MULTINOMIAL_KEYS = {"m", "alpha", "probs"}
_SCENARIOS = ("raw_ustat", "sq_density", "sq_regression", "mean_response", "multinomial_form", "rate")


@dataclass
class ExperimentConfig:
    scenario: str = "raw_ustat"
    n: int = 100
    reps: int = 1000
    seed: int = 20240601
    kernel: dict = field(default_factory=lambda: {"kind": "haar", "k": 256})
    generator: dict = field(default_factory=dict)
    grid_size: int | None = None
    threads: int | None = None
    conditional: bool = False
    partition_m: int | None = None
    q: float = 4.0
    schedule: dict | None = None
    multinomial: dict | None = None
    spot_check: int = 100

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        _check_keys(doc, _CONFIG_KEYS, "config")
        cfg = ExperimentConfig(**{k: doc[k] for k in doc})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.scenario not in _SCENARIOS:
            raise ConfigError(
                f"unknown scenario {self.scenario!r}; choose one of {_SCENARIOS}"
            )
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.kernel is not None:
            _check_keys(self.kernel, _KERNEL_KEYS, "config.kernel")
        if self.schedule is not None:
            _check_keys(self.schedule, _SCHEDULE_KEYS, "config.schedule")
        if self.multinomial is not None:
            _check_keys(self.multinomial, _MULTINOMIAL_KEYS, "config.multinomial")
        Generator(self.generator or {})

    def to_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "kernel": self.kernel,
            "generator": self.generator,
            "conditional": self.conditional,
            "q": self.q,
            "spot_check": self.spot_check,
        }
        if self.grid_size is not None:
            out["grid_size"] = self.grid_size
        if self.threads is not None:
            out["threads"] = self.threads
        if self.partition_m is not None:
            out["partition_m"] = self.partition_m
        if self.schedule is not None:
            out["schedule"] = self.schedule
        if self.multinomial is not None:
            out["multinomial"] = self.multinomial
        return out


def kernel_from_config(doc: dict, G: MeasureModel) -> Kernel:
    _check_keys(doc, _KERNEL_KEYS, "kernel")
    kind = doc.get("kind", "haar")
    if kind == "haar":
        if "level" in doc:
            level = int(doc["level"])
        else:
            k = int(doc.get("k", 256))
            level = int(np.log2(k))
            if (1 << level) != k:
                raise ConfigError(f"haar size {k} is not a power of 2; use haar_series")
        return haar_kernel(level, G)
    if kind == "haar_series":
        return HaarSeriesKernel(int(doc["k"]))
    if kind == "wavelet":
        return wavelet_kernel(int(doc["level"]), int(doc.get("dim", 1)), doc.get("family", "haar"))
    if kind == "fourier":
        return FourierKernel(int(doc["k"]), doc.get("variant", "circle"))
    if kind == "convolution":
        return ConvolutionKernel(float(doc["sigma"]), doc.get("mother", "box"))
    if kind == "spline_gram":
        return SplineGramKernel(uniform_knots(int(doc.get("cells", 16)), int(doc.get("order", 3))), int(doc.get("order", 3)), G)
    if kind == "constant":
        return ConstantKernel(float(doc.get("value", 0.0)), G.domain)
    raise ConfigError(f"unknown kernel kind {kind!r}")


def domain_tag_for_kernel(doc: dict) -> str:
    if doc.get("kind") == "fourier" and doc.get("variant", "circle") == "circle":
        return "circle"
    return "unit"


# ---------------------------------------------------------------------------
# replication engine
# ---------------------------------------------------------------------------


@dataclass
class RepContext:
    kind: str  # "unconditional" | "conditional"
    kernel: Kernel
    G: MeasureModel
    generator: Generator
    n: int
    seed: int
    eu: float
    scale: float
    kmu_grid: np.ndarray
    spot_check: int
    partition: Partition | None = None
    assignment: BinAssignment | None = None
    cond_mean: float = 0.0
    cond_sd: float = 0.0


_CTX: RepContext | None = None


def _init_worker(ctx: RepContext) -> None:
    global _CTX
    _CTX = ctx


def _run_chunk(bounds: tuple[int, int]) -> np.ndarray:
    ctx = _CTX
    lo, hi = bounds
    rows = np.empty((hi - lo, 6))
    n = ctx.n
    for r in range(lo, hi):
        # conditional and unconditional reps share the stream id, so a
        # single-cell partition reproduces the unconditional draws exactly
        rng = np.random.default_rng([ctx.seed, _STREAM_MAIN, r])
        if ctx.kind == "conditional":
            x = conditional_resample(ctx.partition, ctx.assignment, ctx.G, rng)
        else:
            x = ctx.G.sample(rng, n)
        lo_d, hi_d = ctx.G.domain.lo[0], ctx.G.domain.hi[0]
        b = ctx.generator.regression((x - lo_d) / (hi_d - lo_d))
        y = b + ctx.generator.draw_noise(rng, n)
        sample = Sample(x, y)
        u = u_stat(ctx.kernel, sample)
        if ctx.spot_check and r % ctx.spot_check == 0 and n <= 1024:
            ref = u_stat(ctx.kernel, sample, force_generic=True)
            if abs(u - ref) > 1e-12 * max(1.0, abs(ref)):
                raise AssertionError(
                    f"fast path disagrees with the pair-loop oracle at rep {r}: {u} vs {ref}"
                )
        if ctx.kind == "conditional":
            v = v_stat(ctx.kernel, sample, ctx.partition).total
            stat = (v - ctx.cond_mean) / ctx.cond_sd if ctx.cond_sd > 0 else 0.0
        else:
            v = u
            stat = (u - ctx.eu) / ctx.scale if ctx.scale > 0 else 0.0
        kmu_at = ctx.G.grid_lookup(ctx.kmu_grid, x)
        linear = 2.0 / n * float(np.sum(kmu_at * y - ctx.eu))
        rows[r - lo] = (r, stat, u, v, linear, u - ctx.eu - linear)
    return rows


def _run_reps(ctx: RepContext, reps: int, threads: int | None) -> np.ndarray:
    if threads is None:
        threads = min(os.cpu_count() or 1, 16)
    threads = max(1, int(threads))
    if threads == 1 or reps < 64:
        _init_worker(ctx)
        return _run_chunk((0, reps))
    bounds = []
    step = (reps + threads - 1) // threads
    for lo in range(0, reps, step):
        bounds.append((lo, min(lo + step, reps)))
    with ProcessPoolExecutor(
        max_workers=threads, initializer=_init_worker, initargs=(ctx,)
    ) as pool:
        parts = list(pool.map(_run_chunk, bounds))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# reports and runners
# ---------------------------------------------------------------------------


@dataclass
class NormalityReport:
    ks_distance: float
    empirical_var_ratio: float
    skew: float
    excess_kurtosis: float
    reps: int
    conditional: bool

    def to_json(self) -> dict:
        return {
            "ks_distance": self.ks_distance,
            "empirical_var_ratio": self.empirical_var_ratio,
            "skew": self.skew,
            "excess_kurtosis": self.excess_kurtosis,
            "reps": self.reps,
            "conditional": self.conditional,
        }


def _report_from_rows(
    rows: np.ndarray, raw_col: int, variance_scale: float, conditional: bool
) -> NormalityReport:
    stats = rows[:, 1]
    raw = rows[:, raw_col]
    centred = stats - stats.mean()
    sd = centred.std()
    skew = float((centred**3).mean() / sd**3) if sd > 0 else 0.0
    kurt = float((centred**4).mean() / sd**4 - 3.0) if sd > 0 else 0.0
    ratio = float(np.var(raw) / variance_scale) if variance_scale > 0 else 0.0
    return NormalityReport(
        ks_distance=ks_distance_to_normal(stats),
        empirical_var_ratio=ratio,
        skew=skew,
        excess_kurtosis=kurt,
        reps=rows.shape[0],
        conditional=conditional,
    )


def _resolve_inputs(config: ExperimentConfig):
    gen = Generator(config.generator or {}, domain_tag_for_kernel(config.kernel))
    grid = config.grid_size
    if grid is None:
        grid = 4096
        if gen.theta_info is not None:
            grid = len(gen.theta_info["cells"])
    G = gen.build_measure(grid, config.q)
    kernel = kernel_from_config(config.kernel, G)
    if config.scenario == "sq_density":
        gen.noise_spec = {"type": "two_point", "sd": 0.0}
        gen.regression_spec = {"type": "constant", "value": 1.0}
        G = gen.build_measure(grid, config.q)
    return gen, G, kernel


def run_normality(config: ExperimentConfig) -> tuple[NormalityReport, np.ndarray]:
    """Standardized-statistic replications and their distance to normal.

    The statistic is (U - E U) / sqrt(2 k_n / n^2) with the expectation and
    the weighted norm computed by quadrature.  Returns the report plus the
    per-replication rows (rep, statistic, u, v, linear, quadratic).
    """
    gen, G, kernel = _resolve_inputs(config)
    eu = expectation(kernel, G)
    kn = k_n_weighted(kernel, G)
    scale = np.sqrt(2.0 * kn) / config.n
    ctx = RepContext(
        kind="unconditional",
        kernel=kernel,
        G=G,
        generator=gen,
        n=config.n,
        seed=config.seed,
        eu=eu,
        scale=scale,
        kmu_grid=kernel.apply_grid(G, G.mu),
        spot_check=config.spot_check,
    )
    rows = _run_reps(ctx, config.reps, config.threads)
    return _report_from_rows(rows, 2, scale**2, False), rows


def run_conditional_normality(
    config: ExperimentConfig, partition: Partition | None = None
) -> tuple[NormalityReport, np.ndarray, dict]:
    """Replications of the restricted statistic given frozen bin counts.

    One multinomial count vector is drawn and frozen; every replication
    then places observations by the conditional law given those counts.
    The statistic is centred at E(V | counts) and scaled by sd(V | counts),
    both from per-cell quadrature.
    """
    gen, G, kernel = _resolve_inputs(config)
    if partition is None:
        m = config.partition_m
        if m is None:
            raise ConfigError("conditional run needs partition_m or a partition")
        partition = build_partition(kernel, int(m), G)
    rng_counts = np.random.default_rng([config.seed, _STREAM_COUNTS, 0])
    counts = rng_counts.multinomial(config.n, partition.probs)
    indices = np.repeat(np.arange(partition.M), counts)
    assignment = BinAssignment(indices, counts)
    stats = conditional_cell_stats(kernel, partition, G)
    cmean = conditional_mean(stats, counts, config.n)
    cvar = conditional_variance(stats, counts, config.n)
    ctx = RepContext(
        kind="conditional",
        kernel=kernel,
        G=G,
        generator=gen,
        n=config.n,
        seed=config.seed,
        eu=expectation(kernel, G),
        scale=np.sqrt(2.0 * stats.alpha2.sum()) / config.n,
        kmu_grid=kernel.apply_grid(G, G.mu),
        spot_check=config.spot_check,
        partition=partition,
        assignment=assignment,
        cond_mean=cmean,
        cond_sd=float(np.sqrt(max(cvar, 0.0))),
    )
    rows = _run_reps(ctx, config.reps, config.threads)
    extras = {
        "counts": counts,
        "conditional_mean": cmean,
        "conditional_var": cvar,
        "partition_m": partition.M,
    }
    report = _report_from_rows(rows, 3, ctx.scale**2, True)
    return report, rows, extras


def conditional_variance_ratios(
    config: ExperimentConfig, partition: Partition | None = None, draws: int = 50
) -> np.ndarray:
    """var(V | counts) / var(V) over freshly drawn multinomial count vectors."""
    gen, G, kernel = _resolve_inputs(config)
    if partition is None:
        if config.partition_m is None:
            raise ConfigError("need partition_m")
        partition = build_partition(kernel, int(config.partition_m), G)
    stats = conditional_cell_stats(kernel, partition, G)
    var_v = restricted_variance_exact(stats, config.n).var_total
    out = np.empty(draws)
    for d in range(draws):
        rng = np.random.default_rng([config.seed, _STREAM_RATIO, d])
        counts = rng.multinomial(config.n, partition.probs)
        out[d] = conditional_variance(stats, counts, config.n) / var_v
    return out


def run_multinomial_form(
    M: int,
    n: int,
    reps: int,
    seed: int,
    alpha: np.ndarray | None = None,
    probs: np.ndarray | None = None,
) -> dict:
    """Law-of-large-numbers check for the centred multinomial quadratic form.

    Evaluates sum_m alpha_m (N_m (N_m - 1) / (n(n-1) p_m^2) - 1) across
    replications, reports moments and the theoretical scale s_n, and
    verifies the Poisson-Charlier representation of the n^2-normalized
    form replication by replication.
    """
    p = np.full(M, 1.0 / M) if probs is None else np.asarray(probs, dtype=float)
    if np.any(p <= 0):
        raise ConfigError("cell probabilities must be positive")
    p = p / p.sum()
    a = np.full(M, 1.0 / M) if alpha is None else np.asarray(alpha, dtype=float)
    lam = n * p
    s_n_sq = 2.0 / n**2 * np.sum(a**2 / p**2) + 4.0 / n * np.sum(
        p * (a / p - a.sum()) ** 2
    )
    forms = np.empty(reps)
    charlier_residual = 0.0
    for r in range(reps):
        rng = np.random.default_rng([seed, _STREAM_MAIN, r])
        counts = rng.multinomial(n, p)
        forms[r] = float(
            np.sum(a * (counts * (counts - 1.0) / (n * (n - 1.0) * p**2) - 1.0))
        )
        form_n2 = float(np.sum(a * (counts * (counts - 1.0) / (n**2 * p**2) - 1.0)))
        recon = np.sqrt(2.0) * float(
            np.sum(a / lam * charlier_2(counts, lam))
        ) + 2.0 * float(
            np.sum(np.sqrt(lam) * (a / lam - a.sum() / n) * charlier_1(counts, lam))
        )
        charlier_residual = max(charlier_residual, abs(form_n2 - recon))
    return {
        "m": M,
        "n": n,
        "reps": reps,
        "mc_mean": float(forms.mean()),
        "mc_sd": float(forms.std(ddof=1)),
        "s_n": float(np.sqrt(s_n_sq)),
        "charlier_residual": charlier_residual,
    }


def run_rate_experiment(config: ExperimentConfig) -> dict:
    """Bias and RMSE of the squared-density estimator over a size schedule.

    For each n the dimension is k_n = round(n^(1/(2 beta + 1/2))); the
    generator is the dyadic-coefficient density with known integrated
    square, so bias and RMSE are measured against exact truth, and the
    log-log slope of RMSE against n is fitted by least squares.
    """
    sched = config.schedule or {}
    _check_keys(sched, _SCHEDULE_KEYS, "schedule")
    n_values = [int(v) for v in sched.get("n_values", [512, 1024, 2048, 4096])]
    if len(n_values) < 3:
        raise ConfigError("rate schedule needs at least 3 sample sizes")
    beta = float(sched.get("beta", 0.125))
    reps = int(sched.get("reps", 200))
    gen_spec = {
        "density": {
            "type": "haar_theta",
            "beta": beta,
            "c": float(sched.get("c", 0.08)),
            "levels": int(sched.get("levels", 20)),
        }
    }
    gen = Generator(gen_spec)
    info = gen.theta_info
    grid = len(info["cells"])
    G = gen.build_measure(grid)
    truth = info["truth"]
    rows = []
    for i, n in enumerate(n_values):
        k_n = schedule_dimension(n, beta)
        if k_n >= grid:
            raise ConfigError(
                f"k_n = {k_n} reaches the generator resolution {grid}; raise levels"
            )
        kernel = HaarSeriesKernel(k_n)
        vals = np.empty(reps)
        for r in range(reps):
            rng = np.random.default_rng([config.seed, _STREAM_RATE + i, r])
            x = G.sample(rng, n)
            vals[r] = u_stat(kernel, Sample(x, np.ones(n)))
        bias = float(vals.mean() - truth)
        rmse = float(np.sqrt(np.mean((vals - truth) ** 2)))
        rows.append(
            {
                "n": n,
                "k_n": k_n,
                "bias": bias,
                "rmse": rmse,
                "mc_se": float(vals.std(ddof=1) / np.sqrt(reps)),
                "expected_value": theta_partial_sum(info["theta"], k_n),
            }
        )
    logn = np.log([row["n"] for row in rows])
    logr = np.log([row["rmse"] for row in rows])
    slope = float(np.polyfit(logn, logr, 1)[0])
    return {
        "truth": truth,
        "beta": beta,
        "slope": slope,
        "theory_slope": -2.0 * beta / (2.0 * beta + 0.5),
        "rows": rows,
        "coefficient_scale": info["scale_applied"],
    }
