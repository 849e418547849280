"""Replication harness: coverage, oracle standard deviations, bandwidth choice.

Every replication draws a fresh assignment vector on the fixed population,
generates outcomes, draws a sample, fits the model and computes EHW,
cluster-robust and SHAC standard errors for every bandwidth of the grid.

Seeds: frozen components use ``child(master, 0)``, replication ``r`` uses
``child(master, 1, r)`` and the Monte Carlo estimand uses
``child(master, 2)``, all via :class:`numpy.random.SeedSequence` spawn keys,
so results do not depend on the number of worker threads.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm
from threadpoolctl import threadpool_limits

from ._seeding import FROZEN, REPLICATION, child
from .dgp import Dgp, DgpConfig, draw_frozen
from .estimation import (
    ModelSpec,
    ProbitError,
    RankDeficientError,
    build_design_matrix,
    compute_ape,
    fit_ols,
    fit_probit,
)
from .geometry import Population, generate_uniform_population, read_population_csv
from .sampling import DegenerateSampleError, SamplingDesign, draw_sample_with_redraws
from .variance import (
    KERNELS,
    MonteCarlo,
    PairIndex,
    PopulationModel,
    assignment_draws,
    ape_influence_rows,
    build_pair_index,
    cluster_meat,
    compute_estimand,
    ehw_meat,
    sandwich_se,
    shac_meat_grid,
)

__all__ = [
    "PopulationConfig",
    "VarianceConfig",
    "ExperimentConfig",
    "ExperimentResult",
    "EstimatorSummary",
    "SUMMARY_ROWS",
    "build_population",
    "run_experiment",
    "coverage_rate",
    "select_bandwidth",
    "estimator_summaries",
    "summarize",
    "write_summary_csv",
    "write_replications_csv",
]

log = logging.getLogger(__name__)

SUMMARY_ROWS = ("coeff", "std", "EHW", "EHW_CI", "cluster", "cluster_CI",
                "SHAC1", "SHAC1_CI", "SHAC2", "SHAC2_CI")
DEFAULT_ESTIMATORS = ("EHW", "cluster", "SHAC1", "SHAC2")


@dataclass(frozen=True)
class PopulationConfig:
    """Population size given either directly (``m``) or as ``dim``.

    ``dim`` is the side of the expected-sample lattice: the population holds
    ``round(dim**2 / (rho_u * rho_c))`` units so that the expected sample
    size is ``dim**2`` under every sampling scheme.  ``file`` loads a
    population CSV instead of generating one.
    """

    m: int | None = None
    dim: float | None = 18
    cluster_size: int = 3
    seed: int = 0
    order: str = "x"
    file: str | None = None

    def __post_init__(self):
        if self.m is not None and self.m < 1:
            raise ValueError("population.m must be positive")
        if self.dim is not None and self.dim <= 0:
            raise ValueError("population.dim must be positive")
        if self.cluster_size < 1:
            raise ValueError("population.cluster_size must be positive")

    def size(self, design: SamplingDesign) -> int:
        if self.m is not None:
            return int(self.m)
        if self.dim is None:
            raise ValueError("population needs m, dim or file")
        return int(round(self.dim**2 / design.rho))


@dataclass(frozen=True)
class VarianceConfig:
    kernel: str = "parzen"
    bandwidths: tuple = tuple(float(b) for b in range(1, 21))
    distance_mode: str = "unit"
    truncate: bool = False

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        bw = np.asarray(self.bandwidths, dtype=float)
        if bw.size == 0 or np.any(bw <= 0) or np.any(np.diff(bw) <= 0):
            raise ValueError("bandwidths must be positive and strictly ascending")
        if self.distance_mode not in ("unit", "cluster"):
            raise ValueError(f"unknown distance mode {self.distance_mode!r}")
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in bw))


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    dgp: DgpConfig = field(default_factory=DgpConfig)
    sampling: SamplingDesign = field(default_factory=SamplingDesign)
    model: ModelSpec = field(default_factory=ModelSpec)
    variance: VarianceConfig = field(default_factory=VarianceConfig)
    replications: int = 1000
    seed: int = 0
    level: float = 0.95
    truth: float | None = None
    truth_reps: int = 50_000
    min_units: int = 10
    max_redraws: int = 100
    label: str = ""

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not (0 < self.level < 1):
            raise ValueError("level must lie in (0, 1)")
        if self.truth_reps < 1:
            raise ValueError("truth_reps must be at least 1")
        if self.model.target == "ape" and self.dgp.design != "probit":
            log.warning("APE target on a non-binary outcome design")


@dataclass
class ExperimentResult:
    """Per-replication records plus the values needed to aggregate them.

    ``status`` is ``"ok"`` or a short failure reason.  SE arrays hold NaN
    for failed fits and negative-variance flags.
    """

    config: ExperimentConfig
    truth: float
    bandwidths: np.ndarray
    estimates: np.ndarray
    se_ehw: np.ndarray
    se_cluster: np.ndarray
    se_shac: np.ndarray
    sample_size: np.ndarray
    redraws: np.ndarray
    status: list

    @property
    def replications(self) -> int:
        return self.estimates.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.estimates)

    @property
    def mean_estimate(self) -> float:
        v = self.estimates[self.valid]
        return float(v.mean()) if v.size else math.nan

    @property
    def oracle_std(self) -> float:
        """Monte Carlo standard deviation; NaN when fewer than two valid fits."""
        v = self.estimates[self.valid]
        return float(v.std(ddof=1)) if v.size > 1 else math.nan

    @property
    def oracle_std_defined(self) -> bool:
        return math.isfinite(self.oracle_std)


@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    mean_se: float
    coverage: float
    valid: int
    excluded: int
    bandwidth: float | None = None


def coverage_rate(estimates, ses, true_value: float, level: float = 0.95):
    """Share of intervals ``estimate +- z * se`` that contain ``true_value``.

    Replications with a non-finite SE or estimate are excluded from the
    denominator.  Returns ``(rate, n_valid)``; ``rate`` is NaN when nothing
    is valid.
    """
    if not (0 < level < 1):
        raise ValueError("level must lie in (0, 1)")
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.shape != se.shape:
        raise ValueError("estimates and ses must have equal length")
    ok = np.isfinite(est) & np.isfinite(se)
    n = int(ok.sum())
    if n == 0:
        return math.nan, 0
    z = norm.ppf(0.5 + level / 2)
    hit = np.abs(est[ok] - true_value) <= z * se[ok]
    return float(hit.mean()), n


def select_bandwidth(se_by_bandwidth, oracle_std: float, rule: str = "mse") -> int:
    """Index of the bandwidth whose SEs best match the oracle standard deviation.

    ``se_by_bandwidth`` is ``(n_bandwidths, replications)`` (NaN ignored).
    ``"mse"`` minimizes the mean of ``(se - oracle)^2``; ``"bias"`` minimizes
    ``|mean(se) - oracle|``.  Ties go to the smaller (earlier) bandwidth.
    """
    se = np.atleast_2d(np.asarray(se_by_bandwidth, dtype=float))
    if se.shape[0] == 0:
        raise ValueError("bandwidth grid is empty")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if rule == "mse":
            crit = np.nanmean((se - oracle_std) ** 2, axis=1)
        elif rule == "bias":
            crit = np.abs(np.nanmean(se, axis=1) - oracle_std)
        else:
            raise ValueError(f"unknown bandwidth rule {rule!r}")
    crit = np.where(np.isfinite(crit), crit, np.inf)
    return int(np.argmin(crit))


def build_population(cfg: ExperimentConfig) -> Population:
    pc = cfg.population
    if pc.file:
        pop, _ = read_population_csv(pc.file)
        return pop
    return generate_uniform_population(pc.size(cfg.sampling), pc.cluster_size, pc.seed, pc.order)


def _estimate_truth(cfg: ExperimentConfig, dgp: Dgp) -> float:
    if cfg.truth is not None:
        return float(cfg.truth)
    mode = MonteCarlo(reps=cfg.truth_reps, seed=cfg.seed)
    spec = cfg.model
    theta = compute_estimand(dgp, spec, mode)
    if spec.target != "ape":
        return float(theta[spec.target_index])
    model = PopulationModel(dgp, spec)
    gamma = 0.0
    for x, w in assignment_draws(dgp, mode):
        X, _ = model.design(x)
        f, _ = model.ape_parts(theta, X)
        gamma += float(np.einsum("d,dm->", w, f)) / dgp.M
    return gamma


class _Replicator:
    """Everything a worker needs; holds only immutable shared state."""

    def __init__(self, cfg: ExperimentConfig, dgp: Dgp):
        self.cfg = cfg
        self.dgp = dgp
        self.pop = dgp.pop
        self.bw = np.asarray(cfg.variance.bandwidths)
        self.census_pairs: PairIndex | None = None
        if cfg.sampling.is_census:
            self.census_pairs = build_pair_index(
                self.pop.coords, self.bw.max(), cfg.variance.distance_mode,
                self.pop.cluster_label,
            )

    def __call__(self, r: int):
        cfg = self.cfg
        nb = self.bw.size
        out = dict(estimate=math.nan, ehw=math.nan, cluster=math.nan,
                   shac=np.full(nb, math.nan), n=0, redraws=0, status="ok")
        rs = child(cfg.seed, REPLICATION, r)
        x = self.dgp.draw_assignments(np.random.default_rng(child(rs, 0)))
        y = self.dgp.outcomes(x)
        try:
            sel, redraws = draw_sample_with_redraws(
                self.pop, cfg.sampling, child(rs, 1), cfg.min_units, cfg.max_redraws)
        except DegenerateSampleError:
            out["status"] = "degenerate_sample"
            return out
        idx = sel.index
        out["n"], out["redraws"] = idx.size, redraws
        coords = self.pop.coords[idx]
        clusters = self.pop.cluster_label[idx]
        spec = cfg.model
        try:
            X, ys = build_design_matrix(spec, x[idx], y[idx], coords, clusters)
            fit = fit_ols if spec.family == "ls" else fit_probit
            est = fit(X, ys, spec.column_names)
        except (RankDeficientError, ProbitError, np.linalg.LinAlgError, ValueError) as err:
            out["status"] = type(err).__name__
            return out
        if spec.target == "ape":
            ape = compute_ape(est, X, spec.slope_index)
            rows = ape_influence_rows(ape, est)
            Hinv = np.eye(1)
            target = 0
            out["estimate"] = float(ape.gamma_hat[0])
        else:
            rows = est.scores
            Hinv = np.linalg.inv(est.hessian)
            target = spec.target_index
            out["estimate"] = float(est.theta_hat[target])
        pairs = self.census_pairs
        if pairs is None:
            pairs = build_pair_index(coords, self.bw.max(), cfg.variance.distance_mode, clusters)
        n = idx.size
        trunc = cfg.variance.truncate
        meats = np.concatenate([
            ehw_meat(rows)[None], cluster_meat(rows, clusters)[None],
            shac_meat_grid(rows, cfg.variance.kernel, self.bw, pairs),
        ])
        se = sandwich_se(Hinv, meats, n, trunc)[:, target]
        out["ehw"], out["cluster"], out["shac"] = float(se[0]), float(se[1]), se[2:]
        return out


def run_experiment(cfg: ExperimentConfig, threads: int = 1, population: Population | None = None,
                   progress=None) -> ExperimentResult:
    """Run all replications of one scenario; deterministic for a given config."""
    pop = population if population is not None else build_population(cfg)
    frozen = draw_frozen(pop, cfg.dgp, child(cfg.seed, FROZEN))
    dgp = Dgp(pop, cfg.dgp, frozen)
    with threadpool_limits(limits=1):
        truth = _estimate_truth(cfg, dgp)
        worker = _Replicator(cfg, dgp)
        R = cfg.replications
        if threads <= 1:
            results = []
            for r in range(R):
                results.append(worker(r))
                if progress:
                    progress(r + 1, R)
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                results = list(ex.map(worker, range(R)))
    nb = len(cfg.variance.bandwidths)
    return ExperimentResult(
        config=cfg,
        truth=truth,
        bandwidths=np.asarray(cfg.variance.bandwidths),
        estimates=np.array([o["estimate"] for o in results]),
        se_ehw=np.array([o["ehw"] for o in results]),
        se_cluster=np.array([o["cluster"] for o in results]),
        se_shac=np.array([o["shac"] for o in results]).reshape(R, nb),
        sample_size=np.array([o["n"] for o in results], dtype=np.int64),
        redraws=np.array([o["redraws"] for o in results], dtype=np.int64),
        status=[o["status"] for o in results],
    )


def _summary(name, est, se, truth, level, bandwidth=None):
    cov, n = coverage_rate(est, se, truth, level)
    ok = np.isfinite(est) & np.isfinite(se)
    mean_se = float(se[ok].mean()) if n else math.nan
    return EstimatorSummary(name, mean_se, cov, n, est.size - n, bandwidth)


def estimator_summaries(result: ExperimentResult, estimators=DEFAULT_ESTIMATORS):
    """Mean SE and coverage for each named estimator.

    ``SHAC1`` / ``SHAC2`` are the SHAC estimators at the bandwidth chosen by
    the minimum-MSE / minimum-bias rule against the oracle std; ``SHAC@b``
    picks bandwidth ``b`` explicitly.
    """
    est, truth, level = result.estimates, result.truth, result.config.level
    out = []
    for name in estimators:
        if name == "EHW":
            out.append(_summary(name, est, result.se_ehw, truth, level))
        elif name == "cluster":
            out.append(_summary(name, est, result.se_cluster, truth, level))
        elif name in ("SHAC1", "SHAC2"):
            rule = "mse" if name == "SHAC1" else "bias"
            k = select_bandwidth(result.se_shac.T, result.oracle_std, rule)
            out.append(_summary(name, est, result.se_shac[:, k], truth, level,
                                float(result.bandwidths[k])))
        elif name.startswith("SHAC@"):
            b = float(name[5:])
            k = int(np.flatnonzero(np.isclose(result.bandwidths, b))[0])
            out.append(_summary(name, est, result.se_shac[:, k], truth, level, b))
        else:
            raise ValueError(f"unknown estimator {name!r}")
    return out


def summarize(result: ExperimentResult, estimators=DEFAULT_ESTIMATORS) -> list[tuple[str, float]]:
    """Table-shaped rows: ``coeff``, ``std``, then ``name`` / ``name_CI`` pairs."""
    rows = [("coeff", result.mean_estimate), ("std", result.oracle_std)]
    for s in estimator_summaries(result, estimators):
        rows.append((s.name, s.mean_se))
        rows.append((f"{s.name}_CI", s.coverage))
    return rows


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(v) else format(float(v), ".17g")
    return str(v)


def write_summary_csv(path, columns: list[tuple[str, list[tuple[str, float]]]]) -> None:
    """One statistic per row, one scenario per column."""
    stats = [name for name, _ in columns[0][1]] if columns else []
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic"] + [label for label, _ in columns])
        for k, stat in enumerate(stats):
            w.writerow([stat] + [_fmt(rows[k][1]) for _, rows in columns])


REPLICATION_COLUMNS = ("scenario", "replication", "estimator", "kernel", "bandwidth",
                       "distance_mode", "estimate", "se", "negative_variance",
                       "sample_size", "redraws", "status")


def write_replications_csv(path, results: list[tuple[str, ExperimentResult]]) -> None:
    """Long format: one row per replication x estimator x bandwidth."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPLICATION_COLUMNS)
        for label, res in results:
            vc = res.config.variance
            for r in range(res.replications):
                common = (_fmt(res.estimates[r]),)
                tail = (res.sample_size[r], res.redraws[r], res.status[r])
                ok = res.status[r] == "ok"

                def row(tag, kernel, bw, mode, se):
                    flag = int(ok and not math.isfinite(se))
                    w.writerow((label, r, tag, kernel, bw, mode) + common
                               + (_fmt(float(se)), flag) + tail)

                row("ehw", "", "", "", res.se_ehw[r])
                row("cluster", "", "", "", res.se_cluster[r])
                for k, b in enumerate(res.bandwidths):
                    row("shac", vc.kernel, _fmt(float(b)), vc.distance_mode, res.se_shac[r, k])
