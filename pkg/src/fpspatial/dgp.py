"""Population data-generating processes.

Frozen components (locations, heterogeneous coefficients, cluster effects,
error draws) are drawn once per population.  The only per-replication
randomness is the assignment vector, produced by :meth:`Dgp.draw_assignments`.

Five assignment designs are supported:

``individual_bernoulli``
    i.i.d. Bernoulli(0.5) assignments, outcome ``a*beta*x + c_g + u``.
``individual_threshold_mvn``
    Gaussian field with covariance ``p_x ** distance`` thresholded at its
    population mean; same outcome.
``cluster_sar``
    Cluster-level SAR field thresholded at its mean and broadcast to members;
    same outcome.
``spillover``
    Continuous Gaussian field; outcome ``2*beta*x + gamma*(W_x x) + eps``.
``probit``
    Continuous Gaussian field; outcome ``1{beta*x + c_g + u >= 0}``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._seeding import child
from .geometry import (
    Population,
    SpatialWeights,
    build_cluster_contiguity,
    build_contiguity,
    chebyshev_matrix,
)

__all__ = [
    "DESIGNS",
    "DgpConfig",
    "FrozenComponents",
    "SarSolveError",
    "SarSolver",
    "solve_sar",
    "PowerCovarianceSampler",
    "draw_power_covariance_normal",
    "threshold_at_mean",
    "draw_frozen",
    "gen_baseline_outcomes",
    "gen_cluster_sar_assignments",
    "gen_spillover_outcomes",
    "gen_probit_outcomes",
    "Dgp",
]

log = logging.getLogger(__name__)

DESIGNS = (
    "individual_bernoulli",
    "individual_threshold_mvn",
    "cluster_sar",
    "spillover",
    "probit",
)

# SAR systems up to this size use a sparse LU factorization; larger ones GMRES.
SPARSE_LU_MAX = 5000


class SarSolveError(RuntimeError):
    pass


class SarSolver:
    """Reusable solver for ``(I - p W) v = shock``."""

    def __init__(self, W, p: float, method: str = "auto", tol: float = 1e-10):
        if abs(p) >= 1:
            raise ValueError(f"|p| must be < 1 for a solvable SAR system, got {p}")
        A = W.matrix if isinstance(W, SpatialWeights) else sp.csr_matrix(W)
        n = A.shape[0]
        self.p = float(p)
        self.tol = tol
        self.W = sp.csr_matrix(A)
        self.system = sp.csc_matrix(sp.identity(n) - self.p * self.W)
        if method == "auto":
            method = "lu" if n <= SPARSE_LU_MAX else "iterative"
        self.method = method
        self._lu = spla.splu(self.system) if (method == "lu" and self.p != 0) else None

    def solve(self, shock: np.ndarray) -> np.ndarray:
        shock = np.asarray(shock, dtype=float)
        if self.p == 0:
            return shock.copy()
        if self._lu is not None:
            v = self._lu.solve(shock)
        elif shock.ndim == 1:
            v = self._iterative(shock)
        else:
            v = np.column_stack([self._iterative(shock[:, k]) for k in range(shock.shape[1])])
        self._check(v, shock)
        return v

    def _iterative(self, b):
        v, info = spla.gmres(self.system, b, rtol=1e-13, atol=0.0, restart=50, maxiter=1000)
        if info != 0:
            res = np.max(np.abs(self.system @ v - b))
            raise SarSolveError(f"GMRES did not converge (info={info}, residual={res:.3e})")
        return v

    def _check(self, v, shock):
        res = np.max(np.abs(self.system @ v - shock), initial=0.0)
        scale = max(np.max(np.abs(shock), initial=0.0), 1.0)
        if not np.isfinite(res) or res > self.tol * scale:
            raise SarSolveError(
                f"SAR residual {res:.3e} exceeds {self.tol:g} * {scale:.3e} (method={self.method})"
            )


def solve_sar(W, p: float, shock) -> np.ndarray:
    """Solve ``v = p W v + shock``."""
    return SarSolver(W, p).solve(shock)


class PowerCovarianceSampler:
    """Zero-mean Gaussian field with ``Cov(i, j) = p ** nu(i, j)``.

    The covariance is Cholesky-factored once; on failure a diagonal ``jitter``
    is added and the factorization retried a single time.
    """

    def __init__(self, coords, p: float, jitter: float = 1e-10):
        if not (0 <= p < 1):
            raise ValueError(f"p must lie in [0, 1), got {p}")
        coords = coords.coords if isinstance(coords, Population) else np.asarray(coords, float)
        self.n = coords.shape[0]
        self.p = float(p)
        self.chol = None
        if self.p > 0:
            cov = np.power(self.p, chebyshev_matrix(coords))
            try:
                self.chol = sla.cholesky(cov, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                log.warning("power covariance not positive definite; retrying with jitter %g", jitter)
                cov[np.diag_indices_from(cov)] += jitter
                try:
                    self.chol = sla.cholesky(cov, lower=True, check_finite=False)
                except np.linalg.LinAlgError as err:
                    raise np.linalg.LinAlgError(
                        f"power covariance (p={p}) is not positive definite even with jitter "
                        f"{jitter:g}; increase the jitter"
                    ) from err

    def draw(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """One field of length ``n``, or ``size`` fields as rows of a ``(size, n)`` array."""
        if size is None:
            z = rng.standard_normal(self.n)
            return z if self.chol is None else self.chol @ z
        z = rng.standard_normal((size, self.n))
        return z if self.chol is None else z @ self.chol.T


def draw_power_covariance_normal(pop, p: float, seed, jitter: float = 1e-10) -> np.ndarray:
    return PowerCovarianceSampler(pop, p, jitter).draw(np.random.default_rng(seed))


def threshold_at_mean(xi) -> np.ndarray:
    """``1{xi_i >= mean(xi)}`` along the last axis."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] == 0:
        raise ValueError("cannot threshold an empty vector")
    return (xi >= xi.mean(axis=-1, keepdims=True)).astype(float)


@dataclass(frozen=True)
class DgpConfig:
    design: str = "individual_bernoulli"
    p_u: float = 0.3
    p_x: float = 0.0
    gamma: float = 0.0
    a: float = 2.0
    cutoff_u: float = float(np.sqrt(2.0))
    cutoff_x: float = 0.5
    row_standardize_x: bool = True
    cluster_cutoff: float = 2.0
    bernoulli_p: float = 0.5
    jitter: float = 1e-10

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; expected one of {DESIGNS}")
        if not (0 <= self.p_u < 1):
            raise ValueError(f"p_u must lie in [0, 1), got {self.p_u}")
        if not (0 <= self.p_x < 1):
            raise ValueError(f"p_x must lie in [0, 1), got {self.p_x}")
        if not (0 < self.bernoulli_p < 1):
            raise ValueError("bernoulli_p must lie in (0, 1)")

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @property
    def binary_assignments(self) -> bool:
        return self.design in ("individual_bernoulli", "individual_threshold_mvn", "cluster_sar")


@dataclass(frozen=True)
class FrozenComponents:
    """Non-stochastic population attributes shared by every replication."""

    beta: np.ndarray
    c: np.ndarray
    eps: np.ndarray
    u: np.ndarray
    cluster_index: np.ndarray = field(repr=False)

    @property
    def c_unit(self) -> np.ndarray:
        return self.c[self.cluster_index]


def split_beta(M: int) -> np.ndarray:
    """First ``ceil(M/2)`` units in index order get +1, the rest -1."""
    beta = -np.ones(M)
    beta[: (M + 1) // 2] = 1.0
    return beta


def draw_frozen(pop: Population, config: DgpConfig, seed) -> FrozenComponents:
    """Draw cluster effects and unit errors; build the SAR errors ``u``.

    Cluster effects and ``eps`` come from separate child streams of ``seed``,
    so the population size of one does not shift the other.
    """
    c = np.random.default_rng(child(seed, 0)).standard_normal(pop.num_clusters)
    eps = np.random.default_rng(child(seed, 1)).standard_normal(pop.size)
    if config.p_u == 0:
        u = eps.copy()
    else:
        Wu = build_contiguity(pop.coords, config.cutoff_u, row_standardize=True)
        u = SarSolver(Wu, config.p_u).solve(eps)
    arrays = dict(beta=split_beta(pop.size), c=c, eps=eps, u=u)
    for v in arrays.values():
        v.setflags(write=False)
    return FrozenComponents(cluster_index=pop.cluster_index, **arrays)


def gen_baseline_outcomes(frozen: FrozenComponents, x, a: float) -> np.ndarray:
    """``a * beta * x + c_g + u``; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != frozen.beta.shape[0]:
        raise ValueError("assignment length does not match the population")
    return a * frozen.beta * x + frozen.c_unit + frozen.u


def gen_cluster_sar_assignments(Wg, p_x: float, cluster_index, seed=None, *, rng=None,
                                solver: SarSolver | None = None, size: int | None = None):
    """Cluster SAR field thresholded at its cluster-level mean, broadcast to units."""
    solver = solver or SarSolver(Wg, p_x)
    rng = rng or np.random.default_rng(seed)
    G = solver.W.shape[0]
    if size is None:
        xi = rng.standard_normal(G)
        xg = threshold_at_mean(solver.solve(xi))
        return xg[np.asarray(cluster_index)]
    xi = rng.standard_normal((size, G))
    xg = threshold_at_mean(solver.solve(xi.T).T)
    return xg[:, np.asarray(cluster_index)]


def gen_spillover_outcomes(frozen: FrozenComponents, x, Wx, gamma: float) -> np.ndarray:
    """``2 * beta * x + gamma * (W_x x) + eps``."""
    x = np.asarray(x, dtype=float)
    A = Wx.matrix if isinstance(Wx, SpatialWeights) else Wx
    spill = (A @ x.T).T if x.ndim > 1 else A @ x
    return 2.0 * frozen.beta * x + gamma * spill + frozen.eps


def gen_probit_outcomes(frozen: FrozenComponents, x) -> np.ndarray:
    """``1{beta * x + c_g + u >= 0}``."""
    x = np.asarray(x, dtype=float)
    return (frozen.beta * x + frozen.c_unit + frozen.u >= 0).astype(float)


class Dgp:
    """A population together with its frozen components and cached operators."""

    def __init__(self, pop: Population, config: DgpConfig, frozen: FrozenComponents):
        self.pop = pop
        self.config = config
        self.frozen = frozen
        d = config.design
        self._mvn = None
        self._cluster_solver = None
        self.Wx = None
        if d in ("individual_threshold_mvn", "spillover", "probit"):
            self._mvn = PowerCovarianceSampler(pop.coords, config.p_x, config.jitter)
        if d == "cluster_sar":
            Wg = build_cluster_contiguity(pop, config.cluster_cutoff, row_standardize=True)
            self._cluster_solver = SarSolver(Wg, config.p_x)
        if d == "spillover":
            self.Wx = build_contiguity(pop.coords, config.cutoff_x,
                                       row_standardize=config.row_standardize_x)

    @classmethod
    def from_seed(cls, pop: Population, config: DgpConfig, seed) -> "Dgp":
        return cls(pop, config, draw_frozen(pop, config, seed))

    @property
    def M(self) -> int:
        return self.pop.size

    def draw_assignments(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Assignment vector (or ``size`` of them stacked as rows)."""
        d = self.config.design
        shape = (self.M,) if size is None else (size, self.M)
        if d == "individual_bernoulli":
            return (rng.random(shape) < self.config.bernoulli_p).astype(float)
        if d == "individual_threshold_mvn":
            return threshold_at_mean(self._mvn.draw(rng, size))
        if d == "cluster_sar":
            return gen_cluster_sar_assignments(
                None, self.config.p_x, self.pop.cluster_index, rng=rng,
                solver=self._cluster_solver, size=size,
            )
        return self._mvn.draw(rng, size)

    def outcomes(self, x) -> np.ndarray:
        d = self.config.design
        if d == "spillover":
            return gen_spillover_outcomes(self.frozen, x, self.Wx, self.config.gamma)
        if d == "probit":
            return gen_probit_outcomes(self.frozen, x)
        return gen_baseline_outcomes(self.frozen, x, self.config.a)
