"""Sandwich variance estimators and the finite-population variance oracle.

Sample side: kernel weights, EHW / cluster / SHAC meat matrices (unit- or
cluster-distance), sandwich assembly and APE influence rows.

Population side: the estimand ``theta*`` and the decomposition of the
score variance into own, same-cluster and cross-cluster pieces, with
expectations taken over the assignment distribution either exhaustively
(:class:`Enumerate`) or by simulation (:class:`MonteCarlo`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._seeding import ESTIMAND, child
from .dgp import Dgp
from .estimation import (
    ApeResult,
    EstimationResult,
    ModelSpec,
    ProbitError,
    _probit_parts,
)
from .geometry import build_contiguity, cluster_pairs, pairwise_neighbors
from .sampling import SamplingDesign

__all__ = [
    "KERNELS",
    "KernelSpec",
    "VarianceEstimate",
    "PairIndex",
    "PopulationDecomposition",
    "Enumerate",
    "MonteCarlo",
    "kernel_values",
    "kernel_weight",
    "build_pair_index",
    "ehw_meat",
    "cluster_meat",
    "shac_meat",
    "shac_meat_grid",
    "sandwich",
    "sandwich_se",
    "ape_influence_rows",
    "PopulationModel",
    "assignment_draws",
    "compute_estimand",
    "population_decomposition",
]

KERNELS = ("parzen", "bartlett", "uniform")
DISTANCE_MODES = ("unit", "cluster")
# Parzen: 1 - c u^2 + c u^3 on [0, 1/2], 2 (1 - u)^3 on (1/2, 1]
PARZEN_COEF = 6.0


def kernel_values(shape: str, u) -> np.ndarray:
    """Kernel evaluated at normalized distances ``u = distance / bandwidth``."""
    u = np.abs(np.asarray(u, dtype=float))
    if shape == "parzen":
        inner = 1.0 - PARZEN_COEF * u**2 + PARZEN_COEF * u**3
        outer = 2.0 * (1.0 - u) ** 3
        return np.where(u <= 0.5, inner, np.where(u <= 1.0, outer, 0.0))
    if shape == "bartlett":
        return np.maximum(0.0, 1.0 - u)
    if shape == "uniform":
        return (u <= 1.0).astype(float)
    raise ValueError(f"unknown kernel {shape!r}; expected one of {KERNELS}")


@dataclass(frozen=True)
class KernelSpec:
    shape: str = "parzen"
    bandwidth: float = 1.0
    distance_mode: str = "unit"

    def __post_init__(self):
        if self.shape not in KERNELS:
            raise ValueError(f"unknown kernel {self.shape!r}; expected one of {KERNELS}")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError("bandwidth must be positive and finite")
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"unknown distance mode {self.distance_mode!r}")


def kernel_weight(spec: KernelSpec, distance: float) -> float:
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return float(kernel_values(spec.shape, distance / spec.bandwidth))


@dataclass(frozen=True)
class VarianceEstimate:
    meat: np.ndarray
    sandwich: np.ndarray
    standard_errors: np.ndarray
    flags: np.ndarray


def _sym(A):
    return (A + np.swapaxes(A, -1, -2)) / 2


def ehw_meat(scores) -> np.ndarray:
    """``(1/N) sum_i m_i m_i'``."""
    m = np.atleast_2d(np.asarray(scores, dtype=float))
    return _sym(m.T @ m / m.shape[0])


def _group_sums(scores, groups, n_groups):
    out = np.zeros((n_groups, scores.shape[1]))
    np.add.at(out, groups, scores)
    return out


def cluster_meat(scores, clusters) -> np.ndarray:
    """``(1/N) sum_g S_g S_g'`` with ``S_g`` the within-cluster score sum."""
    m = np.atleast_2d(np.asarray(scores, dtype=float))
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    S = _group_sums(m, inv, int(inv.max()) + 1)
    return _sym(S.T @ S / m.shape[0])


@dataclass(frozen=True)
class PairIndex:
    """Kernel-sum pairs over the rows of a score matrix.

    Rows are aggregated into ``groups`` (units themselves in unit-distance
    mode, clusters in cluster-distance mode); ``a < b`` index groups and the
    pairs are sorted by ``dist`` so a smaller bandwidth uses a prefix.
    """

    groups: np.ndarray
    n_groups: int
    a: np.ndarray
    b: np.ndarray
    dist: np.ndarray
    radius: float
    distance_mode: str

    def count_within(self, r: float) -> int:
        return int(np.searchsorted(self.dist, r, side="right"))


def build_pair_index(coords, radius: float, distance_mode: str = "unit",
                     clusters=None) -> PairIndex:
    """Pairs within ``radius`` under unit distance or cluster distance.

    Cluster distance between two clusters is the smallest Chebyshev distance
    between their members; members of one cluster are at distance zero.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = coords.shape[0]
    if distance_mode == "unit":
        nb = pairwise_neighbors(coords, radius)
        return PairIndex(np.arange(n), n, nb.i, nb.j, nb.dist, float(radius), "unit")
    if distance_mode != "cluster":
        raise ValueError(f"unknown distance mode {distance_mode!r}")
    if clusters is None:
        raise ValueError("cluster-distance mode needs cluster labels")
    uniq, inv = np.unique(np.asarray(clusters), return_inverse=True)
    _, g, h, d = cluster_pairs(coords, inv, radius)
    order = np.lexsort((h, g, d))
    return PairIndex(inv, uniq.size, g[order], h[order], d[order], float(radius), "cluster")


def shac_meat_grid(scores, shape: str, bandwidths, pairs: PairIndex) -> np.ndarray:
    """SHAC meats for every bandwidth in ``bandwidths`` (ascending or not).

    ``pairs`` must have been built with a radius at least ``max(bandwidths)``.
    Returns an array of shape ``(len(bandwidths), k, k)``.
    """
    m = np.atleast_2d(np.asarray(scores, dtype=float))
    n = m.shape[0]
    bandwidths = np.asarray(bandwidths, dtype=float)
    if bandwidths.size and bandwidths.max() > pairs.radius * (1 + 1e-12):
        raise ValueError("pair index radius is smaller than the largest bandwidth")
    if pairs.distance_mode == "unit":
        S = m
    else:
        S = _group_sums(m, pairs.groups, pairs.n_groups)
    own = S.T @ S
    k = m.shape[1]
    out = np.empty((bandwidths.size, k, k))
    n_max = pairs.count_within(bandwidths.max()) if bandwidths.size else 0
    Sa = S[pairs.a[:n_max]]
    Sb = S[pairs.b[:n_max]]
    for idx, bw in enumerate(bandwidths):
        cnt = pairs.count_within(bw)
        w = kernel_values(shape, pairs.dist[:cnt] / bw)
        C = (Sa[:cnt] * w[:, None]).T @ Sb[:cnt]
        out[idx] = own + C + C.T
    return _sym(out / n)


def shac_meat(scores, spec: KernelSpec, coords=None, clusters=None,
              pairs: PairIndex | None = None) -> np.ndarray:
    """``(1/N) sum_i sum_j w(nu(i,j)/b) m_i m_j'`` for one kernel spec."""
    if pairs is None:
        if coords is None:
            raise ValueError("need coords or a precomputed pair index")
        pairs = build_pair_index(coords, spec.bandwidth, spec.distance_mode, clusters)
    elif pairs.distance_mode != spec.distance_mode:
        raise ValueError("pair index distance mode does not match the kernel spec")
    return shac_meat_grid(scores, spec.shape, [spec.bandwidth], pairs)[0]


def _truncate_psd(meat):
    vals, vecs = np.linalg.eigh(meat)
    return _sym((vecs * np.maximum(vals, 0.0)) @ vecs.T)


def sandwich(H, meat, N: int, truncate: bool = False) -> VarianceEstimate:
    """``V = H^-1 meat H^-T`` and standard errors ``sqrt(V_kk / N)``.

    Negative diagonal entries are flagged and their SE set to NaN; the raw
    value stays in ``sandwich``.  ``truncate`` clips negative meat
    eigenvalues first.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    meat = np.atleast_2d(np.asarray(meat, dtype=float))
    if truncate:
        meat = _truncate_psd(meat)
    Hinv = np.linalg.inv(H)
    V = Hinv @ meat @ Hinv.T
    diag = np.diag(V)
    flags = diag < 0
    se = np.where(flags, np.nan, np.sqrt(np.abs(diag) / N))
    return VarianceEstimate(meat, V, se, flags)


def sandwich_se(Hinv, meats, N: int, truncate: bool = False) -> np.ndarray:
    """Standard errors for a stack of meats ``(..., k, k)``; NaN where negative."""
    meats = np.asarray(meats, dtype=float)
    if truncate:
        shp = meats.shape
        meats = np.stack([_truncate_psd(mt) for mt in meats.reshape(-1, *shp[-2:])]).reshape(shp)
    V = Hinv @ meats @ Hinv.T
    diag = np.diagonal(V, axis1=-2, axis2=-1)
    with np.errstate(invalid="ignore"):
        return np.where(diag < 0, np.nan, np.sqrt(np.abs(diag) / N))


def ape_influence_rows(ape: ApeResult, est: EstimationResult) -> np.ndarray:
    """``psi_i = f_i - gamma_hat - F_hat H^-1 m_i`` as an ``N x q`` matrix."""
    adj = np.linalg.solve(est.hessian, est.scores.T)
    return ape.f_rows - ape.gamma_hat[None, :] - (ape.F_hat @ adj).T


# ---------------------------------------------------------------- population


@dataclass(frozen=True)
class Enumerate:
    """Exact expectations over all ``2^M`` i.i.d. Bernoulli assignment vectors."""

    max_units: int = 12


@dataclass(frozen=True)
class MonteCarlo:
    """Expectations approximated by ``reps`` assignment draws."""

    reps: int = 50_000
    seed: object = 0
    chunk: int = 250


def assignment_draws(dgp: Dgp, mode):
    """Yield ``(x_batch, weights)``; weights sum to one over the whole stream.

    A fresh call restarts the stream, so repeated passes see the same draws.
    """
    M = dgp.M
    if isinstance(mode, Enumerate):
        if dgp.config.design != "individual_bernoulli":
            raise ValueError("enumeration is only available for i.i.d. Bernoulli assignments")
        if M > mode.max_units:
            raise ValueError(f"enumeration refused: {M} units exceeds the cap of {mode.max_units}")
        codes = np.arange(2**M)
        bits = ((codes[:, None] >> np.arange(M)) & 1).astype(float)
        p = dgp.config.bernoulli_p
        ones = bits.sum(axis=1)
        yield bits, p**ones * (1 - p) ** (M - ones)
        return
    if not isinstance(mode, MonteCarlo):
        raise TypeError(f"unknown expectation mode {mode!r}")
    rng = np.random.default_rng(child(mode.seed, ESTIMAND))
    done = 0
    while done < mode.reps:
        n = min(mode.chunk, mode.reps - done)
        yield dgp.draw_assignments(rng, n), np.full(n, 1.0 / mode.reps)
        done += n


class PopulationModel:
    """The regression evaluated on every unit of the population.

    The spillover regressor uses contiguity among *all* units and demeaning
    uses full clusters, i.e. the census version of the sample regression.
    """

    def __init__(self, dgp: Dgp, spec: ModelSpec):
        self.dgp = dgp
        self.spec = spec
        pop = dgp.pop
        self.Ws = (build_contiguity(pop.coords, spec.spillover_cutoff,
                                    row_standardize=spec.spillover_row_standardize)
                   if spec.spillover else None)
        G = pop.num_clusters
        C = sp.csr_matrix((np.ones(pop.size), (pop.cluster_index, np.arange(pop.size))),
                          shape=(G, pop.size))
        self.membership = C
        sizes = np.asarray(C.sum(axis=1)).ravel()
        self.averager = sp.csr_matrix(C.T @ sp.diags(1.0 / sizes) @ C) if spec.demean else None

    def _demean(self, a):
        return a - (self.averager @ a.T).T

    def design(self, x):
        """``(X, y)`` with shapes ``(D, M, k)`` and ``(D, M)`` for a batch of assignments."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(self.dgp.outcomes(x))
        cols = []
        if self.spec.intercept and not self.spec.demean:
            cols.append(np.ones_like(x))
        cols.append(x)
        if self.Ws is not None:
            cols.append((self.Ws.matrix @ x.T).T)
        if self.spec.demean:
            cols = [self._demean(c) for c in cols]
            y = self._demean(y)
        return np.stack(cols, axis=-1), y

    def scores(self, theta, X, y):
        """Per-unit scores ``(D, M, k)`` and per-unit objective curvature weights."""
        z = X @ theta
        if self.spec.family == "ls":
            return -X * (y - z)[..., None], np.ones_like(z)
        _, dq, d2q = _probit_parts(theta, X.reshape(-1, X.shape[-1]), y.ravel())
        return X * dq.reshape(z.shape)[..., None], d2q.reshape(z.shape)

    def cluster_sums(self, rows):
        """Within-cluster sums of ``rows`` (D, M, k) -> (D, G, k)."""
        D, M, k = rows.shape
        flat = rows.transpose(1, 0, 2).reshape(M, D * k)
        return np.asarray(self.membership @ flat).reshape(-1, D, k).transpose(1, 0, 2)

    def ape_parts(self, theta, X):
        """``f`` (D, M) and its gradient (D, M, k) for the APE of ``x``."""
        s = self.spec.slope_index
        z = X @ theta
        phi = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
        f = phi * theta[s]
        grad = (-z * phi * theta[s])[..., None] * X
        grad[..., s] += phi
        return f, grad


def compute_estimand(dgp: Dgp, spec: ModelSpec, mode=None, max_iter: int = 100,
                     tol: float = 1e-10) -> np.ndarray:
    """Minimizer of the population average of the expected objective.

    Least squares solves the normal equations built from expected moments;
    probit runs Newton on the expected log-likelihood.
    """
    mode = mode or MonteCarlo()
    model = PopulationModel(dgp, spec)
    k = len(spec.column_names)
    M = dgp.M
    if spec.family == "ls":
        A = np.zeros((k, k))
        b = np.zeros(k)
        for x, w in assignment_draws(dgp, mode):
            X, y = model.design(x)
            A += np.einsum("d,dmk,dml->kl", w, X, X) / M
            b += np.einsum("d,dmk,dm->k", w, X, y) / M
        return np.linalg.solve(A, b)
    theta = np.zeros(k)
    for _ in range(max_iter):
        g = np.zeros(k)
        H = np.zeros((k, k))
        for x, w in assignment_draws(dgp, mode):
            X, y = model.design(x)
            m, d2q = model.scores(theta, X, y)
            g += np.einsum("d,dmk->k", w, m) / M
            H += np.einsum("d,dm,dmk,dml->kl", w, d2q, X, X) / M
        if np.max(np.abs(g)) <= tol:
            return theta
        step = np.linalg.solve(H, g)
        theta = theta - step
        if np.linalg.norm(step) <= tol:
            return theta
    raise ProbitError("Newton on the expected objective did not converge", theta)


@dataclass(frozen=True)
class PopulationDecomposition:
    delta_ehw: np.ndarray
    delta_cluster: np.ndarray
    delta_spatial: np.ndarray
    delta_E: np.ndarray
    delta_EC: np.ndarray
    delta_ES: np.ndarray
    H: np.ndarray
    S: np.ndarray
    V: np.ndarray
    theta_star: np.ndarray
    gamma_star: float | None = None


def _moment_pass(model, theta, mode, rows_fn):
    """Accumulate the own / same-cluster / all-pair second moments and the means."""
    M = model.dgp.M
    mean = None
    own = tot = clus = None
    for x, w in assignment_draws(model.dgp, mode):
        X, y = model.design(x)
        r = rows_fn(X, y)
        if mean is None:
            k = r.shape[-1]
            mean = np.zeros((M, k))
            own, clus, tot = (np.zeros((k, k)) for _ in range(3))
        mean += np.einsum("d,dmk->mk", w, r)
        own += np.einsum("d,dmk,dml->kl", w, r, r)
        cs = model.cluster_sums(r)
        clus += np.einsum("d,dgk,dgl->kl", w, cs, cs)
        t = r.sum(axis=1)
        tot += np.einsum("d,dk,dl->kl", w, t, t)
    return mean, own, clus, tot


def population_decomposition(dgp: Dgp, spec: ModelSpec, design: SamplingDesign,
                             theta_star=None, mode=None, ape: bool = False
                             ) -> PopulationDecomposition:
    """Population variance pieces of the (sampled) score sum.

    ``S = D_ehw + rho_u D_cluster + rho D_spatial - rho (D_E + D_EC + D_ES)``
    with ``rho = rho_u * rho_c``, ``V = H^-1 S H^-1``.  With ``ape=True`` the
    rows are the APE influence rows ``f_i - gamma* - F H^-1 m_i`` and ``V = S``.
    """
    mode = mode or MonteCarlo()
    model = PopulationModel(dgp, spec)
    if theta_star is None:
        theta_star = compute_estimand(dgp, spec, mode)
    theta_star = np.asarray(theta_star, dtype=float)
    M = dgp.M
    k = theta_star.size

    H = np.zeros((k, k))
    F = np.zeros(k)
    gamma = 0.0
    for x, w in assignment_draws(dgp, mode):
        X, y = model.design(x)
        _, d2q = model.scores(theta_star, X, y)
        H += np.einsum("d,dm,dmk,dml->kl", w, d2q, X, X) / M
        if ape:
            f, grad = model.ape_parts(theta_star, X)
            gamma += float(np.einsum("d,dm->", w, f)) / M
            F += np.einsum("d,dmk->k", w, grad) / M
    H = _sym(H)

    if ape:
        FHinv = np.linalg.solve(H, F)

        def rows_fn(X, y):
            m, _ = model.scores(theta_star, X, y)
            f, _ = model.ape_parts(theta_star, X)
            return (f - gamma - m @ FHinv)[..., None]
    else:
        def rows_fn(X, y):
            return model.scores(theta_star, X, y)[0]

    mean, own, clus, tot = _moment_pass(model, theta_star, mode, rows_fn)
    e_own = mean.T @ mean
    cs = np.asarray(model.membership @ mean)
    e_clus = cs.T @ cs
    t = mean.sum(axis=0)
    e_tot = np.outer(t, t)

    d_ehw = _sym(own) / M
    d_cluster = _sym(clus - own) / M
    d_spatial = _sym(tot - clus) / M
    d_E = _sym(e_own) / M
    d_EC = _sym(e_clus - e_own) / M
    d_ES = _sym(e_tot - e_clus) / M
    rho_u, rho = design.rho_u, design.rho
    S = d_ehw + rho_u * d_cluster + rho * d_spatial - rho * (d_E + d_EC + d_ES)
    if ape:
        V = S
    else:
        Hinv = np.linalg.inv(H)
        V = _sym(Hinv @ S @ Hinv.T)
    return PopulationDecomposition(d_ehw, d_cluster, d_spatial, d_E, d_EC, d_ES, H, S, V,
                                   theta_star, gamma if ape else None)
