"""Self-test properties run by ``fpspatial check``.

Each property is a small exact computation with a stated tolerance: kernel
identities, meat degeneracies, and the enumeration oracles on a six-unit
population with two clusters.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import variance as V
from .dgp import Dgp, DgpConfig
from .estimation import ModelSpec
from .geometry import Population
from .sampling import SamplingDesign

__all__ = ["CheckResult", "PROPERTIES", "run_checks", "small_population",
           "enumerate_sampled_score_variance"]

DESIGNS = ((1.0, 1.0), (1.0, 0.5), (0.5, 1.0), (0.5, 0.5))


@dataclass(frozen=True)
class CheckResult:
    name: str
    tolerance: float
    error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def small_population(seed: int = 5) -> Dgp:
    """Six units in two clusters of three with i.i.d. Bernoulli assignments."""
    coords = np.array([[0, 0], [1, 0], [0, 1], [3, 0], [3, 1], [4, 0.5]], dtype=float)
    pop = Population(coords, [1, 1, 1, 2, 2, 2], 2)
    return Dgp.from_seed(pop, DgpConfig("individual_bernoulli"), seed)


def enumerate_sampled_score_variance(dgp: Dgp, spec: ModelSpec, design: SamplingDesign,
                                     theta) -> np.ndarray:
    """Variance of ``M^-1/2 sum_i (R_i m_i / sqrt(rho) - sqrt(rho) E m_i)``.

    Brute force over every assignment vector and every cluster / unit
    sampling outcome, with per-unit scores computed unit by unit.
    """
    if dgp.config.design != "individual_bernoulli":
        raise ValueError("joint enumeration needs i.i.d. Bernoulli assignments")
    M, G = dgp.M, dgp.pop.num_clusters
    p = dgp.config.bernoulli_p
    rc, ru, rho = design.rho_c, design.rho_u, design.rho
    cl = dgp.pop.cluster_index
    theta = np.asarray(theta, dtype=float)
    model = V.PopulationModel(dgp, spec)
    px, ms = [], []
    for bits in itertools.product((0.0, 1.0), repeat=M):
        x = np.array(bits)
        X, y = model.design(x)
        X, y = X[0], y[0]
        m = np.array([-X[i] * (y[i] - X[i] @ theta) for i in range(M)])
        px.append(np.prod([p if b else 1 - p for b in bits]))
        ms.append(m)
    Em = sum(w * m for w, m in zip(px, ms))
    k = theta.size
    first = np.zeros(k)
    second = np.zeros((k, k))
    cl_out = [(c, np.prod([rc if b else 1 - rc for b in c]))
              for c in itertools.product((0, 1), repeat=G)]
    un_out = [(u, np.prod([ru if b else 1 - ru for b in u]))
              for u in itertools.product((0, 1), repeat=M)]
    for w_x, m in zip(px, ms):
        for c, pc in cl_out:
            if pc == 0:
                continue
            for u, pu in un_out:
                if pu == 0:
                    continue
                R = np.array([c[cl[i]] * u[i] for i in range(M)], dtype=float)
                v = (R[:, None] * m / np.sqrt(rho) - np.sqrt(rho) * Em).sum(axis=0) / np.sqrt(M)
                w = w_x * pc * pu
                first += w * v
                second += w * np.outer(v, v)
    return second - np.outer(first, first)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _check_parzen_midpoint():
    return _max_abs(V.kernel_values("parzen", 0.5), 0.25)


def _check_kernel_at_zero():
    return max(_max_abs(V.kernel_values(s, 0.0), 1.0) for s in V.KERNELS)


def _check_kernel_support():
    return max(_max_abs(V.kernel_values(s, [1.0001, 2.0, 50.0]), 0.0) for s in V.KERNELS)


def _random_sample(seed=11, n=40, k=3):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 10, size=(n, 2))
    scores = rng.standard_normal((n, k))
    clusters = np.arange(n) // 4
    return coords, scores, clusters


def _check_shac_below_min_distance():
    coords, m, _ = _random_sample()
    d = V.build_pair_index(coords, 1e6).dist
    b = 0.5 * d.min()
    return _max_abs(V.shac_meat(m, V.KernelSpec("parzen", b), coords), V.ehw_meat(m))


def _check_cluster_shac_below_min_cluster_distance():
    coords, m, cl = _random_sample()
    pairs = V.build_pair_index(coords, 100.0, "cluster", cl)
    b = 0.5 * pairs.dist.min()
    spec = V.KernelSpec("parzen", b, "cluster")
    return _max_abs(V.shac_meat(m, spec, coords, cl), V.cluster_meat(m, cl))


def _check_singleton_clusters():
    _, m, _ = _random_sample()
    return _max_abs(V.cluster_meat(m, np.arange(m.shape[0])), V.ehw_meat(m))


def _check_sandwich_scalar():
    est = V.sandwich([[2.0]], [[8.0]], 2)
    return max(_max_abs(est.sandwich, 2.0), _max_abs(est.standard_errors, 1.0))


def _decomps():
    dgp = small_population()
    spec = ModelSpec()
    theta = V.compute_estimand(dgp, spec, V.Enumerate())
    return dgp, spec, theta, [
        (SamplingDesign(rc, ru),
         V.population_decomposition(dgp, spec, SamplingDesign(rc, ru), theta, V.Enumerate()))
        for rc, ru in DESIGNS
    ]


def _check_decomposition_identity():
    *_, decs = _decomps()
    err = 0.0
    for des, d in decs:
        rebuilt = (d.delta_ehw + des.rho_u * d.delta_cluster + des.rho * d.delta_spatial
                   - des.rho * (d.delta_E + d.delta_EC + d.delta_ES))
        err = max(err, _max_abs(d.S, rebuilt))
    return err


def _check_decomposition_vs_joint_enumeration():
    dgp, spec, theta, decs = _decomps()
    return max(_max_abs(d.S, enumerate_sampled_score_variance(dgp, spec, des, theta))
               for des, d in decs)


def _check_independent_assignment_cancellation():
    *_, decs = _decomps()
    d = decs[0][1]
    return max(_max_abs(d.delta_spatial, d.delta_ES), _max_abs(d.delta_cluster, d.delta_EC))


PROPERTIES: tuple[tuple[str, float, Callable[[], float]], ...] = (
    ("parzen kernel at half bandwidth is 0.25", 1e-15, _check_parzen_midpoint),
    ("every kernel equals 1 at distance 0", 0.0, _check_kernel_at_zero),
    ("every kernel vanishes beyond the bandwidth", 0.0, _check_kernel_support),
    ("SHAC below min pair distance equals EHW", 1e-14, _check_shac_below_min_distance),
    ("cluster-distance SHAC below min cluster distance equals cluster meat", 1e-12,
     _check_cluster_shac_below_min_cluster_distance),
    ("singleton clusters make cluster meat equal EHW", 0.0, _check_singleton_clusters),
    ("scalar sandwich H=2 meat=8 N=2 gives V=2 SE=1", 1e-15, _check_sandwich_scalar),
    ("decomposition identity reconstructs S", 1e-10, _check_decomposition_identity),
    ("S equals joint enumeration of sampled score variance", 1e-10,
     _check_decomposition_vs_joint_enumeration),
    ("independent assignments cancel spatial and cluster cross terms", 1e-12,
     _check_independent_assignment_cancellation),
)


def run_checks() -> list[CheckResult]:
    out = []
    for name, tol, fn in PROPERTIES:
        try:
            err = float(fn())
        except Exception:  # a crashing property is a failing property
            err = float("nan")
        out.append(CheckResult(name, tol, err))
    return out
