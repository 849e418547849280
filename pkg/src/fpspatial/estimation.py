"""M-estimation: design matrices, OLS / within-cluster OLS, probit, and APEs.

Sign convention used throughout: the score ``m_i`` is the gradient of the
*minimized* per-unit objective ``q_i`` and the Hessian is the average of its
derivative, so ``hessian`` is positive definite for every implemented family.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.special import log_ndtr

from .geometry import build_contiguity

__all__ = [
    "ModelSpec",
    "EstimationResult",
    "ApeResult",
    "RankDeficientError",
    "ProbitError",
    "build_design_matrix",
    "demean_within",
    "fit_ols",
    "fit_probit",
    "probit_objective",
    "probit_scores",
    "probit_hessian",
    "compute_ape",
    "write_estimation_csv",
]

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
SEPARATION_BOUND = 30.0


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, column: str):
        super().__init__(f"design matrix is rank deficient; column {column!r} is collinear")
        self.column = column


class ProbitError(RuntimeError):
    """Probit fit failed (separation or no convergence); ``theta`` is the last iterate."""

    def __init__(self, msg: str, theta: np.ndarray | None = None):
        super().__init__(msg)
        self.theta = theta


@dataclass(frozen=True)
class ModelSpec:
    """Which regression to run on the sampled units.

    ``target`` names the reported quantity: a coefficient name (``"x"``,
    ``"spillover"``, ``"const"``) or ``"ape"`` for the probit average partial
    effect of ``x``.
    """

    family: str = "ls"
    intercept: bool = True
    spillover: bool = False
    spillover_cutoff: float = 0.5
    spillover_row_standardize: bool = True
    demean: bool = False
    target: str = "x"

    def __post_init__(self):
        if self.family not in ("ls", "probit"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.demean and self.family != "ls":
            raise ValueError("within-cluster demeaning is only defined for least squares")
        if self.target == "ape" and self.family != "probit":
            raise ValueError("target 'ape' requires the probit family")
        names = self.column_names
        if self.target != "ape" and self.target not in names:
            raise ValueError(f"target {self.target!r} is not among columns {names}")

    @property
    def column_names(self) -> tuple[str, ...]:
        names = []
        if self.intercept and not self.demean:
            names.append("const")
        names.append("x")
        if self.spillover:
            names.append("spillover")
        return tuple(names)

    @property
    def slope_index(self) -> int:
        return self.column_names.index("x")

    @property
    def target_index(self) -> int:
        return self.slope_index if self.target == "ape" else self.column_names.index(self.target)


@dataclass(frozen=True)
class EstimationResult:
    theta_hat: np.ndarray
    scores: np.ndarray
    hessian: np.ndarray
    converged: bool = True
    iterations: int = 0
    names: tuple[str, ...] = ()
    family: str = "ls"

    @property
    def nobs(self) -> int:
        return self.scores.shape[0]

    @property
    def mean_score(self) -> np.ndarray:
        return self.scores.mean(axis=0)


@dataclass(frozen=True)
class ApeResult:
    gamma_hat: np.ndarray
    f_rows: np.ndarray
    F_hat: np.ndarray


def demean_within(arr: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Subtract group means (rows grouped by ``groups``) from every column."""
    arr = np.asarray(arr, dtype=float)
    _, inv, counts = np.unique(groups, return_inverse=True, return_counts=True)
    two_d = arr.ndim == 2
    a = arr if two_d else arr[:, None]
    sums = np.zeros((counts.size, a.shape[1]))
    np.add.at(sums, inv, a)
    out = a - (sums / counts[:, None])[inv]
    return out if two_d else out[:, 0]


def build_design_matrix(spec: ModelSpec, x, y, coords=None, clusters=None):
    """Regressor matrix and outcome for the sampled units.

    Columns are ``[const?, x, spillover?]``.  The spillover column is
    ``W_s x`` with ``W_s`` the contiguity among the *sampled* units only,
    row-standardized unless ``spec.spillover_row_standardize`` is false.
    With ``spec.demean`` every column and the outcome are demeaned within
    ``clusters`` and the intercept is dropped.

    Returns ``(X, y)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cols = []
    if spec.intercept and not spec.demean:
        cols.append(np.ones_like(x))
    cols.append(x)
    if spec.spillover:
        if coords is None:
            raise ValueError("spillover regressor needs sample locations")
        Ws = build_contiguity(coords, spec.spillover_cutoff,
                              row_standardize=spec.spillover_row_standardize)
        cols.append(Ws @ x)
    X = np.column_stack(cols)
    if spec.demean:
        if clusters is None:
            raise ValueError("demeaning needs cluster labels")
        X = demean_within(X, clusters)
        y = demean_within(y, clusters)
    return X, y


def fit_ols(X, y, names=None) -> EstimationResult:
    """Least squares with ``q_i = (y_i - x_i theta)^2 / 2``.

    Solved through a column-pivoted QR so collinear columns are reported by
    name rather than silently absorbed.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = tuple(names) if names is not None else tuple(f"c{j}" for j in range(k))
    if n <= k:
        raise ValueError(f"need more observations ({n}) than regressors ({k})")
    Q, R, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, k) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol)) if diag[0] > 0 else 0
    if rank < k:
        raise RankDeficientError(names[piv[rank]])
    theta = np.empty(k)
    theta[piv] = sla.solve_triangular(R, Q.T @ y)
    resid = y - X @ theta
    scores = -X * resid[:, None]
    H = X.T @ X / n
    return EstimationResult(theta, scores, (H + H.T) / 2, True, 1, names, "ls")


def _probit_parts(theta, X, y):
    z = X @ theta
    log_phi = -0.5 * z * z - _LOG_SQRT_2PI
    A = np.exp(log_phi - log_ndtr(z))
    B = np.exp(log_phi - log_ndtr(-z))
    dq = np.where(y > 0.5, -A, B)
    d2q = np.where(y > 0.5, A * (z + A), B * (B - z))
    return z, dq, d2q


def probit_objective(theta, X, y) -> float:
    """Mean negative log-likelihood."""
    z = np.asarray(X, float) @ np.asarray(theta, float)
    ll = np.where(np.asarray(y) > 0.5, log_ndtr(z), log_ndtr(-z))
    return float(-ll.mean())


def probit_scores(theta, X, y) -> np.ndarray:
    _, dq, _ = _probit_parts(np.asarray(theta, float), np.asarray(X, float), np.asarray(y, float))
    return np.asarray(X, float) * dq[:, None]


def probit_hessian(theta, X, y) -> np.ndarray:
    X = np.asarray(X, float)
    _, _, d2q = _probit_parts(np.asarray(theta, float), X, np.asarray(y, float))
    H = (X * d2q[:, None]).T @ X / X.shape[0]
    return (H + H.T) / 2


def fit_probit(X, y, names=None, max_iter: int = 100, score_tol: float = 1e-9,
               step_tol: float = 1e-10, weights=None) -> EstimationResult:
    """Probit MLE by pure Newton iteration from ``theta = 0``.

    ``weights`` (non-negative, rescaled to mean one) turns the objective
    into a weighted average; the returned ``scores`` are unweighted rows.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, float) * (n / np.sum(weights))
    names = tuple(names) if names is not None else tuple(f"c{j}" for j in range(k))
    if np.all(y == y[0]):
        raise ProbitError("outcome is constant; probit is not identified")
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficientError(names[-1])
    theta = np.zeros(k)
    for it in range(1, max_iter + 1):
        z, dq, d2q = _probit_parts(theta, X, y)
        grad = X.T @ (w * dq) / n
        if np.max(np.abs(grad)) <= score_tol:
            break
        H = (X * (w * d2q)[:, None]).T @ X / n
        step = np.linalg.solve(H, grad)
        theta = theta - step
        if np.max(np.abs(X @ theta)) > SEPARATION_BOUND:
            raise ProbitError("linear index diverging; perfect separation suspected", theta)
        if np.linalg.norm(step) <= step_tol:
            break
    else:
        raise ProbitError(f"Newton did not converge in {max_iter} iterations", theta)
    _, dq, d2q = _probit_parts(theta, X, y)
    H = (X * (w * d2q)[:, None]).T @ X / n
    return EstimationResult(theta, X * dq[:, None], (H + H.T) / 2, True, it, names, "probit")


def compute_ape(result: EstimationResult, X, target: int) -> ApeResult:
    """Average partial effect of regressor ``target`` in a probit fit.

    ``f_i = phi(x_i theta) * theta_target``; the Jacobian is analytic:
    ``grad f_i = -z_i phi(z_i) theta_target x_i + phi(z_i) e_target``.
    """
    X = np.asarray(X, dtype=float)
    theta = result.theta_hat
    z = X @ theta
    phi = np.exp(-0.5 * z * z - _LOG_SQRT_2PI)
    slope = theta[target]
    f = phi * slope
    grad = (-z * phi * slope)[:, None] * X
    grad[:, target] += phi
    return ApeResult(np.array([f.mean()]), f[:, None], grad.mean(axis=0)[None, :])


def write_estimation_csv(result: EstimationResult, path, scores_path=None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "theta_hat", "converged", "iterations"])
        for name, val in zip(result.names, result.theta_hat):
            w.writerow([name, format(val, ".17g"), int(result.converged), result.iterations])
    if scores_path is not None:
        with Path(scores_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(result.names))
            for row in result.scores:
                w.writerow([format(v, ".17g") for v in row])
