"""Partially linear model ``Y = Z beta + g(X) + eps`` with a bivariate penalized spline g.

The smoothness constraints are removed by writing ``gamma = Q2 theta``; the
penalized least-squares problem is then solved through the block formulas

    V22 = Q2' (B'B + lam P) Q2
    U11^-1 = Z' (I - B Q2 V22^-1 Q2' B') Z
    U22^-1 = Q2' (B' (I - Z (Z'Z)^-1 Z') B + lam P) Q2

without ever forming an n x n matrix.

Internally theta is further written as ``T phi`` with ``T`` from the
eigenvectors of ``Q2' P Q2``, scaled so the reduced penalty becomes a 0/1
diagonal.  The same formulas then hold with ``W = B Q2 T`` in place of
``B Q2``; this keeps the factorizations well conditioned at the top of the
lambda grid and makes every grid point cost one p x p and two small
Cholesky solves on cached Gram matrices.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from functools import cached_property
from os import PathLike
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .basis import SplineSpace, assemble_eval_matrix, evaluate_spline
from .constraints import ConstraintMatrix, NullBasis, assemble_H, nullspace
from .mesh import Triangulation, locate_points
from .penalty import assemble_penalty

Z_975 = 1.959964


class SingularSystemError(np.linalg.LinAlgError):
    pass


NULL_TOL = 1e-10


def penalty_eigenbasis(Pq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Change of variables ``theta = T phi`` that diagonalises the reduced penalty.

    Returns ``(T, pen)`` with ``T' Pq T = diag(pen)`` and ``pen`` in {0, 1};
    directions with eigenvalue below ``NULL_TOL`` times the largest are the
    unpenalized ones.  Solving in ``phi`` keeps the normal equations well
    conditioned for very large lambda.
    """
    mu, U = np.linalg.eigh(0.5 * (Pq + Pq.T))
    if len(mu) == 0:
        return np.zeros((0, 0)), np.zeros(0)
    free = mu <= NULL_TOL * max(mu.max(), 0.0)
    scale = np.where(free, 1.0, 1.0 / np.sqrt(np.where(free, 1.0, mu)))
    return U * scale, (~free).astype(float)


def default_lambda_grid(lo: float = -6.0, hi: float = 7.0, count: int = 10) -> np.ndarray:
    """``count`` values of lambda with log10 equally spaced on ``[lo, hi]``."""
    if count < 1:
        raise ValueError("lambda grid needs at least one point")
    return 10.0 ** np.linspace(lo, hi, count)


@dataclasses.dataclass(frozen=True, eq=False)
class SplineSetup:
    """Data-independent pieces of the estimator for one mesh and spline space."""

    mesh: Triangulation
    space: SplineSpace
    constraints: ConstraintMatrix
    null: NullBasis
    P: sp.csr_matrix

    @classmethod
    def build(cls, mesh: Triangulation, degree: int = 5, smoothness: int = 1) -> "SplineSetup":
        space = SplineSpace.on(mesh, degree, smoothness)
        cons = assemble_H(mesh, space)
        return cls(mesh, space, cons, nullspace(cons), assemble_penalty(mesh, space))

    @property
    def Q2(self) -> np.ndarray:
        return self.null.Q2

    @cached_property
    def reduced_penalty(self) -> np.ndarray:
        Pq = self.Q2.T @ (self.P @ self.Q2)
        return 0.5 * (Pq + Pq.T)

    @cached_property
    def penalty_basis(self) -> tuple[np.ndarray, np.ndarray]:
        return penalty_eigenbasis(self.reduced_penalty)

    def eval_matrix(self, points) -> sp.csr_matrix:
        return assemble_eval_matrix(self.mesh, self.space, points)

    def problem(self, X, Z, Y, lambdas=None) -> "PlmProblem":
        return PlmProblem.from_setup(self, X, Z, Y, lambdas)


@dataclasses.dataclass(frozen=True, eq=False)
class PlmProblem:
    """Inputs of the penalized constrained least-squares problem.

    ``Z`` may have zero columns, in which case the model is pure smoothing.
    """

    Y: np.ndarray
    Z: np.ndarray
    B: sp.csr_matrix
    Q2: np.ndarray
    P: sp.csr_matrix
    lambdas: np.ndarray
    penalty_basis: Optional[tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        n = len(self.Y)
        if self.Z.ndim != 2 or self.Z.shape[0] != n:
            raise ValueError("Z must be an n x p matrix matching Y")
        if self.B.shape[0] != n:
            raise ValueError("B must have one row per observation")
        if self.B.shape[1] != self.Q2.shape[0] or self.P.shape[0] != self.Q2.shape[0]:
            raise ValueError("B, P and Q2 must share the coefficient dimension")
        if n <= self.p:
            raise ValueError("need more observations than linear covariates")
        if np.any(np.asarray(self.lambdas) <= 0):
            raise ValueError("lambda values must be positive")

    @classmethod
    def from_setup(cls, setup: SplineSetup, X, Z, Y, lambdas=None) -> "PlmProblem":
        Y = np.asarray(Y, dtype=float).ravel()
        Z = np.zeros((len(Y), 0)) if Z is None else np.asarray(Z, dtype=float).reshape(len(Y), -1)
        grid = default_lambda_grid() if lambdas is None else np.asarray(lambdas, dtype=float).ravel()
        return cls(Y, Z, setup.eval_matrix(X), setup.Q2, setup.P, grid, setup.penalty_basis)

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @cached_property
    def _basis(self) -> tuple[np.ndarray, np.ndarray]:
        if self.penalty_basis is not None:
            return self.penalty_basis
        return penalty_eigenbasis(self.Q2.T @ (self.P @ self.Q2))

    @cached_property
    def W(self) -> np.ndarray:
        """``B Q2 T``: the design of the reduced, penalty-diagonal coordinates."""
        return np.asarray(self.B @ self.Q2) @ self._basis[0]

    @cached_property
    def _grams(self):
        W, Z, Y = self.W, self.Z, self.Y
        A = W.T @ W
        return 0.5 * (A + A.T), np.diag(self._basis[1]), W.T @ Z, W.T @ Y, Z.T @ Z, Z.T @ Y


@dataclasses.dataclass(frozen=True)
class _Solution:
    lam: float
    beta: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    df: float
    rss: float
    Zhat: np.ndarray


def _cholesky(M: np.ndarray, what: str):
    try:
        return sla.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-12 * max(np.trace(M) / len(M), np.finfo(float).tiny)
    try:
        return sla.cho_factor(M + ridge * np.eye(len(M)), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SingularSystemError(f"{what} is numerically singular; use a larger lambda or a coarser mesh") from None


def _solve(problem: PlmProblem, lam: float) -> _Solution:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    A, Pq, WtZ, WtY, ZtZ, ZtY = problem._grams
    W, Z, Y, p = problem.W, problem.Z, problem.Y, problem.p
    cV = _cholesky(A + lam * Pq, "V22")
    if p:
        Zhat = W @ sla.cho_solve(cV, WtZ)
        MY = W @ sla.cho_solve(cV, WtY)
        U11_inv = Z.T @ (Z - Zhat)
        U11_inv = 0.5 * (U11_inv + U11_inv.T)
        beta = np.linalg.solve(U11_inv, Z.T @ (Y - MY))
        ZtZ_inv_ZtW = np.linalg.solve(ZtZ, WtZ.T)
        C = A - WtZ @ ZtZ_inv_ZtW
        C = 0.5 * (C + C.T)
        cU = _cholesky(C + lam * Pq, "U22^-1")
        phi = sla.cho_solve(cU, WtY - WtZ @ np.linalg.solve(ZtZ, ZtY))
        df = float(np.trace(np.linalg.solve(U11_inv, Z.T @ (Z - Zhat))) + np.trace(sla.cho_solve(cU, C)))
    else:
        Zhat = np.zeros((problem.n, 0))
        beta = np.zeros(0)
        phi = sla.cho_solve(cV, WtY)
        df = float(np.trace(sla.cho_solve(cV, A)))
    resid = Y - Z @ beta - W @ phi
    theta = problem._basis[0] @ phi
    gamma = problem.Q2 @ theta
    return _Solution(float(lam), beta, theta, gamma, df, float(resid @ resid), Zhat)


def solve_at_lambda(problem: PlmProblem, lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimiser ``(beta_hat, theta_hat, gamma_hat)`` for a fixed penalty ``lam``."""
    s = _solve(problem, lam)
    return s.beta, s.theta, s.gamma


def hat_trace(problem: PlmProblem, lam: float) -> float:
    """Effective degrees of freedom ``tr S(lam)``."""
    return _solve(problem, lam).df


def _sigma2(rss: float, df: float, n: int) -> float:
    if df >= n:
        raise ValueError(f"degrees of freedom {df:.4g} not below sample size {n}")
    return rss / (n - df)


@dataclasses.dataclass(frozen=True, eq=False)
class FitResult:
    beta_hat: np.ndarray
    theta_hat: np.ndarray
    gamma_hat: np.ndarray
    lam: float
    sigma2_hat: float
    df: float
    rss: float
    n: int
    Sigma_n: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    gcv_trace: list[tuple[float, float]]
    degree: int = 5
    smoothness: int = 1

    @property
    def gcv(self) -> float:
        return dict(self.gcv_trace)[self.lam]

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "theta_hat": self.theta_hat.tolist(),
            "gamma_hat": self.gamma_hat.tolist(),
            "lambda": self.lam,
            "sigma2_hat": self.sigma2_hat,
            "df": self.df,
            "rss": self.rss,
            "n": self.n,
            "Sigma_n": self.Sigma_n.tolist(),
            "se": self.se.tolist(),
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
            "gcv_trace": [[lam, g] for lam, g in self.gcv_trace],
            "degree": self.degree,
            "smoothness": self.smoothness,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitResult":
        p = len(data["beta_hat"])
        return cls(
            beta_hat=np.array(data["beta_hat"], dtype=float),
            theta_hat=np.array(data.get("theta_hat", []), dtype=float),
            gamma_hat=np.array(data["gamma_hat"], dtype=float),
            lam=float(data["lambda"]),
            sigma2_hat=float(data["sigma2_hat"]),
            df=float(data["df"]),
            rss=float(data.get("rss", np.nan)),
            n=int(data.get("n", 0)),
            Sigma_n=np.array(data.get("Sigma_n", np.zeros((p, p))), dtype=float).reshape(p, p),
            se=np.array(data["se"], dtype=float),
            ci_lower=np.array(data["ci_lower"], dtype=float),
            ci_upper=np.array(data["ci_upper"], dtype=float),
            gcv_trace=[(float(a), float(b)) for a, b in data["gcv_trace"]],
            degree=int(data.get("degree", 5)),
            smoothness=int(data.get("smoothness", 1)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=True)

    def save(self, path: Union[str, PathLike]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
            fh.write("\n")

    @classmethod
    def load(cls, path: Union[str, PathLike]) -> "FitResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def sigma2_hat(problem: PlmProblem, fit) -> float:
    """Residual variance ``||Y - Yhat||^2 / (n - tr S)`` for a fit at its own lambda."""
    if isinstance(fit, FitResult):
        beta, gamma, df = fit.beta_hat, fit.gamma_hat, fit.df
    else:
        beta, gamma, df = fit[0], fit[1], fit[2]
    resid = problem.Y - problem.Z @ beta - problem.B @ gamma
    return _sigma2(float(resid @ resid), df, problem.n)


def _covariance(problem: PlmProblem, Zhat: np.ndarray, sigma2: float, beta: np.ndarray):
    n = problem.n
    R = problem.Z - Zhat
    G = R.T @ R
    G = 0.5 * (G + G.T)
    try:
        cov_beta = sigma2 * np.linalg.inv(G)
        if not np.all(np.isfinite(cov_beta)) or np.linalg.cond(G) > 1e14:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            "(Z - Zhat)'(Z - Zhat) is singular; a covariate is fully explained by location"
        ) from None
    Sigma_n = G / (n * sigma2) if sigma2 > 0 else np.full_like(G, np.inf)
    se = np.sqrt(np.clip(np.diag(cov_beta), 0.0, None))
    return Sigma_n, se, beta - Z_975 * se, beta + Z_975 * se


def covariance(problem: PlmProblem, fit: FitResult):
    """``(Sigma_n, se, ci_lower, ci_upper)`` for the linear coefficients of a fit."""
    if problem.p < 1:
        raise ValueError("covariance needs at least one linear covariate")
    s = _solve(problem, fit.lam)
    return _covariance(problem, s.Zhat, fit.sigma2_hat, fit.beta_hat)


def _result(problem: PlmProblem, s: _Solution, trace, degree: int, smoothness: int) -> FitResult:
    sig2 = _sigma2(s.rss, s.df, problem.n)
    p = problem.p
    if p:
        Sigma_n, se, lo, hi = _covariance(problem, s.Zhat, sig2, s.beta)
    else:
        Sigma_n, se, lo, hi = np.zeros((0, 0)), np.zeros(0), np.zeros(0), np.zeros(0)
    return FitResult(
        beta_hat=s.beta, theta_hat=s.theta, gamma_hat=s.gamma, lam=s.lam, sigma2_hat=sig2, df=s.df,
        rss=s.rss, n=problem.n, Sigma_n=Sigma_n, se=se, ci_lower=lo, ci_upper=hi, gcv_trace=list(trace),
        degree=degree, smoothness=smoothness,
    )


def gcv_score(rss: float, df: float, n: int) -> float:
    return n * rss / (n - df) ** 2


def gcv_select(problem: PlmProblem, degree: int = 5, smoothness: int = 1, workers: int = 1) -> FitResult:
    """Fit at the lambda minimising GCV over ``problem.lambdas``; ties go to the smaller lambda.

    ``degree`` and ``smoothness`` are recorded in the result so that it can
    be re-evaluated later.
    """
    grid = np.sort(np.asarray(problem.lambdas, dtype=float))

    def attempt(lam):
        try:
            s = _solve(problem, lam)
        except SingularSystemError:
            return None
        return s if s.df < problem.n else None

    if workers > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sols = list(pool.map(attempt, grid))
    else:
        sols = [attempt(lam) for lam in grid]
    scores = [gcv_score(s.rss, s.df, problem.n) if s is not None else np.inf for s in sols]
    if not np.isfinite(scores).any():
        raise SingularSystemError("no lambda on the grid gave a solvable system")
    best = int(np.argmin(scores))
    trace = [(float(lam), float(g)) for lam, g in zip(grid, scores)]
    return _result(problem, sols[best], trace, degree, smoothness)


def fit_at_lambda(problem: PlmProblem, lam: float, degree: int = 5, smoothness: int = 1) -> FitResult:
    s = _solve(problem, lam)
    return _result(problem, s, [(s.lam, gcv_score(s.rss, s.df, problem.n))], degree, smoothness)


def fit(setup: SplineSetup, X, Z, Y, lambdas=None, workers: int = 1) -> FitResult:
    """Convenience wrapper: build the problem on ``setup`` and select lambda by GCV."""
    problem = setup.problem(X, Z, Y, lambdas)
    return gcv_select(problem, setup.space.degree, setup.space.smoothness, workers=workers)


@dataclasses.dataclass(frozen=True)
class Prediction:
    y_hat: np.ndarray
    g_hat: np.ndarray
    inside: np.ndarray

    @property
    def outside_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.inside)


def predict(fit: FitResult, mesh: Triangulation, space: SplineSpace, new_points, new_Z=None) -> Prediction:
    """``y_hat = new_Z beta_hat + g_hat(new_points)``; NaN where a point is outside the mesh."""
    pts = np.atleast_2d(np.asarray(new_points, dtype=float))
    if pts.shape[1] != 2:
        raise ValueError("new points must be two-dimensional")
    if len(fit.gamma_hat) != space.dim:
        raise ValueError("fit coefficients do not match the spline space")
    p = len(fit.beta_hat)
    if new_Z is None:
        Zn = np.zeros((len(pts), p))
    else:
        Zn = np.asarray(new_Z, dtype=float).reshape(len(pts), -1)
        if Zn.shape[1] != p:
            raise ValueError(f"new_Z has {Zn.shape[1]} columns, fit has {p} coefficients")
    g = evaluate_spline(mesh, space, fit.gamma_hat, pts)
    return Prediction(Zn @ fit.beta_hat + g, g, np.isfinite(g))


def points_inside(mesh: Triangulation, points) -> np.ndarray:
    ids, _ = locate_points(mesh, points)
    return ids >= 0
