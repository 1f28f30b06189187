"""Independent reference computations used by the tests.

None of these reuse the package's Bernstein machinery: Bernstein values are
recomputed from factorials, integrals come from a collapsed Gauss-Legendre
rule, and the constrained problem is solved through its saddle system.
"""

from __future__ import annotations

from math import factorial

import numpy as np


def triangle_quadrature(verts, order: int = 12):
    """Points and weights integrating polynomials of degree ``<= 2*order - 2`` exactly.

    Collapses the unit square onto the triangle (Duffy map) and uses a
    tensor Gauss-Legendre rule.
    """
    v = np.asarray(verts, dtype=float)
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    U, V = np.meshgrid(t, t, indexing="ij")
    WU, WV = np.meshgrid(w, w, indexing="ij")
    b1 = U.ravel()
    b2 = ((1.0 - U) * V).ravel()
    b3 = ((1.0 - U) * (1.0 - V)).ravel()
    area = 0.5 * abs(np.linalg.det(np.array([v[1] - v[0], v[2] - v[0]])))
    weights = (WU * WV).ravel() * (1.0 - U.ravel()) * 2.0 * area
    pts = np.outer(b1, v[0]) + np.outer(b2, v[1]) + np.outer(b3, v[2])
    return pts, weights, np.column_stack([b1, b2, b3])


def bary(verts, pts):
    v = np.asarray(verts, dtype=float)
    T = np.column_stack([v[0] - v[2], v[1] - v[2]])
    lam = np.linalg.solve(T, (np.atleast_2d(pts) - v[2]).T).T
    return np.column_stack([lam, 1.0 - lam.sum(axis=1)])


def multi_indices(d: int):
    return [(i, j, d - i - j) for i in range(d, -1, -1) for j in range(d - i, -1, -1)]


def bernstein(d: int, ijk, b):
    i, j, k = ijk
    b = np.atleast_2d(b)
    c = factorial(d) / (factorial(i) * factorial(j) * factorial(k))
    return c * b[:, 0] ** i * b[:, 1] ** j * b[:, 2] ** k


def bernstein_matrix(d: int, verts, pts):
    b = bary(verts, pts)
    return np.column_stack([bernstein(d, idx, b) for idx in multi_indices(d)])


def domain_points(d: int, verts):
    v = np.asarray(verts, dtype=float)
    return np.array([(i * v[0] + j * v[1] + k * v[2]) / d for i, j, k in multi_indices(d)])


def bform_coefficients(f, d: int, verts):
    """B-coefficients of a degree-``<= d`` polynomial ``f(x, y)`` by collocation at domain points."""
    pts = domain_points(d, verts)
    M = bernstein_matrix(d, verts, pts)
    return np.linalg.solve(M, f(pts[:, 0], pts[:, 1]))


def global_bform(f, mesh, d: int):
    return np.concatenate([bform_coefficients(f, d, mesh.vertices[tri]) for tri in mesh.triangles])


def kkt_solve(Y, Z, B, H, P, lam):
    """Solve min ||Y - Z b - B g||^2 + lam g'Pg s.t. Hg = 0 through the Lagrange saddle system.

    ``lstsq`` handles redundant constraint rows; the ``(b, g)`` part is unique.
    """
    B = np.asarray(B.toarray() if hasattr(B, "toarray") else B)
    H = np.asarray(H.toarray() if hasattr(H, "toarray") else H)
    P = np.asarray(P.toarray() if hasattr(P, "toarray") else P)
    Z = np.zeros((len(Y), 0)) if Z is None else np.asarray(Z)
    p, K, m = Z.shape[1], B.shape[1], H.shape[0]
    D = np.hstack([Z, B])
    G = D.T @ D
    G[p:, p:] += lam * P
    A = np.zeros((p + K + m, p + K + m))
    A[: p + K, : p + K] = G
    A[p:p + K, p + K:] = H.T
    A[p + K:, p:p + K] = H
    rhs = np.concatenate([D.T @ Y, np.zeros(m)])
    sol = np.linalg.lstsq(A, rhs, rcond=1e-13)[0]
    return sol[:p], sol[p:p + K]


def svd_rank(M, tol: float = 1e-10) -> int:
    s = np.linalg.svd(np.asarray(M.toarray() if hasattr(M, "toarray") else M), compute_uv=False)
    return int(np.sum(s > tol * s.max())) if s.size else 0


def central_difference(f, pts, axis: int, h: float = 1e-5):
    e = np.zeros(2)
    e[axis] = h
    return (f(pts + e) - f(pts - e)) / (2.0 * h)


def ols(D, Y):
    """Closed-form least squares ``(D'D)^-1 D'Y`` with classical standard errors."""
    G = np.linalg.inv(D.T @ D)
    coef = G @ D.T @ Y
    r = Y - D @ coef
    s2 = r @ r / (len(Y) - D.shape[1])
    return coef, np.sqrt(np.diag(s2 * G))
