"""Bernstein-Bezier polynomials on triangles and the spline evaluation matrix.

Local B-coefficients on a triangle are ordered lexicographically by the
multi-index ``(i, j, k)``, ``i + j + k = d``, with ``i`` descending then ``j``
descending.  Global coefficients are triangle-major: triangle ``t`` owns the
slice ``t * nloc : (t + 1) * nloc``.
"""

from __future__ import annotations

import dataclasses
from functools import lru_cache
from math import comb, factorial

import numpy as np
import scipy.sparse as sp

from .mesh import Triangulation, locate_points


class OutsideMeshError(ValueError):
    """Raised when evaluation points fall outside the triangulation."""

    def __init__(self, indices):
        self.indices = np.asarray(indices, dtype=np.int64)
        shown = ", ".join(str(i) for i in self.indices[:20])
        more = "" if len(self.indices) <= 20 else f", ... ({len(self.indices)} total)"
        super().__init__(f"points outside the triangulation: {shown}{more}")


@lru_cache(maxsize=None)
def _indices(d: int) -> tuple[tuple[int, int, int], ...]:
    return tuple((i, j, d - i - j) for i in range(d, -1, -1) for j in range(d - i, -1, -1))


def local_indices(d: int) -> list[tuple[int, int, int]]:
    """Multi-indices ``(i, j, k)`` with ``i + j + k = d`` in storage order."""
    if d < 0:
        raise ValueError("degree must be non-negative")
    return list(_indices(d))


def n_local(d: int) -> int:
    return (d + 1) * (d + 2) // 2


@lru_cache(maxsize=None)
def _position(d: int) -> dict[tuple[int, int, int], int]:
    return {ijk: n for n, ijk in enumerate(_indices(d))}


def index_of(d: int, ijk) -> int:
    return _position(d)[tuple(int(a) for a in ijk)]


@lru_cache(maxsize=None)
def _exponents(d: int) -> np.ndarray:
    return np.array(_indices(d), dtype=np.int64)


@lru_cache(maxsize=None)
def _multinomials(d: int) -> np.ndarray:
    return np.array([factorial(d) / (factorial(i) * factorial(j) * factorial(k)) for i, j, k in _indices(d)])


@dataclasses.dataclass(frozen=True)
class SplineSpace:
    """Spline space S^r_d over a triangulation with ``n_triangles`` pieces."""

    degree: int = 5
    smoothness: int = 1
    n_triangles: int = 1

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.smoothness < 0:
            raise ValueError("smoothness must be >= 0")
        if self.smoothness >= self.degree:
            raise ValueError("smoothness must be below the degree")

    @classmethod
    def on(cls, mesh: Triangulation, degree: int = 5, smoothness: int = 1) -> "SplineSpace":
        return cls(degree, smoothness, mesh.n_triangles)

    @property
    def n_local(self) -> int:
        return n_local(self.degree)

    @property
    def dim(self) -> int:
        """Number of B-coefficients K (before smoothness constraints)."""
        return self.n_triangles * self.n_local

    @property
    def local_indices(self) -> list[tuple[int, int, int]]:
        return local_indices(self.degree)

    def global_index(self, t: int, ijk) -> int:
        return t * self.n_local + index_of(self.degree, ijk)


def bernstein_eval(d: int, ijk, b) -> float:
    """Value of the degree-``d`` Bernstein polynomial ``ijk`` at barycentric point ``b``."""
    i, j, k = (int(a) for a in ijk)
    if min(i, j, k) < 0 or i + j + k != d:
        raise ValueError(f"multi-index {ijk} does not have total degree {d}")
    b1, b2, b3 = (b.b1, b.b2, b.b3) if hasattr(b, "b1") else b
    return factorial(d) / (factorial(i) * factorial(j) * factorial(k)) * b1**i * b2**j * b3**k


def bernstein_values(d: int, bary) -> np.ndarray:
    """All degree-``d`` Bernstein values at barycentric points, shape (n, nloc)."""
    b = np.atleast_2d(np.asarray(bary, dtype=float))
    e = _exponents(d)
    return _multinomials(d) * np.prod(b[:, None, :] ** e[None, :, :], axis=2)


@lru_cache(maxsize=None)
def _derivative_stencil(d: int):
    # rows: degree d-1 indices; for each row the three degree-d columns it reads
    cols = np.array(
        [[index_of(d, (i + 1, j, k)), index_of(d, (i, j + 1, k)), index_of(d, (i, j, k + 1))] for i, j, k in _indices(d - 1)]
    )
    return cols


def derivative_matrix(d: int, direction) -> np.ndarray:
    """Matrix mapping degree-``d`` B-coefficients to those of the directional derivative.

    ``direction`` is given in barycentric form ``(a1, a2, a3)`` with zero sum.
    """
    a = np.asarray(direction, dtype=float)
    if a.shape != (3,):
        raise ValueError("direction must have three barycentric components")
    if abs(a.sum()) > 1e-12 * max(1.0, np.abs(a).max()):
        raise ValueError("barycentric direction must sum to zero")
    if d < 1:
        return np.zeros((0, n_local(d)))
    cols = _derivative_stencil(d)
    out = np.zeros((n_local(d - 1), n_local(d)))
    rows = np.arange(len(cols))
    for m in range(3):
        out[rows, cols[:, m]] += d * a[m]
    return out


def dir_derivative_coeffs(d: int, direction, coeffs) -> np.ndarray:
    """B-coefficients (degree ``d-1``) of the derivative along a barycentric direction."""
    c = np.asarray(coeffs, dtype=float)
    if len(c) != n_local(d):
        raise ValueError(f"expected {n_local(d)} coefficients for degree {d}")
    return derivative_matrix(d, direction) @ c


def cartesian_derivative_matrix(mesh: Triangulation, t: int, d: int, orders) -> np.ndarray:
    """Coefficient map for a mixed Cartesian partial ``D_x^a D_y^b`` on triangle ``t``.

    ``orders`` is ``(a, b)``; the result maps degree-``d`` coefficients to
    degree ``d - a - b`` coefficients.
    """
    ax, ay = orders
    dx = mesh.bary_direction(t, (1.0, 0.0))
    dy = mesh.bary_direction(t, (0.0, 1.0))
    mat = np.eye(n_local(d))
    deg = d
    for direction in [dx] * ax + [dy] * ay:
        if deg == 0:
            return np.zeros((1, n_local(d)))
        mat = derivative_matrix(deg, direction) @ mat
        deg -= 1
    return mat


def integrate_pair(tri, d1: int, d2: int, alpha, beta) -> float:
    """Exact integral of the product of two Bernstein polynomials over a triangle.

    Parameters
    ----------
    tri : (3, 2) array of triangle corners.
    d1, d2 : degrees of the two polynomials.
    alpha, beta : multi-indices with ``|alpha| = d1`` and ``|beta| = d2``.
    """
    alpha = tuple(int(a) for a in alpha)
    beta = tuple(int(a) for a in beta)
    if sum(alpha) != d1 or sum(beta) != d2 or min(alpha + beta) < 0:
        raise ValueError("multi-index does not match its degree")
    v = np.asarray(tri, dtype=float)
    area = 0.5 * abs((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1]) - (v[1, 1] - v[0, 1]) * (v[2, 0] - v[0, 0]))
    num = comb(alpha[0] + beta[0], alpha[0]) * comb(alpha[1] + beta[1], alpha[1]) * comb(alpha[2] + beta[2], alpha[2])
    return area * num / (comb(d1 + d2, d1) * comb(d1 + d2 + 2, 2))


@lru_cache(maxsize=None)
def _reference_gram(d: int) -> np.ndarray:
    idx = _indices(d)
    unit = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = np.array([[integrate_pair(unit, d, d, a, b) for b in idx] for a in idx])
    return g / 0.5


def gram_matrix(d: int, area: float) -> np.ndarray:
    """Gram matrix of the degree-``d`` Bernstein basis on a triangle of the given area."""
    return area * _reference_gram(d)


def assemble_eval_matrix(mesh: Triangulation, space: SplineSpace, points) -> sp.csr_matrix:
    """Sparse n x K matrix whose row i holds all basis values at point i.

    Raises
    ------
    OutsideMeshError
        If any point is not inside the triangulation.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri_ids, bary = locate_points(mesh, pts)
    outside = np.flatnonzero(tri_ids < 0)
    if len(outside):
        raise OutsideMeshError(outside)
    return _eval_from_location(space, tri_ids, bary)


def _eval_from_location(space: SplineSpace, tri_ids: np.ndarray, bary: np.ndarray) -> sp.csr_matrix:
    n, nloc = len(tri_ids), space.n_local
    vals = bernstein_values(space.degree, bary) if n else np.zeros((0, nloc))
    cols = tri_ids[:, None] * nloc + np.arange(nloc)[None, :]
    indptr = np.arange(0, n * nloc + 1, nloc)
    return sp.csr_matrix((vals.ravel(), cols.ravel(), indptr), shape=(n, space.dim))


def evaluate_spline(mesh: Triangulation, space: SplineSpace, gamma, points) -> np.ndarray:
    """Evaluate the spline with coefficients ``gamma``; NaN outside the mesh."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri_ids, bary = locate_points(mesh, pts)
    out = np.full(len(pts), np.nan)
    inside = tri_ids >= 0
    if inside.any():
        b = _eval_from_location(space, tri_ids[inside], bary[inside])
        out[inside] = b @ np.asarray(gamma, dtype=float)
    return out
