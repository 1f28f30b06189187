"""Cross-edge smoothness conditions H and the null-space basis Q2."""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .basis import SplineSpace, bernstein_values, local_indices
from .mesh import Triangulation

RANK_TOL = 1e-10


@dataclasses.dataclass(frozen=True, eq=False)
class ConstraintMatrix:
    """Smoothness conditions ``H gamma = 0``.

    ``edge`` and ``order`` give, per row, the interior edge (as a sorted
    vertex pair) and the derivative order ``s`` the condition enforces.
    """

    H: sp.csr_matrix
    edge: list[tuple[int, int]]
    order: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class NullBasis:
    Q2: np.ndarray
    rank: int

    @property
    def dim(self) -> int:
        return self.Q2.shape[1]


def _reorder(local_tri, apex: int, e1: int, e2: int):
    """Positions of (apex, e1, e2) inside a triangle's local vertex tuple."""
    pos = {v: n for n, v in enumerate(local_tri)}
    return pos[apex], pos[e1], pos[e2]


def _local_pos(space_degree_index, positions, lmq):
    t = [0, 0, 0]
    for p, value in zip(positions, lmq):
        t[p] = value
    return space_degree_index[tuple(t)]


def assemble_H(mesh: Triangulation, space: SplineSpace) -> ConstraintMatrix:
    """C^r conditions across every interior edge.

    For an edge shared by ``tau`` (lower triangle id) and ``tau_t``, with
    coefficients written in vertex order (apex, e1, e2) where e1 < e2 are the
    edge's global vertex ids, the order-``s`` conditions read

        c~[s, j, k] = sum_{l+m+q=s} c[l, j+m, k+q] * B^s_{lmq}(w)

    for ``j + k = d - s``, where ``w`` is the apex of ``tau_t`` expressed in
    barycentric coordinates of ``tau``.
    """
    d, r, nloc = space.degree, space.smoothness, space.n_local
    index = {ijk: n for n, ijk in enumerate(local_indices(d))}
    rows, cols, vals = [], [], []
    edge_of_row: list[tuple[int, int]] = []
    order_of_row: list[int] = []
    row = 0
    for (e1, e2), owners in mesh.edges.items():
        if len(owners) != 2:
            continue
        t, tt = owners
        tri, ttri = mesh.triangles[t].tolist(), mesh.triangles[tt].tolist()
        apex = next(v for v in tri if v not in (e1, e2))
        apex_t = next(v for v in ttri if v not in (e1, e2))
        pos = _reorder(tri, apex, e1, e2)
        pos_t = _reorder(ttri, apex_t, e1, e2)
        b_local = mesh.barycentric(t, mesh.vertices[apex_t])[0]
        w = b_local[list(pos)]
        for s in range(r + 1):
            sub = local_indices(s)
            weights = bernstein_values(s, w)[0]
            for j in range(d - s, -1, -1):
                k = d - s - j
                rows.append(row)
                cols.append(tt * nloc + _local_pos(index, pos_t, (s, j, k)))
                vals.append(1.0)
                for (l, m, q), wt in zip(sub, weights):
                    rows.append(row)
                    cols.append(t * nloc + _local_pos(index, pos, (l, j + m, k + q)))
                    vals.append(-wt)
                edge_of_row.append((e1, e2))
                order_of_row.append(s)
                row += 1
    H = sp.csr_matrix((vals, (rows, cols)), shape=(row, space.dim))
    H.sum_duplicates()
    return ConstraintMatrix(H, edge_of_row, np.array(order_of_row, dtype=np.int64))


def nullspace(cons: ConstraintMatrix) -> NullBasis:
    """Orthonormal basis of ``{gamma : H gamma = 0}`` from a pivoted QR of ``H^T``."""
    H = cons.H
    K = H.shape[1]
    if H.shape[0] == 0:
        return NullBasis(np.eye(K), 0)
    Q, R, _ = sla.qr(H.T.toarray(), mode="full", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag.max())) if diag.size else 0
    return NullBasis(np.ascontiguousarray(Q[:, rank:]), rank)
