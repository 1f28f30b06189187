"""Block-diagonal thin-plate energy matrix P with gamma' P gamma = E_2(B gamma)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .basis import SplineSpace, cartesian_derivative_matrix, gram_matrix
from .mesh import Triangulation

# (x-order, y-order, weight) for D_xx^2 + 2 D_xy^2 + D_yy^2
_SECOND_ORDER_TERMS = ((2, 0, 1.0), (1, 1, 2.0), (0, 2, 1.0))


def penalty_block(mesh: Triangulation, space: SplineSpace, t: int) -> np.ndarray:
    d = space.degree
    G = gram_matrix(d - 2, mesh.areas[t])
    block = np.zeros((space.n_local, space.n_local))
    for ax, ay, weight in _SECOND_ORDER_TERMS:
        D = cartesian_derivative_matrix(mesh, t, d, (ax, ay))
        block += weight * D.T @ G @ D
    return 0.5 * (block + block.T)


def assemble_penalty(mesh: Triangulation, space: SplineSpace, order: int = 2) -> sp.csr_matrix:
    """Energy matrix for the penalty of the given derivative ``order``.

    Only ``order=2`` is supported.
    """
    if order != 2:
        raise ValueError(f"penalty order {order} is not supported; only order 2 is implemented")
    if space.degree < 2:
        raise ValueError("the second-order penalty needs degree >= 2")
    blocks = [penalty_block(mesh, space, t) for t in range(mesh.n_triangles)]
    return sp.block_diag(blocks, format="csr")


def energy(P, gamma) -> float:
    g = np.asarray(gamma, dtype=float)
    return float(g @ (P @ g))
