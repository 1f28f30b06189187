"""Shared test utilities."""

import numpy as np

import oracles
from trisplm.basis import cartesian_derivative_matrix, n_local


def random_interior_points(mesh, n, rng, margin=0.02):
    """Points drawn uniformly inside random triangles, kept off the edges."""
    t = rng.integers(0, mesh.n_triangles, n)
    b = rng.dirichlet([1.0, 1.0, 1.0], n)
    b = margin + (1.0 - 3.0 * margin) * b
    v = mesh.vertices[mesh.triangles[t]]
    return np.einsum("ni,nij->nj", b, v)


def kkt_instances():
    """Five small fitting problems: ``(name, mesh, degree, smoothness, n, p, lam)``."""
    from trisplm.mesh import make_triangulation
    from trisplm.simbench import square_mesh

    square2 = make_triangulation([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])
    fan = make_triangulation(
        [[0, 0], [1, 0], [0.2, 0.9], [1.3, 1.1], [-0.6, 0.7]], [[0, 1, 2], [1, 3, 2], [0, 2, 4]]
    )
    quad = make_triangulation(
        [[0, 0], [1.1, 0.1], [1.0, 1.0], [0.0, 1.2], [0.5, 0.45]], [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]]
    )
    return [
        ("two triangles d=2 r=0", square2, 2, 0, 30, 1, 0.1),
        ("three triangles d=5 r=1", fan, 5, 1, 60, 2, 1e-2),
        ("four triangles d=5 r=0", quad, 5, 0, 50, 1, 1.0),
        ("eight triangles d=2 r=1", square_mesh(2), 2, 1, 60, 2, 1e-3),
        ("eight triangles d=5 r=1 no Z", square_mesh(2), 5, 1, 60, 0, 0.3),
    ]


def kkt_data(mesh, n, p, rng):
    X = random_interior_points(mesh, n, rng, margin=0.0)
    Z = rng.normal(size=(n, p))
    Y = np.sin(2 * X[:, 0]) + X[:, 1] ** 2 + Z @ np.linspace(1.0, -1.0, p) + 0.1 * rng.normal(size=n)
    return X, Z, Y


def quadrature_energy(mesh, d, gamma, order=8):
    """E_2 of the spline by quadrature of its second partials, piece by piece."""
    nloc = n_local(d)
    total = 0.0
    for t in range(mesh.n_triangles):
        v = mesh.triangle_vertices(t)
        _, w, b = oracles.triangle_quadrature(v, order)
        c = gamma[t * nloc:(t + 1) * nloc]
        vals = {}
        for orders in ((2, 0), (1, 1), (0, 2)):
            D = cartesian_derivative_matrix(mesh, t, d, orders)
            vals[orders] = np.column_stack([oracles.bernstein(d - 2, ijk, b) for ijk in oracles.multi_indices(d - 2)]) @ (D @ c)
        total += w @ (vals[(2, 0)] ** 2 + 2 * vals[(1, 1)] ** 2 + vals[(0, 2)] ** 2)
    return total
