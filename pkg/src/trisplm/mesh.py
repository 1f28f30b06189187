"""Triangulations: storage, validation, refinement, point location and quality."""

from __future__ import annotations

import dataclasses
from functools import cached_property
from os import PathLike
from typing import Optional, Union

import numpy as np

INSIDE_TOL = 1e-10


class MeshError(ValueError):
    """Raised for unreadable or invalid triangulations."""

    def __init__(self, message: str, pair: Optional[tuple[int, int]] = None):
        super().__init__(message)
        self.pair = pair


@dataclasses.dataclass(frozen=True)
class BaryCoord:
    b1: float
    b2: float
    b3: float
    triangle_id: int

    def as_array(self) -> np.ndarray:
        return np.array([self.b1, self.b2, self.b3])


@dataclasses.dataclass(frozen=True)
class MeshQuality:
    mesh_size: float
    shape_param: float
    triangle_count: int


@dataclasses.dataclass(frozen=True, eq=False)
class Triangulation:
    """Conforming triangulation of a polygonal domain.

    Parameters
    ----------
    vertices : (V, 2) array
    triangles : (N, 3) int array of vertex indices, counter-clockwise.

    Instances are immutable; use :func:`make_triangulation` to build a
    validated, orientation-normalised mesh from raw arrays.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_vertices(self, t: int) -> np.ndarray:
        """(3, 2) array with the corner coordinates of triangle ``t``."""
        return self.vertices[self.triangles[t]]

    @cached_property
    def areas(self) -> np.ndarray:
        return np.abs(_signed_areas(self.vertices, self.triangles))

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def edges(self) -> dict[tuple[int, int], tuple[int, ...]]:
        """Sorted vertex pair -> owning triangle ids (ascending)."""
        owners: dict[tuple[int, int], list[int]] = {}
        for t, (a, b, c) in enumerate(self.triangles.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                owners.setdefault((min(u, v), max(u, v)), []).append(t)
        return {e: tuple(ts) for e, ts in sorted(owners.items())}

    @property
    def interior_edges(self) -> list[tuple[int, int]]:
        return [e for e, ts in self.edges.items() if len(ts) == 2]

    @property
    def boundary_edges(self) -> list[tuple[int, int]]:
        return [e for e, ts in self.edges.items() if len(ts) == 1]

    @cached_property
    def _affine_inverses(self) -> np.ndarray:
        # maps (x, y, 1) to barycentric coordinates, one 3x3 block per triangle
        v = self.vertices[self.triangles]
        a = np.ones((len(v), 3, 3))
        a[:, 0, :] = v[:, :, 0]
        a[:, 1, :] = v[:, :, 1]
        return np.linalg.inv(a)

    def barycentric(self, t: int, points: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of ``points`` (n, 2) relative to triangle ``t``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inv = self._affine_inverses[t]
        return pts @ inv[:, :2].T + inv[:, 2]

    def bary_direction(self, t: int, direction) -> np.ndarray:
        """Barycentric form (summing to zero) of a Cartesian direction vector."""
        inv = self._affine_inverses[t]
        return inv[:, :2] @ np.asarray(direction, dtype=float)


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def make_triangulation(vertices, triangles, validate: bool = True) -> Triangulation:
    """Build a Triangulation, normalising orientation to counter-clockwise.

    Raises
    ------
    MeshError
        If a triangle is degenerate, indices are out of range, or the
        triangulation is not conforming.
    """
    v = np.array(vertices, dtype=float).reshape(-1, 2)
    t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    if len(t) == 0:
        raise MeshError("triangulation has no triangles")
    if t.min() < 0 or t.max() >= len(v):
        raise MeshError("triangle vertex index out of range")
    if np.any(t[:, 0] == t[:, 1]) or np.any(t[:, 1] == t[:, 2]) or np.any(t[:, 0] == t[:, 2]):
        bad = int(np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2]))[0])
        raise MeshError(f"triangle {bad} repeats a vertex", pair=(bad, bad))
    area = _signed_areas(v, t)
    scale = np.ptp(v, axis=0).max() if len(v) else 1.0
    degenerate = np.abs(area) <= 1e-14 * max(scale, 1e-300) ** 2
    if degenerate.any():
        bad = int(np.flatnonzero(degenerate)[0])
        raise MeshError(f"triangle {bad} is degenerate (zero area)", pair=(bad, bad))
    cw = area < 0
    t[cw] = t[cw][:, [0, 2, 1]]
    v.setflags(write=False)
    t.setflags(write=False)
    mesh = Triangulation(v, t)
    if validate:
        check_conforming(mesh)
    return mesh


def check_conforming(mesh: Triangulation) -> None:
    """Raise MeshError naming an offending triangle pair if ``mesh`` is not conforming."""
    tris = mesh.triangles
    keys = np.sort(tris, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = keys[first[np.argmax(counts > 1)]]
        same = np.flatnonzero((keys == dup).all(axis=1))
        raise MeshError(f"triangles {same[0]} and {same[1]} are duplicates", pair=(int(same[0]), int(same[1])))

    for e, ts in mesh.edges.items():
        if len(ts) > 2:
            raise MeshError(f"edge {e} is shared by more than two triangles {ts}", pair=(ts[0], ts[1]))

    # a vertex may touch a triangle only as one of its corners
    incident: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for t, row in enumerate(tris.tolist()):
        for v in row:
            incident[v].append(t)
    pts = mesh.vertices
    for t in range(mesh.n_triangles):
        b = mesh.barycentric(t, pts)
        hit = np.all(b >= -INSIDE_TOL, axis=1)
        hit[tris[t]] = False
        if hit.any():
            v = int(np.flatnonzero(hit)[0])
            other = incident[v][0] if incident[v] else t
            kind = "hanging vertex" if np.any(np.abs(b[v]) <= INSIDE_TOL) else "overlap"
            raise MeshError(
                f"triangles {min(t, other)} and {max(t, other)} are not conforming "
                f"({kind}: vertex {v} lies in triangle {t})",
                pair=(min(t, other), max(t, other)),
            )

    _check_edge_crossings(mesh)


def _check_edge_crossings(mesh: Triangulation) -> None:
    edges = list(mesh.edges.keys())
    owners = list(mesh.edges.values())
    e = np.array(edges)
    p, q = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    xmin = np.minimum(p[:, 0], q[:, 0])
    xmax = np.maximum(p[:, 0], q[:, 0])
    ymin = np.minimum(p[:, 1], q[:, 1])
    ymax = np.maximum(p[:, 1], q[:, 1])
    order = np.argsort(xmin, kind="stable")
    xs = xmin[order]

    def cross(o, a, b):
        return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])

    for pos, i in enumerate(order):
        stop = np.searchsorted(xs, xmax[i], side="right")
        cand = order[pos + 1:stop]
        if len(cand) == 0:
            continue
        cand = cand[(ymin[cand] <= ymax[i]) & (ymax[cand] >= ymin[i])]
        shared = (e[cand] == e[i, 0]).any(axis=1) | (e[cand] == e[i, 1]).any(axis=1)
        cand = cand[~shared]
        if len(cand) == 0:
            continue
        d1 = cross(p[i], q[i], p[cand])
        d2 = cross(p[i], q[i], q[cand])
        d3 = cross(p[cand], q[cand], p[i])
        d4 = cross(p[cand], q[cand], q[i])
        proper = (d1 * d2 < 0) & (d3 * d4 < 0)
        if proper.any():
            j = int(cand[np.argmax(proper)])
            a, b = owners[i][0], owners[j][0]
            raise MeshError(
                f"triangles {min(a, b)} and {max(a, b)} overlap (edges {edges[i]} and {edges[j]} cross)",
                pair=(min(a, b), max(a, b)),
            )


def load_mesh(path: Union[str, PathLike]) -> Triangulation:
    """Read a mesh file: ``V T`` header, V lines ``x y``, T lines ``i j k``."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        nv, nt = int(lines[0][0]), int(lines[0][1])
        verts = [[float(a), float(b)] for a, b in lines[1:1 + nv]]
        tris = [[int(a), int(b), int(c)] for a, b, c in lines[1 + nv:1 + nv + nt]]
    except (IndexError, ValueError) as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from exc
    if len(verts) != nv or len(tris) != nt or len(lines) != 1 + nv + nt:
        raise MeshError(f"cannot parse mesh file {path}: expected {nv} vertices and {nt} triangles")
    return make_triangulation(verts, tris)


def save_mesh(mesh: Triangulation, path: Union[str, PathLike]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
        for x, y in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r}\n")
        for a, b, c in mesh.triangles.tolist():
            fh.write(f"{a} {b} {c}\n")


def refine(mesh: Triangulation) -> Triangulation:
    """Split every triangle into four via its edge midpoints."""
    nv = mesh.n_vertices
    midpoint_id = {e: nv + k for k, e in enumerate(mesh.edges)}
    mids = np.array([(mesh.vertices[a] + mesh.vertices[b]) / 2 for a, b in mesh.edges])
    verts = np.vstack([mesh.vertices, mids])
    new = []
    for a, b, c in mesh.triangles.tolist():
        ab = midpoint_id[(min(a, b), max(a, b))]
        bc = midpoint_id[(min(b, c), max(b, c))]
        ca = midpoint_id[(min(c, a), max(c, a))]
        new.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
    # midpoint subdivision of a conforming mesh is conforming
    return make_triangulation(verts, new, validate=False)


def locate_points(mesh: Triangulation, points, tol: float = INSIDE_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised point location.

    Returns
    -------
    tri_ids : (n,) int array, -1 for points outside the mesh
    bary : (n, 3) barycentric coordinates in the assigned triangle (NaN outside)
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(pts)
    tri_ids = np.full(n, -1, dtype=np.int64)
    bary = np.full((n, 3), np.nan)
    if n == 0:
        return tri_ids, bary
    v = mesh.vertices[mesh.triangles]
    lo, hi = v.min(axis=1), v.max(axis=1)
    pad = 1e-9 * max(np.ptp(mesh.vertices, axis=0).max(), 1.0)
    for t in range(mesh.n_triangles):
        todo = tri_ids < 0
        todo &= (pts[:, 0] >= lo[t, 0] - pad) & (pts[:, 0] <= hi[t, 0] + pad)
        todo &= (pts[:, 1] >= lo[t, 1] - pad) & (pts[:, 1] <= hi[t, 1] + pad)
        idx = np.flatnonzero(todo)
        if len(idx) == 0:
            continue
        b = mesh.barycentric(t, pts[idx])
        ok = np.all(b >= -tol, axis=1)
        tri_ids[idx[ok]] = t
        bary[idx[ok]] = b[ok]
    return tri_ids, bary


def locate(mesh: Triangulation, point) -> Optional[BaryCoord]:
    """Locate a single point; ``None`` marks a point outside the mesh."""
    ids, b = locate_points(mesh, np.asarray(point, dtype=float).reshape(1, 2))
    if ids[0] < 0:
        return None
    return BaryCoord(float(b[0, 0]), float(b[0, 1]), float(b[0, 2]), int(ids[0]))


def quality(mesh: Triangulation) -> MeshQuality:
    v = mesh.vertices[mesh.triangles]
    lengths = np.linalg.norm(v - np.roll(v, -1, axis=1), axis=2)
    area = mesh.areas
    if np.any(area <= 0):
        raise MeshError("degenerate triangle in quality computation")
    longest = lengths.max(axis=1)
    inradius = 2.0 * area / lengths.sum(axis=1)
    return MeshQuality(
        mesh_size=float(longest.max()),
        shape_param=float((longest / inradius).max()),
        triangle_count=mesh.n_triangles,
    )
