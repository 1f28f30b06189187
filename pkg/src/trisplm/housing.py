"""California house values: data loading, the spatial PLM design and k-fold CV."""

from __future__ import annotations

import csv
import dataclasses
import logging
from functools import lru_cache
from importlib import resources
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .mesh import Triangulation, load_mesh, locate_points, make_triangulation
from .plm import SplineSetup, gcv_select, predict

log = logging.getLogger(__name__)

COLUMNS = (
    "longitude",
    "latitude",
    "medianHouseValue",
    "medianIncome",
    "housingMedianAge",
    "totalBedrooms",
    "households",
    "population",
)
# whitespace layout of the StatLib cadata file (no header)
STATLIB_COLUMNS = (
    "medianHouseValue",
    "medianIncome",
    "housingMedianAge",
    "totalRooms",
    "totalBedrooms",
    "population",
    "households",
    "latitude",
    "longitude",
)
Z_NAMES = ("MedInc", "log(Age)", "log(AveBedrms)", "log(AveOccup)", "log(Hhd)")
CA_BOX = ((-124.6, -114.0), (32.3, 42.1))

# coarse state outline (lon, lat), pushed slightly seaward along the coast
CA_OUTLINE = np.array([
    (-124.45, 42.00), (-120.00, 42.00), (-120.00, 39.00), (-114.60, 35.00),
    (-114.10, 34.30), (-114.45, 32.70), (-117.15, 32.45), (-117.40, 33.00),
    (-118.10, 33.55), (-118.50, 33.65), (-118.70, 33.95), (-119.30, 34.05),
    (-119.80, 34.30), (-120.60, 34.40), (-120.75, 34.60), (-120.80, 35.10),
    (-121.05, 35.45), (-121.60, 36.00), (-122.05, 36.55), (-122.15, 36.90),
    (-122.60, 37.45), (-122.65, 37.80), (-123.15, 37.95), (-123.25, 38.30),
    (-123.85, 38.95), (-123.95, 39.50), (-124.20, 40.00), (-124.55, 40.45),
    (-124.35, 40.85), (-124.30, 41.20), (-124.40, 41.75),
])


@dataclasses.dataclass(frozen=True)
class HousingRecord:
    longitude: float
    latitude: float
    med_value: float
    med_income: float
    age: float
    ave_bedrms: float
    ave_occup: float
    households: float


class RecordList(list):
    """A list of records remembering how many input rows were dropped."""

    def __init__(self, records=(), dropped: int = 0):
        super().__init__(records)
        self.dropped = dropped


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path} is empty")
    head = lines[0]
    if any(c.isalpha() for c in head):
        reader = csv.DictReader(lines)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path} is missing columns: {', '.join(missing)}")
        return list(reader)
    rows = []
    for ln in lines:
        parts = ln.replace(",", " ").split()
        if len(parts) != len(STATLIB_COLUMNS):
            raise ValueError(f"{path}: expected {len(STATLIB_COLUMNS)} fields per row without a header")
        rows.append(dict(zip(STATLIB_COLUMNS, parts)))
    return rows


def load_housing(path) -> RecordList:
    """Read block-group records; rows with non-positive logged quantities or
    coordinates outside California are dropped (count in ``.dropped``)."""
    out, dropped = [], 0
    (lon0, lon1), (lat0, lat1) = CA_BOX
    for row in _rows(path):
        try:
            lon, lat = float(row["longitude"]), float(row["latitude"])
            value, income = float(row["medianHouseValue"]), float(row["medianIncome"])
            age, bedrooms = float(row["housingMedianAge"]), float(row["totalBedrooms"])
            hhd, pop = float(row["households"]), float(row["population"])
        except (TypeError, ValueError):
            dropped += 1
            continue
        if min(value, income, age, bedrooms, hhd, pop) <= 0 or not (lon0 <= lon <= lon1 and lat0 <= lat <= lat1):
            dropped += 1
            continue
        out.append(HousingRecord(lon, lat, value, income, age, bedrooms / hhd, pop / hhd, hhd))
    if dropped:
        log.info("dropped %d housing rows", dropped)
    return RecordList(out, dropped)


@dataclasses.dataclass(frozen=True, eq=False)
class HousingDesign:
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    kept: np.ndarray
    excluded: np.ndarray


def build_design(records, mesh: Triangulation) -> HousingDesign:
    """Locations, covariates ``[MedInc, log Age, log AveBedrms, log AveOccup, log Hhd]`` and log value.

    Records outside the mesh are excluded; their indices are in ``excluded``.
    No intercept column: the constant is absorbed into the spatial surface.
    """
    recs = list(records)
    X = np.array([(r.longitude, r.latitude) for r in recs], dtype=float).reshape(-1, 2)
    Z = np.array(
        [(r.med_income, np.log(r.age), np.log(r.ave_bedrms), np.log(r.ave_occup), np.log(r.households)) for r in recs],
        dtype=float,
    ).reshape(-1, 5)
    Y = np.log(np.array([r.med_value for r in recs], dtype=float))
    ids, _ = locate_points(mesh, X)
    inside = ids >= 0
    excluded = np.flatnonzero(~inside)
    if len(excluded):
        log.warning("%d records outside the mesh were excluded", len(excluded))
    kept = np.flatnonzero(inside)
    return HousingDesign(X[kept], Z[kept], Y[kept], kept, excluded)


def ols(Z: np.ndarray, Y: np.ndarray):
    """Least squares with an intercept; returns ``(coef, se)`` with the intercept first."""
    D = np.column_stack([np.ones(len(Y)), Z])
    coef, *_ = np.linalg.lstsq(D, Y, rcond=None)
    resid = Y - D @ coef
    s2 = resid @ resid / (len(Y) - D.shape[1])
    se = np.sqrt(np.diag(s2 * np.linalg.inv(D.T @ D)))
    return coef, se


@dataclasses.dataclass(frozen=True)
class CvReport:
    fold_mspe: list[float]
    mean_mspe: float
    ols_fold_mspe: list[float]
    ols_mean_mspe: float
    excluded: int


def fold_assignment(n: int, k: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def kfold_cv(records, mesh: Triangulation, k: int = 5, seed: int = 1, degree: int = 5, smoothness: int = 1,
             lambdas=None, setup: Optional[SplineSetup] = None, workers: int = 1) -> CvReport:
    """k-fold cross-validated MSPE of log value for the spatial PLM and a Z-only OLS fit.

    Held-out points are predicted with the fit on the remaining folds; the
    OLS baseline (with intercept) uses the same folds.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > 20:
        raise ValueError("k above 20 is not supported")
    design = build_design(records, mesh)
    setup = SplineSetup.build(mesh, degree, smoothness) if setup is None else setup
    folds = fold_assignment(len(design.Y), k, seed)

    def one_fold(f):
        test = folds[f]
        train = np.setdiff1d(np.arange(len(design.Y)), test)
        try:
            problem = setup.problem(design.X[train], design.Z[train], design.Y[train], lambdas)
            fit = gcv_select(problem, degree, smoothness)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise RuntimeError(f"fit failed on fold {f}: {exc}") from exc
        pred = predict(fit, mesh, setup.space, design.X[test], design.Z[test])
        ok = pred.inside
        plm = float(np.mean((design.Y[test][ok] - pred.y_hat[ok]) ** 2))
        coef, _ = ols(design.Z[train], design.Y[train])
        base = float(np.mean((design.Y[test] - coef[0] - design.Z[test] @ coef[1:]) ** 2))
        return plm, base

    if workers > 1:
        with ThreadPoolExecutor(max_workers=min(workers, k)) as pool:
            errs = list(pool.map(one_fold, range(k)))
    else:
        errs = [one_fold(f) for f in range(k)]
    plm_err = [e[0] for e in errs]
    ols_err = [e[1] for e in errs]
    return CvReport(plm_err, float(np.mean(plm_err)), ols_err, float(np.mean(ols_err)), len(design.excluded))


def _inside_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    for (x1, y1), (x2, y2) in zip(poly, np.roll(poly, -1, axis=0)):
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def build_california_mesh(spacing: float = 0.55, boundary_step: float = 0.5) -> Triangulation:
    """Triangulate the coarse state outline from boundary nodes plus an interior lattice.

    Delaunay triangles with centroid inside the outline are kept; a subset
    of a Delaunay triangulation is conforming.
    """
    from scipy.spatial import Delaunay

    poly = CA_OUTLINE
    nodes = []
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        steps = max(1, int(np.ceil(np.linalg.norm(b - a) / boundary_step)))
        for t in np.arange(steps) / steps:
            nodes.append(a + t * (b - a))
    nodes = np.array(nodes)
    (lon0, lon1), (lat0, lat1) = CA_BOX
    gx, gy = np.meshgrid(np.arange(lon0, lon1, spacing), np.arange(lat0, lat1, spacing * 0.866))
    gx = gx + (np.arange(gx.shape[0])[:, None] % 2) * spacing / 2
    lattice = np.column_stack([gx.ravel(), gy.ravel()])
    lattice = lattice[_inside_polygon(lattice, poly)]
    # keep lattice nodes away from the outline
    dist = np.min(np.linalg.norm(lattice[:, None, :] - nodes[None, :, :], axis=2), axis=1)
    pts = np.vstack([nodes, lattice[dist > 0.45 * spacing]])
    tri = Delaunay(pts).simplices
    keep = tri[_inside_polygon(pts[tri].mean(axis=1), poly)]
    # collinear outline nodes produce zero-area slivers
    p0, p1, p2 = (pts[keep[:, i]] for i in range(3))
    e1, e2 = p1 - p0, p2 - p0
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    keep = keep[area > 1e-8 * area.max()]
    used, inverse = np.unique(keep, return_inverse=True)
    return make_triangulation(pts[used], inverse.reshape(-1, 3))


@lru_cache(maxsize=None)
def california_mesh() -> Triangulation:
    """The shipped California triangulation (output of :func:`build_california_mesh`)."""
    with resources.as_file(resources.files("trisplm").joinpath("data", "california.mesh")) as path:
        return load_mesh(path)
