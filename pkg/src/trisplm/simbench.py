"""Simulation studies: the horseshoe example and the unit-square Matérn-field example.

Example 1 samples locations from a 201 x 501 grid over ``[-1, 4] x [-1, 1]``
restricted to a horseshoe-shaped domain and uses the soap-film test surface
(distance along the horseshoe centre line plus squared distance across it).
Example 2 samples a 101 x 101 grid on the unit square with a sinusoidal
surface plus a Matérn(nu=1) Gaussian random field.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from importlib import resources
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .basis import assemble_eval_matrix
from .mesh import Triangulation, load_mesh, locate_points, make_triangulation
from .plm import SingularSystemError, SplineSetup, default_lambda_grid, gcv_select

log = logging.getLogger(__name__)

BETA_TRUE = np.array([-1.0, 1.0])

# horseshoe geometry: centre-line radius, half width of the arms, arm length
HS_RADIUS = 0.5
HS_HALF_WIDTH = 0.4
HS_ARM_LENGTH = 3.0
HS_GRID_BOX = ((-1.0, 4.0), (-1.0, 1.0))


# ---------------------------------------------------------------------------
# domains


def horseshoe_coords(x, y):
    """(distance along the centre line, signed distance across it)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = HS_RADIUS
    q = np.pi * r / 2
    along = np.zeros(np.broadcast(x, y).shape)
    across = np.zeros_like(along)
    x, y = np.broadcast_arrays(x, y)
    upper = (x >= 0) & (y > 0)
    lower = (x >= 0) & (y <= 0)
    bend = x < 0
    along[upper] = q + x[upper]
    across[upper] = y[upper] - r
    along[lower] = -q - x[lower]
    across[lower] = -r - y[lower]
    along[bend] = -np.arctan(y[bend] / x[bend]) * r
    across[bend] = np.hypot(x[bend], y[bend]) - r
    return along, across


def horseshoe_g(x, y) -> np.ndarray:
    """Soap-film horseshoe test surface (unit slope along the centre line)."""
    along, across = horseshoe_coords(x, y)
    return along + across**2


def in_horseshoe(x, y, tol: float = 0.0) -> np.ndarray:
    _, across = horseshoe_coords(x, y)
    return (np.abs(across) <= HS_HALF_WIDTH + tol) & (np.asarray(x) <= HS_ARM_LENGTH + tol)


def build_horseshoe_mesh(arm_segments: int = 10, rows: int = 3) -> Triangulation:
    """Triangulate the horseshoe from nodes laid out along its centre line.

    Nodes sit on ``rows`` curves parallel to the centre line, alternate rows
    staggered; the Delaunay triangulation of the nodes is then clipped to
    triangles whose centroid and edge midpoints lie in the domain.  The
    defaults give 106 triangles on 82 vertices.
    """
    from scipy.spatial import Delaunay

    h = HS_ARM_LENGTH / arm_segments
    pts = []
    for k, off in enumerate(np.linspace(-HS_HALF_WIDTH, HS_HALF_WIDTH, rows)):
        rad = HS_RADIUS + off
        xs = np.linspace(HS_ARM_LENGTH, 0.0, arm_segments + 1)
        if k % 2 == 1:
            xs = np.concatenate([[HS_ARM_LENGTH], (xs[:-1] + xs[1:]) / 2, [0.0]])
        for x in xs:
            pts.append((x, rad))
            pts.append((x, -rad))
        n_arc = max(3, int(round(np.pi * rad / h)))
        for t in np.linspace(np.pi / 2, 3 * np.pi / 2, n_arc + 1)[1:-1]:
            pts.append((rad * np.cos(t), rad * np.sin(t)))
    pts = np.unique(np.round(np.array(pts), 12), axis=0)
    keep = []
    for tri in Delaunay(pts).simplices:
        v = pts[tri]
        probe = np.vstack([v.mean(axis=0), (v + np.roll(v, 1, axis=0)) / 2])
        if in_horseshoe(probe[:, 0], probe[:, 1], tol=0.02).all():
            keep.append(tri)
    keep = np.array(keep)
    used, inverse = np.unique(keep, return_inverse=True)
    return make_triangulation(pts[used], inverse.reshape(-1, 3))


def _data_path(name: str):
    return resources.files("trisplm").joinpath("data", name)


@lru_cache(maxsize=None)
def horseshoe_mesh() -> Triangulation:
    """The shipped horseshoe triangulation (output of :func:`build_horseshoe_mesh`)."""
    with resources.as_file(_data_path("horseshoe.mesh")) as path:
        return load_mesh(path)


def square_mesh(k: int = 4) -> Triangulation:
    """Unit square cut into k x k cells, each split along its rising diagonal."""
    g = np.linspace(0.0, 1.0, k + 1)
    verts = np.array([(x, y) for y in g for x in g])
    tris = []
    for j in range(k):
        for i in range(k):
            a = j * (k + 1) + i
            b, c, d = a + 1, a + k + 2, a + k + 1
            tris += [(a, b, c), (a, c, d)]
    return make_triangulation(verts, tris)


@dataclasses.dataclass(frozen=True, eq=False)
class Domain:
    mesh: Triangulation
    grid: np.ndarray
    g: np.ndarray


def horseshoe_domain(grid_shape: tuple[int, int] = (201, 501), mesh: Optional[Triangulation] = None) -> Domain:
    """Horseshoe mesh, the grid points inside both the domain and the mesh, and g there.

    ``grid_shape`` is ``(ny, nx)`` over the box ``[-1, 4] x [-1, 1]``.
    """
    mesh = horseshoe_mesh() if mesh is None else mesh
    ny, nx = grid_shape
    (x0, x1), (y0, y1) = HS_GRID_BOX
    gx, gy = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts[in_horseshoe(pts[:, 0], pts[:, 1])]
    ids, _ = locate_points(mesh, pts)
    pts = pts[ids >= 0]
    return Domain(mesh, pts, horseshoe_g(pts[:, 0], pts[:, 1]))


def square_domain(size: int = 101, mesh: Optional[Triangulation] = None) -> Domain:
    mesh = square_mesh(4) if mesh is None else mesh
    g1 = np.linspace(0.0, 1.0, size)
    gx, gy = np.meshgrid(g1, g1)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return Domain(mesh, pts, example2_g(pts[:, 0], pts[:, 1]))


def example2_g(x, y) -> np.ndarray:
    return 5.0 * np.sin(2.0 * np.pi * (np.asarray(x) ** 2 + np.asarray(y) ** 2))


# ---------------------------------------------------------------------------
# Matérn random field


def matern(h, nu: float = 1.0, range_: float = 1.0, variance: float = 1.0) -> np.ndarray:
    """Matérn covariance ``variance * 2^(1-nu)/Gamma(nu) * (h/range)^nu * K_nu(h/range)``."""
    u = np.asarray(np.abs(h), dtype=float) / range_
    out = np.full(u.shape, float(variance))
    pos = u > 0
    up = u[pos]
    out[pos] = variance * 2.0 ** (1.0 - nu) / gamma_fn(nu) * up**nu * kv(nu, up)
    return out


class MaternField:
    """Gaussian random field sampler on a fixed point set via a cached Cholesky factor.

    For points on a regular grid (``grid_shape`` and ``spacing`` given) the
    covariance is filled from a table over lattice offsets.
    """

    def __init__(self, points, nu=1.0, range_=1.0, variance=1.0, grid_shape=None, spacing=None):
        self.points = np.asarray(points, dtype=float)
        self.nu, self.range_, self.variance = nu, range_, variance
        self.grid_shape, self.spacing = grid_shape, spacing
        self._factor = None

    def covariance(self) -> np.ndarray:
        n = len(self.points)
        if self.grid_shape is not None:
            ny, nx = self.grid_shape
            iy, ix = np.divmod(np.arange(n), nx)
            dx, dy = np.meshgrid(np.arange(nx) * self.spacing, np.arange(ny) * self.spacing)
            table = matern(np.hypot(dx, dy), self.nu, self.range_, self.variance)
            cov = np.empty((n, n))
            for s in range(0, n, 512):
                rows = slice(s, min(s + 512, n))
                cov[rows] = table[np.abs(iy[rows, None] - iy[None, :]), np.abs(ix[rows, None] - ix[None, :])]
            return cov
        diff = self.points[:, None, :] - self.points[None, :, :]
        return matern(np.sqrt((diff**2).sum(-1)), self.nu, self.range_, self.variance)

    @property
    def factor(self) -> np.ndarray:
        if self._factor is None:
            cov = self.covariance()
            diag = cov.diagonal().copy()
            for jitter in (0.0, 1e-10, 1e-8, 1e-6):
                np.fill_diagonal(cov, diag * (1.0 + jitter))
                try:
                    self._factor = sla.cholesky(cov, lower=True, overwrite_a=jitter > 0, check_finite=False)
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                raise np.linalg.LinAlgError("Matérn covariance is not positive definite after jitter")
        return self._factor

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.factor @ rng.standard_normal(len(self.points))


@lru_cache(maxsize=4)
def _square_field(size: int, nu: float, range_: float, variance: float) -> MaternField:
    g1 = np.linspace(0.0, 1.0, size)
    gx, gy = np.meshgrid(g1, g1)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return MaternField(pts, nu, range_, variance, grid_shape=(size, size), spacing=1.0 / (size - 1))


# ---------------------------------------------------------------------------
# data generation


@dataclasses.dataclass(frozen=True)
class SimConfig:
    example: int = 1
    rho: float = 0.0
    n: int = 200
    replicates: int = 100
    seed: int = 1
    sigma_eps: float = 0.5
    mesh: Optional[str] = None
    degree: int = 5
    smoothness: int = 1
    lambda_grid: tuple[float, float, int] = (-6.0, 7.0, 10)
    matern_nu: float = 1.0
    matern_range: float = 1.0
    matern_variance: float = 1.0
    grid_size: int = 101
    horseshoe_grid: tuple[int, int] = (201, 501)

    def __post_init__(self):
        if self.example not in (1, 2):
            raise ValueError("example must be 1 or 2")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.n < 30:
            raise ValueError("n must be at least 30")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")

    @property
    def lambdas(self) -> np.ndarray:
        lo, hi, count = self.lambda_grid
        return default_lambda_grid(lo, hi, int(count))


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    g: np.ndarray
    beta: np.ndarray
    index: np.ndarray
    grid_Z: Optional[np.ndarray] = None
    grid_Y: Optional[np.ndarray] = None


def _z2(rho, X, U):
    return np.cos(np.pi * (rho * (X[:, 0] ** 2 + X[:, 1] ** 2) + (1.0 - rho) * U))


def generate_example1(config: SimConfig, rng: np.random.Generator, domain: Optional[Domain] = None) -> Dataset:
    """Sample ``n`` horseshoe grid locations without replacement and build the responses."""
    domain = horseshoe_domain(config.horseshoe_grid) if domain is None else domain
    idx = np.sort(rng.choice(len(domain.grid), size=config.n, replace=False))
    X = domain.grid[idx]
    z1 = rng.uniform(-1.0, 1.0, config.n)
    u = rng.uniform(-1.0, 1.0, config.n)
    eps = rng.normal(0.0, config.sigma_eps, config.n)
    Z = np.column_stack([z1, _z2(config.rho, X, u)])
    g = domain.g[idx]
    return Dataset(X, Z, Z @ BETA_TRUE + g + eps, g, BETA_TRUE.copy(), idx)


def generate_example2(
    config: SimConfig, rng: np.random.Generator, domain: Optional[Domain] = None, field: Optional[MaternField] = None
) -> Dataset:
    """Realise the model on the whole unit-square grid, then sample ``n`` grid points."""
    domain = square_domain(config.grid_size) if domain is None else domain
    if field is None:
        field = _square_field(config.grid_size, config.matern_nu, config.matern_range, config.matern_variance)
    m = len(domain.grid)
    z1 = rng.uniform(-1.0, 1.0, m)
    u = rng.uniform(-1.0, 1.0, m)
    eps = rng.normal(0.0, config.sigma_eps, m)
    xi = field.sample(rng)
    Zg = np.column_stack([z1, _z2(config.rho, domain.grid, u)])
    Yg = Zg @ BETA_TRUE + domain.g + xi + eps
    idx = np.sort(rng.choice(m, size=config.n, replace=False))
    return Dataset(domain.grid[idx], Zg[idx], Yg[idx], domain.g[idx], BETA_TRUE.copy(), idx, Zg, Yg)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclasses.dataclass(frozen=True)
class ReplicateResult:
    index: int
    beta_hat: np.ndarray
    se: np.ndarray
    sigma_hat: float
    mspe: float
    lam: float
    df: float
    covered: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class McReport:
    config: SimConfig
    rmse_beta: np.ndarray
    rmse_sigma: float
    mspe: float
    se_mc: np.ndarray
    se_mean: np.ndarray
    se_median: np.ndarray
    se_mad: np.ndarray
    coverage: np.ndarray
    failures: list[int]
    replicates: list[ReplicateResult]

    @property
    def rmse_beta1(self) -> float:
        return float(self.rmse_beta[0])

    @property
    def rmse_beta2(self) -> float:
        return float(self.rmse_beta[1])

    @property
    def mspe_name(self) -> str:
        return "mspe_g" if self.config.example == 1 else "mspe_y"

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("n", float(self.config.n)),
            ("replicates", float(len(self.replicates))),
            ("failures", float(len(self.failures))),
            ("rmse_beta1", self.rmse_beta1),
            ("rmse_beta2", self.rmse_beta2),
            ("rmse_sigma", self.rmse_sigma),
            (self.mspe_name, self.mspe),
        ]
        for j in range(len(self.se_mc)):
            name = f"beta{j + 1}"
            out += [
                (f"se_mc_{name}", float(self.se_mc[j])),
                (f"se_mean_{name}", float(self.se_mean[j])),
                (f"se_median_{name}", float(self.se_median[j])),
                (f"se_mad_{name}", float(self.se_mad[j])),
                (f"coverage_{name}", float(self.coverage[j])),
            ]
        return out

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        if header:
            for line in report_header(self.config):
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["example", "rho", "method", "statistic", "value"])
        for stat, value in self.rows():
            w.writerow([self.config.example, repr(float(self.config.rho)), "BPST", stat, repr(value)])
        return buf.getvalue()


def report_header(config: SimConfig) -> list[str]:
    lines = [
        f"example={config.example} rho={config.rho!r} n={config.n} replicates={config.replicates} seed={config.seed}",
        f"spline degree={config.degree} smoothness={config.smoothness} mesh={config.mesh or 'default'}",
        f"log10 lambda grid={config.lambda_grid[0]!r}:{config.lambda_grid[1]!r}:{config.lambda_grid[2]}",
    ]
    if config.example == 2:
        lines.append(
            f"matern field: nu={config.matern_nu!r} range={config.matern_range!r} "
            f"variance={config.matern_variance!r} (assumed scale)"
        )
    return lines


class _Context:
    """Per-process state shared by all replicates of one configuration."""

    def __init__(self, config: SimConfig):
        self.config = config
        if config.example == 1:
            mesh = load_mesh(config.mesh) if config.mesh else horseshoe_mesh()
            self.domain = horseshoe_domain(config.horseshoe_grid, mesh)
            self.field = None
        else:
            mesh = _square_mesh_choice(config.mesh)
            self.domain = square_domain(config.grid_size, mesh)
            self.field = _square_field(config.grid_size, config.matern_nu, config.matern_range, config.matern_variance)
        self.setup = SplineSetup.build(mesh, config.degree, config.smoothness)
        self.grid_B = assemble_eval_matrix(mesh, self.setup.space, self.domain.grid)


def _square_mesh_choice(choice: Optional[str]) -> Triangulation:
    if choice in (None, "square32"):
        return square_mesh(4)
    if choice == "square8":
        return square_mesh(2)
    return load_mesh(choice)


def run_replicate(ctx: _Context, index: int) -> ReplicateResult:
    cfg = ctx.config
    rng = np.random.default_rng(cfg.seed + index)
    if cfg.example == 1:
        data = generate_example1(cfg, rng, ctx.domain)
    else:
        data = generate_example2(cfg, rng, ctx.domain, ctx.field)
    problem = ctx.setup.problem(data.X, data.Z, data.Y, cfg.lambdas)
    fit = gcv_select(problem, cfg.degree, cfg.smoothness)
    g_grid = ctx.grid_B @ fit.gamma_hat
    if cfg.example == 1:
        mspe = float(np.mean((g_grid - ctx.domain.g) ** 2))
    else:
        mspe = float(np.mean((data.grid_Y - data.grid_Z @ fit.beta_hat - g_grid) ** 2))
    covered = (fit.ci_lower <= data.beta) & (data.beta <= fit.ci_upper)
    return ReplicateResult(index, fit.beta_hat, fit.se, float(np.sqrt(fit.sigma2_hat)), mspe, fit.lam, fit.df, covered)


_WORKER_CTX: Optional[_Context] = None


def _worker_init(config: SimConfig):
    global _WORKER_CTX
    _WORKER_CTX = _Context(config)


def _safe_replicate(ctx: _Context, index: int):
    try:
        return run_replicate(ctx, index)
    except (SingularSystemError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("replicate %d failed: %s", index, exc)
        return index


def _worker_run(index: int):
    return _safe_replicate(_WORKER_CTX, index)


def aggregate(config: SimConfig, results: list[ReplicateResult], failures: list[int]) -> McReport:
    beta = np.array([r.beta_hat for r in results])
    se = np.array([r.se for r in results])
    sig = np.array([r.sigma_hat for r in results])
    err = beta - BETA_TRUE
    q75, q25 = np.percentile(se, [75, 25], axis=0)
    return McReport(
        config=config,
        rmse_beta=np.sqrt(np.mean(err**2, axis=0)),
        rmse_sigma=float(np.sqrt(np.mean((sig - config.sigma_eps) ** 2))),
        mspe=float(np.mean([r.mspe for r in results])),
        se_mc=beta.std(axis=0, ddof=1) if len(results) > 1 else np.zeros(beta.shape[1]),
        se_mean=se.mean(axis=0),
        se_median=np.median(se, axis=0),
        se_mad=(q75 - q25) / 1.349,
        coverage=np.mean([r.covered for r in results], axis=0),
        failures=failures,
        replicates=results,
    )


def run_mc(config: SimConfig, workers: int = 1) -> McReport:
    """Run ``config.replicates`` seeded replicates and aggregate them.

    Replicate ``i`` draws from ``default_rng(config.seed + i)`` so results do
    not depend on ``workers``.  Raises RuntimeError when at least 10% of the
    replicates fail.
    """
    indices = list(range(config.replicates))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(config,)) as pool:
            outcomes = list(pool.map(_worker_run, indices))
    else:
        ctx = _Context(config)
        outcomes = [_safe_replicate(ctx, i) for i in indices]
    results = [o for o in outcomes if isinstance(o, ReplicateResult)]
    failures = [o for o in outcomes if not isinstance(o, ReplicateResult)]
    if failures and len(failures) >= 0.1 * config.replicates:
        raise RuntimeError(f"{len(failures)} of {config.replicates} replicates failed: {failures}")
    return aggregate(config, results, failures)


def grid_predictions(config: SimConfig, index: int = 0):
    """Grid points with ``g_hat`` (and ``y_hat`` for example 2) from one replicate."""
    ctx = _Context(config)
    rng = np.random.default_rng(config.seed + index)
    if config.example == 1:
        data = generate_example1(config, rng, ctx.domain)
    else:
        data = generate_example2(config, rng, ctx.domain, ctx.field)
    fit = gcv_select(ctx.setup.problem(data.X, data.Z, data.Y, config.lambdas), config.degree, config.smoothness)
    g_hat = ctx.grid_B @ fit.gamma_hat
    y_hat = None if config.example == 1 else data.grid_Z @ fit.beta_hat + g_hat
    return ctx.domain.grid, g_hat, y_hat


def write_grid_csv(path, points, g_hat, y_hat=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "g_hat"] + ([] if y_hat is None else ["y_hat"]))
        for k, (x, y) in enumerate(points.tolist()):
            row = [repr(x), repr(y), repr(float(g_hat[k]))]
            if y_hat is not None:
                row.append(repr(float(y_hat[k])))
            w.writerow(row)
