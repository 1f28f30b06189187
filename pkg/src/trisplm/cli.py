"""Command-line interface: mesh tools, fitting, prediction, simulation and housing CV.

Exit codes: 0 success, 1 numerical failure, 2 invalid mesh, 3 data outside
the mesh, 64 usage errors (bad flags or malformed input files).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import re
import sys
from typing import Optional, Sequence

import numpy as np

from .basis import OutsideMeshError, SplineSpace
from .mesh import MeshError, load_mesh, quality, refine, save_mesh
from .plm import FitResult, SplineSetup, default_lambda_grid, gcv_select, predict

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MESH = 2
EXIT_OUTSIDE = 3
EXIT_USAGE = 64
SEED_ENV = "TRISPLM_SEED"
DEFAULT_SEED = 1

log = logging.getLogger("trisplm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclasses.dataclass(frozen=True)
class CliConfig:
    subcommand: str
    inputs: tuple[str, ...] = ()
    output: Optional[str] = None
    degree: int = 5
    smoothness: int = 1
    lambda_grid: tuple[float, float, int] = (-6.0, 7.0, 10)
    seed: int = DEFAULT_SEED
    replicates: int = 100
    parallelism: int = 1

    def __post_init__(self):
        if self.degree < 2:
            raise UsageError("degree must be at least 2 for the second-order penalty")
        if not 0 <= self.smoothness < self.degree:
            raise UsageError("smoothness must satisfy 0 <= r < d")
        if self.lambda_grid[2] < 1:
            raise UsageError("lambda grid count must be at least 1")
        if self.parallelism < 1:
            raise UsageError("parallelism must be positive")

    @property
    def lambdas(self) -> np.ndarray:
        lo, hi, count = self.lambda_grid
        return default_lambda_grid(lo, hi, count)


def parse_lambda_grid(text: str) -> tuple[float, float, int]:
    """``"lo:hi:count"`` in log10 units, e.g. ``-6:7:10``."""
    parts = text.split(":")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except (IndexError, ValueError):
        raise argparse.ArgumentTypeError(f"expected lo:hi:count, got {text!r}") from None
    if len(parts) != 3 or count < 1:
        raise argparse.ArgumentTypeError(f"expected lo:hi:count with count >= 1, got {text!r}")
    return lo, hi, count


def _join_negative_values(argv: Sequence[str]) -> list[str]:
    # "--lambda-grid -6:7:10" would otherwise be read as an unknown option
    out, it = [], iter(argv)
    for tok in it:
        if tok == "--lambda-grid":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def _resolve_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _spline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--degree", type=int, default=5, help="polynomial degree d (default 5)")
    p.add_argument("--smoothness", type=int, default=1, help="continuity order r (default 1)")
    p.add_argument("--lambda-grid", type=parse_lambda_grid, default=(-6.0, 7.0, 10),
                   help="log10 lambda grid lo:hi:count (default -6:7:10)")
    p.add_argument("--parallelism", type=int, default=1, help="worker cap")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trisplm", description="Partially linear models with bivariate penalized splines on triangulations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("mesh", help="refine a mesh or report its quality")
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    p.add_argument("--refine", type=int, default=0, metavar="N", help="uniform refinements (each splits triangles in 4)")
    p.add_argument("--quality", action="store_true", help="print N, mesh size and shape parameter")

    p = sub.add_parser("fit", help="fit Y = Z beta + g(X) by penalized splines with GCV")
    p.add_argument("data", help="CSV with columns x1,x2,z1..zp,y")
    p.add_argument("mesh")
    _spline_flags(p)
    p.add_argument("--out", help="FitResult JSON file")
    p.add_argument("--fitted", help="CSV of fitted values at the data points")

    p = sub.add_parser("predict", help="evaluate a fit at new points")
    p.add_argument("fitresult")
    p.add_argument("mesh")
    p.add_argument("points", help="CSV with columns x1,x2 and optionally z1..zp")
    p.add_argument("--out", help="output CSV (default stdout)")

    p = sub.add_parser("simulate", help="Monte-Carlo benchmark")
    p.add_argument("--example", type=int, choices=(1, 2), required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--seed", type=int, default=None, help=f"base seed (falls back to ${SEED_ENV}, then 1)")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--mesh", default=None, help="mesh file, or square32/square8 for example 2")
    p.add_argument("--matern-range", type=float, default=1.0)
    p.add_argument("--matern-nu", type=float, default=1.0)
    p.add_argument("--matern-variance", type=float, default=1.0)
    _spline_flags(p)
    p.add_argument("--out", help="report CSV (default stdout)")
    p.add_argument("--grid-out", help="grid CSV of g_hat from the first replicate")

    p = sub.add_parser("housing", help="California house value study")
    p.add_argument("data", help="CSV with the cadata columns")
    p.add_argument("mesh", nargs="?", help="mesh file (default: the shipped California mesh)")
    p.add_argument("--cv", type=int, default=0, metavar="K", help="also run K-fold cross-validation")
    p.add_argument("--seed", type=int, default=None)
    _spline_flags(p)
    return parser


# ---------------------------------------------------------------------------
# CSV helpers


def _read_table(path: str) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise UsageError(str(exc)) from None
    if not rows:
        raise UsageError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return header, values


def _z_columns(header: list[str]) -> list[int]:
    zs = sorted((int(m.group(1)), k) for k, h in enumerate(header) if (m := re.fullmatch(r"z(\d+)", h)))
    return [k for _, k in zs]


def _columns(header: list[str], path: str, names: Sequence[str]) -> list[int]:
    missing = [c for c in names if c not in header]
    if missing:
        raise UsageError(f"{path} is missing columns: {', '.join(missing)}")
    return [header.index(c) for c in names]


def _load_xzy(path: str):
    header, values = _read_table(path)
    ix = _columns(header, path, ("x1", "x2", "y"))
    X = values[:, ix[:2]]
    Z = values[:, _z_columns(header)]
    return X, Z, values[:, ix[2]]


def _write_rows(path: Optional[str], header: Sequence[str], rows) -> None:
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _num(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# subcommands


def cmd_mesh(args) -> int:
    mesh = load_mesh(args.input)
    for _ in range(args.refine):
        mesh = refine(mesh)
    if args.output:
        save_mesh(mesh, args.output)
    elif args.refine:
        raise UsageError("--refine needs an output path")
    if args.quality or not args.output:
        q = quality(mesh)
        print(f"N={q.triangle_count} mesh_size={q.mesh_size!r} shape_param={q.shape_param!r}")
    return EXIT_OK


def _coef_table(names, fit: FitResult) -> list[str]:
    lines = [f"{'coef':>14} {'estimate':>12} {'se':>10} {'ci_lower':>12} {'ci_upper':>12}"]
    for j, name in enumerate(names):
        lines.append(
            f"{name:>14} {fit.beta_hat[j]:12.6f} {fit.se[j]:10.6f} {fit.ci_lower[j]:12.6f} {fit.ci_upper[j]:12.6f}"
        )
    return lines


def _fit_summary(names, fit: FitResult) -> str:
    lines = [f"lambda={fit.lam!r} df={fit.df!r} sigma2_hat={fit.sigma2_hat!r} n={fit.n}"]
    if len(fit.beta_hat):
        lines += _coef_table(names, fit)
    return "\n".join(lines)


def cmd_fit(args) -> int:
    cfg = CliConfig("fit", (args.data, args.mesh), args.out, args.degree, args.smoothness, args.lambda_grid,
                    parallelism=args.parallelism)
    mesh = load_mesh(args.mesh)
    X, Z, Y = _load_xzy(args.data)
    setup = SplineSetup.build(mesh, cfg.degree, cfg.smoothness)
    problem = setup.problem(X, Z if Z.shape[1] else None, Y, cfg.lambdas)
    fit = gcv_select(problem, cfg.degree, cfg.smoothness, workers=cfg.parallelism)
    print(_fit_summary([f"z{j + 1}" for j in range(problem.p)], fit))
    if args.out:
        fit.save(args.out)
    if args.fitted:
        pred = predict(fit, mesh, setup.space, X, Z if Z.shape[1] else None)
        _write_rows(args.fitted, ["x1", "x2", "y", "g_hat", "y_hat"],
                    ([_num(x1), _num(x2), _num(y), _num(g), _num(yh)]
                     for (x1, x2), y, g, yh in zip(X, Y, pred.g_hat, pred.y_hat)))
    return EXIT_OK


def cmd_predict(args) -> int:
    fit = FitResult.load(args.fitresult)
    mesh = load_mesh(args.mesh)
    space = SplineSpace.on(mesh, fit.degree, fit.smoothness)
    header, values = _read_table(args.points)
    ix = _columns(header, args.points, ("x1", "x2"))
    pts = values[:, ix]
    zc = _z_columns(header)
    p = len(fit.beta_hat)
    if zc and len(zc) != p:
        raise UsageError(f"{args.points} has {len(zc)} z columns, the fit has {p}")
    have_z = bool(zc) or p == 0
    pred = predict(fit, mesh, space, pts, values[:, zc] if zc else None)

    def rows():
        for k, ((x1, x2), g, yh, ok) in enumerate(zip(pts, pred.g_hat, pred.y_hat, pred.inside)):
            if ok:
                yield [k, _num(x1), _num(x2), _num(g), _num(yh) if have_z else "", "inside"]
            else:
                yield [k, _num(x1), _num(x2), "", "", "outside"]

    _write_rows(args.out, ["index", "x1", "x2", "g_hat", "y_hat", "status"], rows())
    if len(pred.outside_indices):
        log.warning("%d points outside the mesh (indices: %s)", len(pred.outside_indices), _short_list(pred.outside_indices))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simbench import SimConfig, grid_predictions, run_mc, write_grid_csv

    seed = _resolve_seed(args.seed)
    cli = CliConfig("simulate", (), args.out, args.degree, args.smoothness, args.lambda_grid, seed,
                    args.replicates, args.parallelism)
    try:
        config = SimConfig(
            example=args.example, rho=args.rho, n=args.n, replicates=cli.replicates, seed=seed, mesh=args.mesh,
            degree=cli.degree, smoothness=cli.smoothness, lambda_grid=cli.lambda_grid,
            matern_nu=args.matern_nu, matern_range=args.matern_range, matern_variance=args.matern_variance,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = run_mc(config, workers=cli.parallelism)
    text = report.to_csv()
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.grid_out:
        points, g_hat, y_hat = grid_predictions(config, 0)
        write_grid_csv(args.grid_out, points, g_hat, y_hat)
    return EXIT_OK


def cmd_housing(args) -> int:
    from .housing import Z_NAMES, build_design, california_mesh, kfold_cv, load_housing

    seed = _resolve_seed(args.seed)
    cfg = CliConfig("housing", (args.data,), None, args.degree, args.smoothness, args.lambda_grid, seed,
                    parallelism=args.parallelism)
    mesh = load_mesh(args.mesh) if args.mesh else california_mesh()
    try:
        records = load_housing(args.data)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    design = build_design(records, mesh)
    print(f"records={len(records)} dropped={records.dropped} outside_mesh={len(design.excluded)}")
    setup = SplineSetup.build(mesh, cfg.degree, cfg.smoothness)
    fit = gcv_select(setup.problem(design.X, design.Z, design.Y, cfg.lambdas), cfg.degree, cfg.smoothness,
                     workers=cfg.parallelism)
    print(_fit_summary(Z_NAMES, fit))
    if args.cv:
        try:
            rep = kfold_cv(records, mesh, args.cv, seed, cfg.degree, cfg.smoothness, cfg.lambdas, setup,
                           workers=cfg.parallelism)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        print("fold," + ",".join(str(k + 1) for k in range(args.cv)) + ",mean")
        print("plm," + ",".join(f"{v:.6f}" for v in rep.fold_mspe) + f",{rep.mean_mspe:.6f}")
        print("ols," + ",".join(f"{v:.6f}" for v in rep.ols_fold_mspe) + f",{rep.ols_mean_mspe:.6f}")
    return EXIT_OK


COMMANDS = {
    "mesh": cmd_mesh,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "housing": cmd_housing,
}


def _short_list(indices, limit: int = 20) -> str:
    idx = [int(i) for i in indices]
    head = ", ".join(map(str, idx[:limit]))
    return head + (f", ... ({len(idx)} total)" if len(idx) > limit else "")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_join_negative_values(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.subcommand](args)
    except (UsageError, OSError) as exc:
        print(f"trisplm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MeshError as exc:
        print(f"trisplm: invalid mesh: {exc}", file=sys.stderr)
        return EXIT_MESH
    except OutsideMeshError as exc:
        print(f"trisplm: {len(exc.indices)} data points outside the mesh (indices: {_short_list(exc.indices)})", file=sys.stderr)
        return EXIT_OUTSIDE
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"trisplm: fit failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
