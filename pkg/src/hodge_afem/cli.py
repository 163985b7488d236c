"""Command-line front end: ``hodge-afem run | study | verify | mesh``.

Configuration comes from an optional flat ``key = value`` file (``--config``)
overridden by command-line flags. Unknown keys are rejected with the key named
in the message. Floats are written with 17 significant digits and every CSV
carries a ``schema_version`` column.
"""

import argparse
import csv
import json
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .adapt import (HISTORY_FIELDS, AmfemConfig, amfem_run, contraction_report, rate_fit)
from .checks import CHECK_GROUPS, run_checks
from .errors import ConfigError, HodgeAfemError, InsufficientData
from .mesh import build_initial, export_mesh, load_mesh, uniform_refine

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

# columns of history.csv; wall-clock times go to constants.json so that the
# history is reproducible byte for byte
HISTORY_COLUMNS = [name for name in HISTORY_FIELDS if name != "wall_time"]


@dataclass
class RunConfig:
    """Everything a command needs: the adaptive parameters plus I/O options."""

    command: str = "run"
    case: Optional[str] = None
    out: str = "hodge-afem-out"
    export_meshes: bool = False
    seed: int = 0
    amfem: AmfemConfig = field(default_factory=AmfemConfig)


# config key -> (AmfemConfig attribute or None for RunConfig, parser)
def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _center(text):
    if isinstance(text, (tuple, list)):
        values = tuple(float(v) for v in text)
    else:
        values = tuple(float(v) for v in str(text).replace(",", " ").split())
    if len(values) != 3:
        raise ValueError("expected three comma-separated numbers")
    return values


KEYS = {
    "case": (None, str),
    "out": (None, str),
    "export_meshes": (None, _bool),
    "seed": (None, int),
    "theta": ("theta", float),
    "eps": ("epsilon", float),
    "epsilon": ("epsilon", float),
    "max_iter": ("max_iter", int),
    "delta": ("delta", float),
    "beta": ("beta", float),
    "surface": ("surface", str),
    "mesh": ("mesh", str),
    "bump_width": ("bump_width", float),
    "bump_center": ("bump_center", _center),
    "quad": ("quad", int),
    "quad_ref": ("quad_ref", int),
    "tol": ("tol", float),
    "method": ("method", str),
    "max_triangles": ("max_triangles", int),
}


def read_config_file(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment, quotes are stripped."""
    entries = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected key = value in {path}")
            key, value = (s.strip() for s in line.split("=", 1))
            entries[key.replace("-", "_")] = value.strip("\"'")
    return entries


def build_config(command, entries):
    """Validated ``RunConfig`` from raw key/value entries.

    Raises:
        ConfigError: unknown key, unparsable value or failed validation.
    """
    cfg = RunConfig(command=command)
    for key, value in entries.items():
        if key not in KEYS:
            raise ConfigError(key, "unknown configuration key")
        target, parse = KEYS[key]
        try:
            parsed = parse(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"invalid value {value!r} ({exc})") from None
        if target is None:
            setattr(cfg, key, parsed)
        else:
            setattr(cfg.amfem, target, parsed)
    if cfg.case is not None:
        cfg.amfem.case = cfg.case
    cfg.amfem.validate()
    return cfg


def _flag_entries(args):
    return {key: getattr(args, key) for key in KEYS
            if getattr(args, key, None) is not None}


def resolve_config(args):
    entries = read_config_file(args.config) if getattr(args, "config", None) else {}
    entries.update(_flag_entries(args))
    return build_config(args.command, entries)


# --------------------------------------------------------------------------
# output


def fmt(value):
    """17 significant digits for floats, empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version"] + HISTORY_COLUMNS)
        for it in history:
            w.writerow([SCHEMA_VERSION] + [fmt(getattr(it, c)) for c in HISTORY_COLUMNS])


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _try_rate(history, which):
    try:
        return rate_fit(history, which=which)
    except InsufficientData:
        return None


def run_constants(history, cfg):
    """Measured constants of one run as a JSON-ready dict."""
    its = list(history)
    n0 = its[0].n_tri
    out = {
        "schema_version": SCHEMA_VERSION,
        "case": cfg.amfem.case,
        "status": history.status,
        "iterations": len(its),
        "final_triangles": its[-1].n_tri,
        "final_eta": math.sqrt(its[-1].eta_sq),
        "max_coderivative_ratio": max(it.coderiv_ratio for it in its),
        "wall_time_seconds": sum(it.wall_time for it in its),
    }
    ratios = [(it.n_tri - n0) / it.cumulative_marked for it in its if it.cumulative_marked > 0]
    out["marking_constant"] = max(ratios) if ratios else None
    if all(it.err_sq is not None for it in its):
        rel = [it.err_sq / it.eta_sq for it in its if it.eta_sq > 0]
        out["final_error"] = math.sqrt(its[-1].err_sq)
        out["reliability_max"] = max(rel) if rel else None
        out["reliability_min"] = min(rel) if rel else None
        beta = max(rel) if rel else cfg.amfem.beta
        rep = contraction_report(history, cfg.amfem.delta, beta, cfg.amfem.theta)
        out["contraction"] = {"delta": cfg.amfem.delta, "beta": beta,
                              "geometric_mean_alpha": rep.geometric_mean,
                              "max_alpha": rep.max_alpha, "alpha": rep.alpha,
                              "violations": rep.violations}
        out["rate_error"] = _try_rate(history, "err")
    out["rate_eta"] = _try_rate(history, "eta")
    return _json_safe(out)


def _progress(quiet):
    if quiet:
        return None

    def report(it):
        err = "" if it.err_sq is None else f"  err={math.sqrt(it.err_sq):.4e}"
        print(f"k={it.k:3d}  triangles={it.n_tri:7d}  eta={math.sqrt(it.eta_sq):.4e}{err}  "
              f"marked={it.marked_count}", file=sys.stderr, flush=True)
    return report


# --------------------------------------------------------------------------
# commands


def cmd_run(cfg, quiet=False):
    """Adaptive run; writes history.csv, constants.json and the final mesh."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.amfem.keep_meshes = cfg.export_meshes
    history = amfem_run(cfg.amfem, on_iteration=_progress(quiet))
    write_history(history, out / "history.csv")
    with open(out / "constants.json", "w") as fh:
        json.dump(run_constants(history, cfg), fh, indent=2, sort_keys=True)
    export_mesh(history.final_mesh, out / "final_mesh.off")
    if cfg.export_meshes:
        for k, mesh in enumerate(history.meshes):
            export_mesh(mesh, out / f"mesh_{k:03d}.off")
    print(f"status: {history.status} after {len(history)} iteration(s), "
          f"eta = {math.sqrt(history[-1].eta_sq):.6e}")
    return EXIT_OK if history.status == "converged" else EXIT_NOT_CONVERGED


def cmd_study(cfg, quiet=False):
    """Adaptive and uniform series on the same case; writes rates.csv."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    for name, uniform in (("adaptive", False), ("uniform", True)):
        cfg.amfem.uniform = uniform
        series[name] = amfem_run(cfg.amfem, on_iteration=_progress(quiet))
    cfg.amfem.uniform = False
    fitted, problems = {}, []
    for name, history in series.items():
        for which in ("err", "eta"):
            try:
                fitted[name, which] = rate_fit(history, which=which)
            except InsufficientData as exc:
                fitted[name, which] = None
                problems.append(f"{name} series, {which}: {exc}")
    with open(out / "rates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", "series", "k", "n_tri", "eta", "err", "s_err", "s_eta"])
        for name, history in series.items():
            for it in history:
                err = None if it.err_sq is None else math.sqrt(it.err_sq)
                w.writerow([SCHEMA_VERSION, name, it.k, it.n_tri, fmt(math.sqrt(it.eta_sq)),
                            fmt(err), fmt(fitted[name, "err"]), fmt(fitted[name, "eta"])])
    for name in series:
        print(f"{name:9s} s_err = {fmt(fitted[name, 'err']) or 'n/a'}  "
              f"s_eta = {fmt(fitted[name, 'eta']) or 'n/a'}")
    if problems:
        for p in problems:
            print(f"error: insufficient data for a rate fit ({p})", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_verify(cfg, checks=None, corrupt_mass=False):
    """Run the invariant suite and print measured values against their caps."""
    rows, seconds = run_checks(checks, config=cfg.amfem, seed=cfg.seed,
                               corrupt_mass=corrupt_mass)
    width = max(len(f"{r.group}.{r.name}") for r in rows)
    print(f"{'check':{width}s}  {'measured':>12s}  {'cap':>10s}  result")
    for r in rows:
        print(f"{r.group + '.' + r.name:{width}s}  {r.value:12.4e}  {r.cap:10.3e}  "
              f"{'pass' if r.passed else 'FAIL'}  {r.detail}")
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed in {seconds:.1f} s")
    for r in failed:
        print(f"failed: {r.group}.{r.name} = {r.value:.6g} (cap {r.cap:.6g})", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_ERROR


def cmd_mesh(args):
    """Build (or load), optionally refine uniformly, and export a mesh."""
    if args.input:
        mesh = load_mesh(args.input)
    else:
        mesh = build_initial(args.surface or "sphere", args.preset)
    if args.refine:
        mesh = uniform_refine(mesh, args.refine)
    export_mesh(mesh, args.output)
    print(f"wrote {args.output}: {mesh.n_vert} vertices, {mesh.n_tri} faces")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p):
    p.add_argument("--config", help="key = value configuration file (flags take precedence)")
    p.add_argument("--case", help="manufactured case: Y1, Y2, gaussian-bump, zero")
    p.add_argument("--theta", type=float, help="Doerfler bulk parameter in (0, 1)")
    p.add_argument("--eps", type=float, help="stopping tolerance on eta")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--delta", type=float, help="quasi-error weight in (0, 1)")
    p.add_argument("--beta", type=float, help="estimator weight in the quasi-error")
    p.add_argument("--surface", help="sphere, torus or plane")
    p.add_argument("--mesh", help="initial mesh preset, e.g. icosahedron")
    p.add_argument("--bump-width", dest="bump_width", type=float)
    p.add_argument("--bump-center", dest="bump_center", help="x,y,z")
    p.add_argument("--quad", type=int, help="quadrature degree for assembly and estimator")
    p.add_argument("--quad-ref", dest="quad_ref", type=int, help="quadrature degree for errors")
    p.add_argument("--tol", type=float, help="linear solver tolerance")
    p.add_argument("--method", choices=["auto", "direct", "minres"])
    p.add_argument("--max-triangles", dest="max_triangles", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true", help="no per-iteration progress")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hodge-afem",
        description="Adaptive mixed finite elements for the Hodge Laplacian of top forms on "
                    "closed surfaces.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="one adaptive run")
    _add_config_flags(run)
    run.add_argument("--export-meshes", dest="export_meshes", action="store_const", const=True,
                     help="also export every intermediate mesh")
    study = sub.add_parser("study", help="adaptive vs uniform rate study")
    _add_config_flags(study)
    verify = sub.add_parser("verify", help="identity and inequality checks")
    _add_config_flags(verify)
    verify.add_argument("--checks", help="comma-separated subset of: " + ", ".join(CHECK_GROUPS))
    verify.add_argument("--corrupt-mass", action="store_true", help=argparse.SUPPRESS)
    mesh = sub.add_parser("mesh", help="generate, refine and export meshes")
    mesh.add_argument("--surface", default="sphere")
    mesh.add_argument("--preset", default="icosahedron")
    mesh.add_argument("--input", help="load an exported mesh instead of building one")
    mesh.add_argument("--refine", type=int, default=0, help="uniform refinements")
    mesh.add_argument("--output", "-o", required=True, help="target .off or .obj file")
    return parser


def _thread_limit():
    value = os.environ.get("HODGE_AFEM_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        n = int(value)
    except ValueError:
        raise ConfigError("HODGE_AFEM_THREADS", f"not an integer: {value!r}") from None
    if n < 1:
        raise ConfigError("HODGE_AFEM_THREADS", "must be at least 1")
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            if args.command == "mesh":
                return cmd_mesh(args)
            cfg = resolve_config(args)
            if args.command == "run":
                if cfg.case is None:
                    raise ConfigError("case", "required (e.g. --case Y1)")
                return cmd_run(cfg, quiet=args.quiet)
            if args.command == "study":
                if cfg.case is None:
                    raise ConfigError("case", "required (e.g. --case Y1)")
                return cmd_study(cfg, quiet=args.quiet)
            checks = [c.strip() for c in args.checks.split(",")] if args.checks else None
            if checks:
                unknown = [c for c in checks if c not in CHECK_GROUPS]
                if unknown:
                    raise ConfigError("checks", f"unknown check(s): {', '.join(unknown)}")
            return cmd_verify(cfg, checks, corrupt_mass=args.corrupt_mass)
    except (HodgeAfemError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
