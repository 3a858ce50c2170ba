"""Command line entry point: ``spectral-drop <command> --config run.json``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from shapely import contains_xy
from shapely.geometry import Polygon

from . import __version__
from .analytic import reference_solution
from .diagnostics import (CheckRow, bounds_report, checks_summary, checks_to_csv, coarea_lower_bound, weak_gamma_limit)
from .errors import GeometryError, SolverError, ValidationError
from .export import atomic_write, csv_text, edge_table_text, fmt, load_mesh, vtk_text
from .geometry import DomainSpec, build_mesh, truncation_from_dict
from .optimize import (OptimizerConfig, drift_experiment, drift_table, minimize_lambda1, optimality_report,
                       penalized_minimize, strip_sweep, sweep_table)
from .pde import assemble, solve_eigs

COMMANDS = ("solve", "optimize", "sweep", "drift", "diagnose", "export")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3

TOP_KEYS = {"command", "domain", "mesh", "solver", "optimizer", "drop", "sequence", "sweep", "drift", "export",
            "output_dir"}
MESH_KEYS = {"h", "truncation", "lattice_origin", "lattice_angle", "structured"}
SOLVER_DEFAULTS = {"K": 1, "tol": 1e-8, "M": None, "robin_k": 0.0, "seed": 0}
SWEEP_DEFAULTS = {"c_min": 0.5, "c_max": 4.0, "step": 0.125, "width": 1.0, "margin": 1.5}
DRIFT_DEFAULTS = {"R": None, "positions": None, "c": 1.0}
EXPORT_KEYS = {"fields", "edges"}
DROP_KEYS = {"box", "disc", "polygon", "all"}

CONFIG_HELP = """\
configuration file (JSON object; unknown keys are rejected):
  domain     container: kind (strip|half_plane|sector|polygon|exterior_convex|convex_epigraph)
             plus width (1.0), alpha, vertices, obstacle, parabola [a,b,c], profile, truncation
  mesh       h (required except for export), truncation {"box": [x0,y0,x1,y1]} or {"disc": [cx,cy,r]},
             lattice_origin ([0,0]), lattice_angle (0), structured (auto)
  solver     K (1), tol (1e-8), M (1e6/h^2; a list means its last entry), robin_k (0), seed (0)
  optimizer  target_volume | penalty, m_schedule (relaxed continuation then 1e2,1e4,1e6 /h^2),
             max_outer_iters (40), stop_tol_lambda (1e-6), stop_tol_volume (0), seed (0),
             init (ball-at-boundary|random|user; user takes the drop), eig_tol (1e-8), robin_k (0),
             volume_polish (true), relaxed_levels ([10,30,100,300,1000])
  drop       drop for solve/diagnose: {"box": [...]}, {"disc": [...]}, {"polygon": [[x,y],...]} or {"all": true}
  sequence   list of drops for the weak gamma-limit diagnostic (diagnose, optional)
  sweep      c_min (0.5), c_max (4.0), step (0.125), width (1.0), margin (1.5)
  drift      R (required), positions (required, arclengths), c (1.0)
  export     fields (VTK file to re-emit), edges (edge table next to it)
  output_dir (./out; --output-dir wins)

exit status: 0 success, 2 invalid input, 3 solver failure.
environment: SPECTRAL_DROP_LOG in {error, warn, info, debug} (default warn).
"""

log = logging.getLogger("spectral_drop.cli")


@dataclass
class RunConfig:
    command: str
    raw: dict
    domain: Optional[DomainSpec] = None
    mesh: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    optimizer: Optional[dict] = None
    drop: Optional[dict] = None
    sequence: Optional[list] = None
    sweep: dict = field(default_factory=dict)
    drift: dict = field(default_factory=dict)
    export: dict = field(default_factory=dict)
    output_dir: str = "out"


def _section(raw, name, allowed, defaults=None):
    data = raw.get(name, {}) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{name} must be an object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown {name} keys: {sorted(unknown)}")
    out = dict(defaults or {})
    out.update(data)
    return out


def _positive(name, x):
    if not isinstance(x, (int, float)) or isinstance(x, bool) or not math.isfinite(x) or x <= 0:
        raise ValidationError(f"{name} must be a positive number, got {x!r}")
    return float(x)


def _check_drop(d, where="drop"):
    if not isinstance(d, dict) or len(d) != 1 or not set(d) <= DROP_KEYS:
        raise ValidationError(f"{where} must have exactly one of {sorted(DROP_KEYS)}")
    return d


def parse_config(raw: dict, command: str) -> RunConfig:
    """Validate a decoded config for ``command``; nothing is computed yet."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}")
    if raw.get("command", command) != command:
        raise ValidationError(f"config is for {raw['command']!r}, not {command!r}")
    cfg = RunConfig(command, raw, output_dir=str(raw.get("output_dir", "out")))

    cfg.mesh = _section(raw, "mesh", MESH_KEYS)
    if command != "export":
        if "domain" not in raw:
            raise ValidationError("domain section is required")
        cfg.domain = DomainSpec.from_dict(raw["domain"])
        if "h" not in cfg.mesh:
            raise ValidationError("mesh.h is required")
        _positive("mesh.h", cfg.mesh["h"])
        if "truncation" in cfg.mesh:
            cfg.mesh["truncation"] = truncation_from_dict(cfg.mesh["truncation"])
        if cfg.domain is not None and not cfg.domain.bounded and cfg.domain.truncation is None \
                and cfg.mesh.get("truncation") is None and command not in ("sweep", "drift"):
            raise ValidationError(f"{cfg.domain.kind} container needs a truncation")

    cfg.solver = _section(raw, "solver", SOLVER_DEFAULTS, SOLVER_DEFAULTS)
    s = cfg.solver
    if not isinstance(s["K"], int) or s["K"] < 1:
        raise ValidationError("solver.K must be a positive integer")
    _positive("solver.tol", s["tol"])
    if s["M"] is not None:
        ms = s["M"] if isinstance(s["M"], list) else [s["M"]]
        if not ms:
            raise ValidationError("solver.M must not be empty")
        s["M"] = [_positive("solver.M", m) for m in ms][-1]
    if s["robin_k"] < 0:
        raise ValidationError("solver.robin_k must be nonnegative")
    if not isinstance(s["seed"], int):
        raise ValidationError("solver.seed must be an integer")

    if "optimizer" in raw or command == "optimize":
        allowed = {f.name for f in fields(OptimizerConfig)} - {"init_chi"}
        cfg.optimizer = _section(raw, "optimizer", allowed)
    if "drop" in raw:
        cfg.drop = _check_drop(raw["drop"])
    if "sequence" in raw:
        if not isinstance(raw["sequence"], list):
            raise ValidationError("sequence must be a list of drops")
        cfg.sequence = [_check_drop(d, "sequence entry") for d in raw["sequence"]]
    cfg.sweep = _section(raw, "sweep", SWEEP_DEFAULTS, SWEEP_DEFAULTS)
    cfg.drift = _section(raw, "drift", DRIFT_DEFAULTS, DRIFT_DEFAULTS)
    cfg.export = _section(raw, "export", EXPORT_KEYS)

    if command in ("solve", "diagnose") and cfg.drop is None:
        raise ValidationError(f"{command} needs a drop")
    if command == "optimize":
        OptimizerConfig(**_optimizer_kwargs(cfg, None))  # validates
        if cfg.optimizer.get("init") == "user" and cfg.drop is None:
            raise ValidationError("optimizer.init = user needs a drop")
    if command == "sweep":
        if cfg.domain.kind != "strip":
            raise ValidationError("sweep runs on a strip container")
        sw = cfg.sweep
        for k in ("c_min", "c_max", "step", "width", "margin"):
            _positive(f"sweep.{k}", sw[k])
        if sw["c_max"] < sw["c_min"]:
            raise ValidationError("sweep.c_max must not be below sweep.c_min")
        if not math.isclose(sw["width"], cfg.domain.width):
            raise ValidationError("sweep.width must match domain.width")
    if command == "drift":
        dr = cfg.drift
        _positive("drift.R", dr["R"])
        _positive("drift.c", dr["c"])
        if not isinstance(dr["positions"], list) or len(dr["positions"]) < 2:
            raise ValidationError("drift.positions must list at least two arclengths")
    if command == "export":
        for k in ("fields", "edges"):
            if k not in cfg.export:
                raise ValidationError(f"export.{k} is required")
            if not Path(cfg.export[k]).is_file():
                raise ValidationError(f"export.{k}: no such file {cfg.export[k]}")
    return cfg


def _optimizer_kwargs(cfg: RunConfig, init_chi):
    kw = dict(cfg.optimizer or {})
    kw.setdefault("seed", cfg.solver["seed"])
    kw.setdefault("robin_k", cfg.solver["robin_k"])
    if kw.get("init") == "user":
        kw["init_chi"] = init_chi if init_chi is not None else np.ones(1)
    return kw


def _mesh(cfg: RunConfig):
    m = cfg.mesh
    kw = {}
    if "lattice_origin" in m:
        kw["lattice_origin"] = tuple(map(float, m["lattice_origin"]))
    if "lattice_angle" in m:
        kw["lattice_angle"] = float(m["lattice_angle"])
    if "structured" in m:
        kw["structured"] = bool(m["structured"])
    mesh = build_mesh(cfg.domain, float(m["h"]), m.get("truncation"), **kw)
    problems = mesh.check()
    if problems:
        raise GeometryError("mesh failed its checks: " + "; ".join(problems))
    return mesh


def drop_density(drop: dict, mesh) -> np.ndarray:
    """Cells whose centroid lies in the described region."""
    (key, val), = drop.items()
    x, y = mesh.centroids[:, 0], mesh.centroids[:, 1]
    if key == "all":
        chi = np.ones(mesh.n_cells)
    elif key == "box":
        x0, y0, x1, y1 = map(float, val)
        chi = ((x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)).astype(float)
    elif key == "disc":
        cx, cy, r = map(float, val)
        chi = ((x - cx) ** 2 + (y - cy) ** 2 <= r * r).astype(float)
    else:
        poly = Polygon(val)
        if not poly.is_valid or poly.area <= 0:
            raise ValidationError("drop polygon is not a valid simple polygon")
        chi = contains_xy(poly, x, y).astype(float)
    if not chi.any():
        raise ValidationError(f"drop {drop} contains no cell centroid")
    return chi


def _default_M(cfg, mesh):
    return cfg.solver["M"] if cfg.solver["M"] is not None else 1e6 / mesh.h**2


def _fields_vtk(mesh, chi, spectral):
    pdata = {f"u{k + 1}": spectral.eigenfunctions[k] for k in range(len(spectral.eigenvalues))}
    return vtk_text(mesh, point_data=pdata, cell_data={"chi": chi})


def run_solve(cfg):
    mesh = _mesh(cfg)
    system = assemble(mesh, cfg.solver["robin_k"])
    chi = drop_density(cfg.drop, mesh)
    M = _default_M(cfg, mesh)
    res = solve_eigs(system, chi, M, K=cfg.solver["K"], tol=cfg.solver["tol"], seed=cfg.solver["seed"])
    rows = [(k + 1, fmt(lam), fmt(r), fmt(mesh.h), fmt(M))
            for k, (lam, r) in enumerate(zip(res.eigenvalues, res.residuals))]
    return {"eigenvalues.csv": csv_text(["k", "lambda", "residual", "h", "M"], rows),
            "fields.vtk": _fields_vtk(mesh, chi, res),
            "edges.csv": edge_table_text(mesh)}


def run_optimize(cfg):
    mesh = _mesh(cfg)
    init = drop_density(cfg.drop, mesh) if cfg.drop is not None else None
    ocfg = OptimizerConfig(**_optimizer_kwargs(cfg, init))
    solver = minimize_lambda1 if ocfg.constrained else penalized_minimize
    res = solver(cfg.domain, ocfg, mesh=mesh)
    report = optimality_report(res.chi, res.spectral, mesh, Lambda=ocfg.penalty)
    vol = float(res.chi @ mesh.areas)
    rows = [("lambda1", fmt(res.lam)), ("objective", fmt(res.objective)), ("volume", fmt(vol)),
            ("truncation_ok", int(res.truncation_ok))]
    rows += [(k, fmt(v)) for k, v in report.as_rows()]
    if cfg.domain.kind in ("half_plane", "sector", "strip") and ocfg.constrained:
        ref = reference_solution(cfg.domain.kind, ocfg.target_volume, cfg.domain.alpha)
        rows.append(("lambda_reference", fmt(ref.lam)))
    return {"trace.csv": res.trace.to_csv(),
            "optimality.csv": csv_text(["quantity", "value"], rows),
            "chi.vtk": _fields_vtk(mesh, res.chi, res.spectral),
            "edges.csv": edge_table_text(mesh)}


def run_sweep(cfg, threads):
    sw = cfg.sweep
    n = int(math.floor((sw["c_max"] - sw["c_min"]) / sw["step"] + 1e-9))
    cs = [sw["c_min"] + i * sw["step"] for i in range(n + 1)]
    kw = {k: v for k, v in (cfg.optimizer or {}).items() if k not in ("target_volume", "penalty")}
    rows = strip_sweep(cs, float(cfg.mesh["h"]), sw["width"], sw["margin"], workers=threads, **kw)
    return {"sweep.csv": sweep_table(rows)}


def run_drift(cfg, threads):
    dr = cfg.drift
    kw = {k: v for k, v in (cfg.optimizer or {}).items() if k not in ("target_volume", "penalty")}
    rows = drift_experiment(cfg.domain, float(dr["R"]), [float(p) for p in dr["positions"]], float(dr["c"]),
                            float(cfg.mesh["h"]), workers=threads, **kw)
    return {"drift.csv": drift_table(rows)}


def run_diagnose(cfg):
    mesh = _mesh(cfg)
    system = assemble(mesh, cfg.solver["robin_k"])
    chi = drop_density(cfg.drop, mesh)
    M = _default_M(cfg, mesh)
    rows = bounds_report(chi, system, M, f=1.0, seed=cfg.solver["seed"])
    spectral = solve_eigs(system, chi, M, seed=cfg.solver["seed"])
    u = np.abs(spectral.u1)
    bound, dirichlet = coarea_lower_bound(u, mesh, system=system)
    rows.append(CheckRow("coarea_le_dirichlet", bound, dirichlet * 1.05, dirichlet * 1.05 - bound,
                         bound <= dirichlet * 1.05))
    out = {}
    if cfg.sequence:
        seq = [drop_density(d, mesh) for d in cfg.sequence]
        diag = weak_gamma_limit(seq, system, M, K=cfg.solver["K"], seed=cfg.solver["seed"])
        rows += diag.rows()
        out["sequence.csv"] = diag.terms_csv()
    out["checks.csv"] = checks_to_csv(rows)
    out["summary.txt"] = checks_summary(rows)
    return out


def run_export(cfg):
    h = float(cfg.mesh.get("h", 1.0))
    mesh, pdata, cdata = load_mesh(cfg.export["fields"], cfg.export["edges"], h)
    problems = mesh.check()
    if problems:
        raise ValidationError("stored mesh failed its checks: " + "; ".join(problems))
    out = {"fields.vtk": vtk_text(mesh, point_data=pdata, cell_data=cdata), "edges.csv": edge_table_text(mesh)}
    if pdata:
        names = sorted(pdata)
        out["point_data.csv"] = csv_text(["x", "y"] + names, [
            [fmt(v) for v in (*mesh.vertices[i], *(pdata[n][i] for n in names))] for i in range(mesh.n_vertices)])
    if cdata:
        names = sorted(cdata)
        out["cell_data.csv"] = csv_text(["x", "y", "area"] + names, [
            [fmt(v) for v in (*mesh.centroids[i], mesh.areas[i], *(cdata[n][i] for n in names))]
            for i in range(mesh.n_cells)])
    return out


def manifest_text(cfg: RunConfig, config_bytes: bytes, artifacts) -> str:
    seed = (cfg.optimizer or {}).get("seed", cfg.solver.get("seed", 0))
    data = {"tool": "spectral-drop", "version": __version__, "command": cfg.command,
            "config_sha256": hashlib.sha256(config_bytes).hexdigest(), "seed": seed,
            "config": cfg.raw, "artifacts": sorted(artifacts)}
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def run(command: str, config_path, output_dir=None, threads: int = 1) -> int:
    """Run one command; returns the exit status.  Artifacts are only written on success."""
    try:
        config_bytes = Path(config_path).read_bytes()
        raw = json.loads(config_bytes.decode("utf-8"))
        cfg = parse_config(raw, command)
        if threads < 1:
            raise ValidationError("--threads must be at least 1")
        if output_dir is not None:
            cfg.output_dir = str(output_dir)
        if command == "solve":
            artifacts = run_solve(cfg)
        elif command == "optimize":
            artifacts = run_optimize(cfg)
        elif command == "sweep":
            artifacts = run_sweep(cfg, threads)
        elif command == "drift":
            artifacts = run_drift(cfg, threads)
        elif command == "diagnose":
            artifacts = run_diagnose(cfg)
        else:
            artifacts = run_export(cfg)
    except (ValidationError, GeometryError, json.JSONDecodeError, UnicodeDecodeError, OSError) as exc:
        log.debug("invalid input: %s", exc)
        print(f"spectral-drop: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        log.debug("solver failure: %s", exc)
        print(f"spectral-drop: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = Path(cfg.output_dir)
    for name, text in artifacts.items():
        atomic_write(out / name, text)
    atomic_write(out / "config.json", config_bytes.decode("utf-8"))
    atomic_write(out / "manifest.json", manifest_text(cfg, config_bytes, list(artifacts) + ["config.json"]))
    log.info("wrote %d artifacts to %s", len(artifacts) + 2, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectral-drop", description="Spectral drop computations.",
                                epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
    p.add_argument("--threads", type=int, default=1, help="worker processes for sweep and drift (default 1)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("SPECTRAL_DROP_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in LOG_LEVELS:
        log.warning("ignoring SPECTRAL_DROP_LOG=%s", level)
    return run(args.command, args.config, args.output_dir, args.threads)


if __name__ == "__main__":
    sys.exit(main())
