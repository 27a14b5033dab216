"""Command line front end.

Exit codes: 0 ok, 2 config or input error, 3 infeasible (not certified),
4 data assumption violated, 5 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import METHODS, PRESETS, ConfigError, RunConfig, load_config
from .datamodel import AssumptionViolation, EmptyParameterSet
from .parser import parse_poly
from .synthesis import RationalController, SolverFailure, SynthesisInfeasible
from .verify import NotCertified

log = logging.getLogger("densityctl")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_ASSUMPTION, EXIT_SOLVER = 0, 2, 3, 4, 5


def _stable(d):
    """Drop wall-clock entries so reruns write identical files."""
    if isinstance(d, dict):
        return {k: _stable(v) for k, v in d.items() if not k.endswith("time")}
    if isinstance(d, list):
        return [_stable(v) for v in d]
    return d


def _header(cfg: RunConfig, problem: pipeline.Problem | None = None) -> dict:
    out = {"config": cfg.origin, "config_name": cfg.name, "config_hash": cfg.config_hash,
           "variables": cfg.variables}
    if problem is not None:
        out["data_hash"] = problem.data_hash
    return out


def _load(args, ref) -> RunConfig:
    cfg = load_config(ref)
    if getattr(args, "time_limit", None) is not None:
        if args.time_limit <= 0:
            raise ConfigError("--time-limit must be positive")
        cfg.solver = replace(cfg.solver, time_limit=args.time_limit)
    return cfg


def _controller(args, cfg: RunConfig) -> RationalController:
    if args.fixture:
        return cfg.fixture_controller("K")
    if not args.controller:
        raise ConfigError("give --controller FILE or --fixture")
    return pipeline.read_controller(args.controller, cfg)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_experiment(args) -> int:
    cfg = _load(args, args.config)
    data = pipeline.load_data(cfg, seed=args.seed, simulate=True)
    out = _out(args)
    data.to_csv(out / "experiment.csv", _tag(cfg))
    t = cfg.truth
    record = {**_header(cfg), "data_hash": pipeline.data_hash(data), "x0": t.x0, "input": t.input,
              "omega": t.omega, "seed": t.seed if args.seed is None else args.seed,
              "sample_times": data.times, "dt": cfg.data.dt}
    pipeline.write_json(out / "experiment.json", record)
    log.info("wrote %d samples to %s", data.T, out / "experiment.csv")
    return EXIT_OK


def _problem(args, cfg):
    data = None
    if getattr(args, "data", None):
        from .datamodel import ExperimentData
        path = Path(args.data)
        if not path.is_file():
            raise ConfigError(f"experiment file {path} not found")
        data = ExperimentData.from_csv(path, cfg.n, cfg.struct.m)
    return pipeline.build_problem(cfg, data)


def cmd_synthesize(args) -> int:
    cfg = _load(args, args.config)
    problem = _problem(args, cfg)
    res = pipeline.run_synthesis(problem)
    doc = {**_header(cfg, problem),
           "controller": pipeline.controller_to_dict(res.controller, cfg.variables),
           "provenance": _stable(res.provenance)}
    if res.controller.a.degree() == 0:
        doc["gain"] = [p.to_string(cfg.variables) for p in res.controller.gain_polynomials()]
    path = pipeline.write_json(_out(args) / "controller.json", doc)
    log.info("feasible: a = %s", res.controller.a.to_string(cfg.variables, 6))
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load(args, args.config)
    ctrl = _controller(args, cfg)
    problem = _problem(args, cfg)
    method = args.method or cfg.verify.method
    ver = pipeline.run_verify(problem, ctrl, method, args.deg_v)
    cert, rep = ver.certificate, ver.pointwise
    log.info("%s certificate: SOS matrix size %dx%d", method, cert.matrix_size, cert.matrix_size)
    doc = {**_header(cfg, problem),
           "controller": pipeline.controller_to_dict(ctrl, cfg.variables),
           "certificate": _stable(cert.to_dict()),
           "pointwise": {"ok": rep.ok, "points": len(rep.points), "worst": rep.worst,
                         "violations": int(rep.violations.size), "tol": rep.tol}}
    doc["certificate"]["V"] = cert.V.to_string(cfg.variables)
    path = pipeline.write_json(_out(args) / f"certificate_{method}.json", doc)
    log.info("pointwise check on %d points: %s (worst %.3e)", len(rep.points),
             "pass" if rep.ok else "FAIL", rep.worst)
    log.info("wrote %s", path)
    return EXIT_OK


def _plane_grid(cfg: RunConfig, per_axis: int = 21):
    w = cfg.verify.grid_half_width
    ax = np.linspace(-w, w, per_axis)
    pts = np.zeros((per_axis * per_axis, cfg.n))
    g1, g2 = np.meshgrid(ax, ax, indexing="ij")
    pts[:, 0] = g1.ravel()
    if cfg.n > 1:
        pts[:, 1] = g2.ravel()
    return pts


def _tag(cfg: RunConfig) -> str:
    return f"config_hash={cfg.config_hash}"


def _write_rows(path, header, rows, comment: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def cmd_validate(args) -> int:
    cfg = _load(args, args.config)
    ctrl = _controller(args, cfg)
    if args.horizon is not None and args.horizon <= 0:
        raise ConfigError("horizon must be positive (an empty trajectory has nothing to check)")
    V = None
    if args.lyapunov:
        V = parse_poly(args.lyapunov, cfg.variables)
    report = pipeline.run_validate(cfg, ctrl, horizon=args.horizon, seed=args.seed)
    out = _out(args)
    xs = [f"x_{i + 1}" for i in range(cfg.n)]
    for k, tr in enumerate(report.trajectories):
        if V is None:
            tr.to_csv(out / f"trajectory_{k + 1}.csv", _tag(cfg))
        else:
            vals = V.eval(tr.states.T)
            _write_rows(out / f"trajectory_{k + 1}.csv", ["t"] + xs + ["V"],
                        np.column_stack([tr.times, tr.states.T, vals]), _tag(cfg))
    system = pipeline.ground_truth(cfg)
    field = system.closed_loop_field(ctrl)
    pts = _plane_grid(cfg)
    _write_rows(out / "phase_field.csv", xs + [f"dx_{i + 1}" for i in range(cfg.n)],
                np.column_stack([pts, np.array([field(0.0, p) for p in pts])]), _tag(cfg))
    if V is not None:
        _write_rows(out / "lyapunov_levels.csv", xs + ["V"],
                    np.column_stack([_plane_grid(cfg, 41), V.eval(_plane_grid(cfg, 41))]), _tag(cfg))
    doc = {**_header(cfg), "controller": pipeline.controller_to_dict(ctrl, cfg.variables),
           "horizon": args.horizon or cfg.validate.horizon, "radius": report.radius,
           "initial_states": report.initial_states, "final_norms": report.final_norms,
           "converged": report.converged, "all_converged": report.all_converged}
    pipeline.write_json(out / "validation.json", doc)
    for line in report.summary().splitlines():
        log.info(line)
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = _load(args, f"example{args.example}")
    out = _out(args)
    problem = pipeline.build_problem(cfg)
    rows = [("experiment", "ok", f"T={problem.data.T}, source={cfg.data.source}")]
    res = pipeline.run_synthesis(problem)
    ctrl = res.controller
    pipeline.write_json(out / "controller.json", {
        **_header(cfg, problem), "controller": pipeline.controller_to_dict(ctrl, cfg.variables),
        "provenance": _stable(res.provenance)})
    rows.append(("synthesize", "feasible", f"a = {ctrl.a.to_string(cfg.variables, 6)}"))
    method = args.method or cfg.verify.method
    ver = pipeline.run_verify(problem, ctrl, method, args.deg_v)
    cert = ver.certificate
    pipeline.write_json(out / f"certificate_{method}.json", {
        **_header(cfg, problem), "certificate": _stable(cert.to_dict()),
        "pointwise": {"ok": ver.pointwise.ok, "worst": ver.pointwise.worst}})
    rows.append((f"verify ({method})", "certified",
                 f"degV={cert.deg_v}, matrix {cert.matrix_size}x{cert.matrix_size}, "
                 f"pointwise {'pass' if ver.pointwise.ok else 'FAIL'}"))
    report = pipeline.run_validate(cfg, ctrl, seed=args.seed)
    rows.append(("validate", "converged" if report.all_converged else "not converged",
                 "final |x| = " + ", ".join(f"{v:.2e}" for v in report.final_norms)))
    lines = [f"<!-- {_tag(cfg)} -->", "", "| stage | result | details |", "|---|---|---|"]
    lines += [f"| {a} | {b} | {c} |" for a, b, c in rows]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    for a, b, c in rows:
        log.info("%-14s %-14s %s", a, b, c)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densityctl",
                                description="Data-driven density-function control synthesis")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True,
                            help=f"TOML config file or preset name ({', '.join(PRESETS)})")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("--time-limit", type=float, default=None, help="solver time limit in seconds")

    sp = sub.add_parser("experiment", help="simulate the ground truth and write samples")
    common(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("synthesize", help="synthesize a controller from data")
    common(sp)
    sp.add_argument("--data", help="experiment CSV overriding the config's data")
    sp.set_defaults(func=cmd_synthesize)

    for name, func, help_ in (("verify", cmd_verify, "certify a controller"),
                              ("validate", cmd_validate, "simulate the true closed loop")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--controller", help="controller JSON written by 'synthesize'")
        src.add_argument("--fixture", action="store_true", help="use the config's printed controller")
        if name == "verify":
            sp.add_argument("--data", help="experiment CSV overriding the config's data")
            sp.add_argument("--method", choices=METHODS)
            sp.add_argument("--deg-v", type=int, default=None)
        else:
            sp.add_argument("--horizon", type=float, default=None)
            sp.add_argument("--lyapunov", help="V(x) to record along trajectories")
        sp.set_defaults(func=func)

    sp = sub.add_parser("repro", help="run a shipped example end to end")
    sp.add_argument("example", type=int, choices=(1, 2, 3))
    common(sp, config=False)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--deg-v", type=int, default=None)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (AssumptionViolation, EmptyParameterSet) as exc:
        log.error("assumption violated: %s", exc)
        return EXIT_ASSUMPTION
    except (SynthesisInfeasible, NotCertified) as exc:
        log.error("%s", exc)
        return EXIT_INFEASIBLE
    except SolverFailure as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
