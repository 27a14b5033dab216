"""The stages behind the command line: data, synthesis, certification, validation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, data_hash
from .datamodel import (
    ExperimentData,
    PriorKnowledge,
    UncertaintyQuadric,
    assemble_data_matrices,
    build_uncertainty_quadric,
)
from .parser import parse_poly
from .sdp import SolverSettings
from .sim import ConvergenceReport, GroundTruthSystem, run_experiment, validate_closed_loop
from .synthesis import RationalController, SynthesisResult, synthesize
from .verify import CERTIFIERS, LyapunovCertificate, PointwiseReport, default_grid, pointwise_thm3

log = logging.getLogger(__name__)


def ground_truth(cfg: RunConfig, seed: int | None = None) -> GroundTruthSystem:
    if cfg.truth is None:
        raise ConfigError(f"{cfg.name}: this step needs a [truth] section")
    t = cfg.truth
    return GroundTruthSystem(cfg.struct, t.A, t.B, t.input, t.omega, t.seed if seed is None else seed)


def load_data(cfg: RunConfig, seed: int | None = None, simulate: bool = False) -> ExperimentData:
    """Samples named by the config; ``simulate`` forces a fresh experiment from the ground truth."""
    spec = cfg.data
    if simulate or spec.source == "simulate":
        times = spec.sample_times if spec.sample_times is not None else spec.table.times
        return run_experiment(ground_truth(cfg, seed), cfg.truth.x0, times, dt=spec.dt)
    if spec.source == "table":
        return spec.table
    if not spec.csv.is_file():
        raise ConfigError(f"experiment file {spec.csv} not found")
    return ExperimentData.from_csv(spec.csv, cfg.n, cfg.struct.m)


@dataclass
class Problem:
    """Everything the solvers need about one experiment."""

    cfg: RunConfig
    data: ExperimentData
    quadric: UncertaintyQuadric
    matrices: tuple

    @property
    def prior(self) -> PriorKnowledge:
        return self.cfg.prior

    @property
    def struct(self):
        return self.cfg.struct

    @property
    def data_hash(self) -> str:
        return data_hash(self.data)


def build_problem(cfg: RunConfig, data: ExperimentData | None = None) -> Problem:
    data = load_data(cfg) if data is None else data
    mats = assemble_data_matrices(cfg.struct, data)
    q = build_uncertainty_quadric(*mats, cfg.noise_model(data.T), cfg.prior)
    return Problem(cfg, data, q, mats)


def run_synthesis(problem: Problem, settings: SolverSettings | None = None) -> SynthesisResult:
    return synthesize(problem.struct, problem.quadric, problem.prior, problem.cfg.synthesis,
                      settings or problem.cfg.solver)


@dataclass
class Verification:
    certificate: LyapunovCertificate
    pointwise: PointwiseReport


def run_verify(problem: Problem, ctrl: RationalController, method: str | None = None,
               deg_v: int | None = None, settings: SolverSettings | None = None,
               grid: np.ndarray | None = None) -> Verification:
    spec = problem.cfg.verify
    method = method or spec.method
    deg_v = spec.deg_v if deg_v is None else deg_v
    if method not in CERTIFIERS:
        raise ConfigError(f"unknown method {method!r}")
    cert = CERTIFIERS[method](problem.struct, problem.quadric, problem.prior, ctrl, deg_v,
                              eps=spec.epsilon, beta=spec.beta, settings=settings or problem.cfg.solver)
    if grid is None:
        grid = default_grid(problem.cfg.n, spec.grid_per_axis, spec.grid_half_width)
    rep = pointwise_thm3(problem.quadric, problem.prior, problem.struct, ctrl, cert.V, cert.beta, grid)
    return Verification(cert, rep)


def run_validate(cfg: RunConfig, ctrl: RationalController, initial_states=None,
                 horizon: float | None = None, seed: int | None = None) -> ConvergenceReport:
    spec = cfg.validate
    horizon = spec.horizon if horizon is None else horizon
    if horizon <= 0:
        raise ConfigError("validation horizon must be positive")
    inits = spec.initial_points(cfg.n, seed) if initial_states is None else initial_states
    return validate_closed_loop(ground_truth(cfg), ctrl, inits, horizon, dt=spec.dt)


# ---------------------------------------------------------------------------
# controller and certificate files


def controller_to_dict(ctrl: RationalController, names) -> dict:
    return {"a": ctrl.a.to_string(names), "c": [p.to_string(names) for p in ctrl.c]}


def controller_from_dict(d: dict, names) -> RationalController:
    try:
        a = parse_poly(str(d["a"]), names)
        c = [parse_poly(str(t), names) for t in d["c"]]
        return RationalController(a, c)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad controller record: {exc}") from None


def read_controller(path, cfg: RunConfig) -> RationalController:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"controller file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"controller file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "controller" not in doc:
        raise ConfigError(f"controller file {path} has no 'controller' record")
    if doc.get("variables", cfg.variables) != cfg.variables:
        raise ConfigError(f"controller file {path} uses variables {doc.get('variables')}")
    return controller_from_dict(doc["controller"], cfg.variables)


def write_json(path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return str(obj)
