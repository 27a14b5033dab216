"""Run configuration: one TOML file drives experiment, synthesis, verification and validation.

A config names the system (variables, ``F``, ``G`` as polynomial text), an
optional ground truth for simulation, where the samples come from, prior
knowledge, and the synthesis/verify/validate choices. The three shipped
presets live in ``densityctl/presets`` and load by name (``example1``...).
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .datamodel import ExperimentData, NoiseModel, PriorKnowledge, SystemStructure
from .parser import PolySyntaxError, parse_poly
from .polynomial import Polynomial, squared_norm
from .sdp import SolverSettings
from .synthesis import DensityConfig, RationalController

PRESETS = ("example1", "example2", "example3")
METHODS = ("cor5", "cor6", "prop4")


class ConfigError(ValueError):
    """The configuration is malformed or references something missing."""


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def data_hash(data: ExperimentData) -> str:
    h = hashlib.sha256()
    for arr in (data.times, data.X, data.Xdot, data.U):
        h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    return h.hexdigest()


@dataclass
class TruthSpec:
    A: np.ndarray
    B: np.ndarray
    input: list
    x0: np.ndarray
    omega: float = 0.0
    seed: int = 0


@dataclass
class DataSpec:
    source: str  # "simulate" | "table" | "csv"
    sample_times: np.ndarray | None
    omega: float
    table: ExperimentData | None = None
    csv: Path | None = None
    dt: float = 1e-4


@dataclass
class VerifySpec:
    method: str = "cor5"
    deg_v: int = 2
    epsilon: Polynomial | None = None
    beta: Polynomial | None = None
    grid_per_axis: int = 21
    grid_half_width: float = 2.0


@dataclass
class ValidateSpec:
    count: int = 4
    low: float = -2.0
    high: float = 2.0
    seed: int = 0
    horizon: float = 10.0
    dt: float = 1e-3
    initial_states: np.ndarray | None = None

    def initial_points(self, n: int, seed: int | None = None) -> np.ndarray:
        if self.initial_states is not None:
            return self.initial_states
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return rng.uniform(self.low, self.high, (self.count, n))


@dataclass
class RunConfig:
    name: str
    variables: list
    struct: SystemStructure
    truth: TruthSpec | None
    data: DataSpec
    prior: PriorKnowledge
    synthesis: DensityConfig
    verify: VerifySpec
    validate: ValidateSpec
    fixtures: dict = field(default_factory=dict)
    solver: SolverSettings = field(default_factory=SolverSettings)
    raw: dict = field(default_factory=dict, repr=False)
    origin: str = ""

    @property
    def n(self) -> int:
        return self.struct.n

    @property
    def config_hash(self) -> str:
        return _hash(self.raw)

    def poly(self, text: str) -> Polynomial:
        return parse_poly(str(text), self.variables)

    def noise_model(self, T: int) -> NoiseModel:
        return NoiseModel.pointwise(self.data.omega, self.n, T)

    def fixture_controller(self, kind: str = "K") -> RationalController:
        """The printed controller: ``kind="K"`` for the gain, ``"ac"`` for ``c / a``."""
        if kind == "K" and "K" in self.fixtures:
            return RationalController.from_gain([self.poly(t) for t in self.fixtures["K"]])
        if "a" in self.fixtures and "c" in self.fixtures:
            return RationalController(self.poly(self.fixtures["a"]),
                                      [self.poly(t) for t in self.fixtures["c"]])
        raise ConfigError(f"{self.name}: no fixture controller")


# ---------------------------------------------------------------------------


def _section(raw: dict, key: str, required: bool = False) -> dict:
    sec = raw.get(key)
    if sec is None:
        if required:
            raise ConfigError(f"missing [{key}] section")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"[{key}] must be a table")
    return sec


def _matrix(value, name: str) -> np.ndarray:
    try:
        arr = np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a numeric matrix") from None
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} has non-finite entries")
    return arr


def _poly_or_none(text, variables):
    if text is None:
        return None
    return parse_poly(str(text), variables)


def parse_config(raw: dict, base_dir: Path | None = None, origin: str = "") -> RunConfig:
    """Validate a decoded TOML document and build the typed configuration."""
    try:
        return _parse(raw, base_dir or Path.cwd(), origin)
    except ConfigError:
        raise
    except PolySyntaxError as exc:
        raise ConfigError(f"polynomial error: {exc}") from None
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from None


def _parse(raw: dict, base_dir: Path, origin: str) -> RunConfig:
    system = _section(raw, "system", required=True)
    variables = system.get("variables")
    if not variables or not all(isinstance(v, str) for v in variables):
        raise ConfigError("[system] variables must be a non-empty list of names")
    P = lambda t: parse_poly(str(t), variables)
    if "F" not in system or "G" not in system:
        raise ConfigError("[system] needs both F and G")
    F = [P(t) for t in system["F"]]
    G = [[P(t) for t in row] for row in system["G"]]
    struct = SystemStructure(F, G)
    n = struct.n

    truth = None
    if "truth" in raw:
        t = _section(raw, "truth")
        inputs = t.get("input", ["0"] * struct.m)
        truth = TruthSpec(
            _matrix(t["A"], "truth.A").reshape(n, struct.f),
            _matrix(t["B"], "truth.B").reshape(n, struct.g),
            [inputs] if isinstance(inputs, str) else list(inputs),
            np.asarray(t.get("x0", [0.0] * n), dtype=float),
            float(t.get("omega", 0.0)), int(t.get("seed", 0)),
        )

    d = _section(raw, "data", required=True)
    source = d.get("source", "simulate")
    times = np.asarray(d["sample_times"], dtype=float) if "sample_times" in d else None
    spec = DataSpec(source, times, float(d.get("omega", truth.omega if truth else 0.0)),
                    dt=float(d.get("dt", 1e-4)))
    if source == "table":
        if times is None:
            raise ConfigError("[data] table source needs sample_times")
        spec.table = ExperimentData(times, _matrix(d["X"], "data.X"), _matrix(d["Xdot"], "data.Xdot"),
                                    _matrix(d["U"], "data.U"))
    elif source == "csv":
        path = Path(d["path"])
        spec.csv = path if path.is_absolute() else base_dir / path
    elif source == "simulate":
        if truth is None:
            raise ConfigError("[data] source 'simulate' needs a [truth] section")
        if times is None:
            raise ConfigError("[data] simulate source needs sample_times")
    else:
        raise ConfigError(f"unknown data source {source!r}")
    if spec.omega < 0:
        raise ConfigError("data.omega must be non-negative")

    pk = _section(raw, "prior")
    entries = [(int(e["row"]), int(e["col"]), float(e["value"])) for e in pk.get("entries", [])]
    prior = PriorKnowledge.from_entries(entries, n, struct.f, struct.g)

    s = _section(raw, "synthesis")
    if "b" not in s:
        raise ConfigError("[synthesis] needs b")
    alpha = s.get("alpha", "auto")
    synth = DensityConfig(
        P(s["b"]), _poly_or_none(s.get("beta"), variables) or squared_norm(n).scale(1e-4),
        float(s.get("epsilon", 1e-4)), alpha if alpha == "auto" else float(alpha),
        int(s.get("deg_a", 0)), int(s.get("deg_c", 2)),
    )

    v = _section(raw, "verify")
    ver = VerifySpec(
        v.get("method", "cor5"), int(v.get("deg_v", 2)),
        _poly_or_none(v.get("epsilon"), variables), _poly_or_none(v.get("beta"), variables),
        int(v.get("grid_per_axis", 21)), float(v.get("grid_half_width", 2.0)),
    )
    if ver.method not in METHODS:
        raise ConfigError(f"verify.method must be one of {METHODS}")

    va = _section(raw, "validate")
    val = ValidateSpec(
        int(va.get("count", 4)), float(va.get("low", -2.0)), float(va.get("high", 2.0)),
        int(va.get("seed", 0)), float(va.get("horizon", 10.0)), float(va.get("dt", 1e-3)),
        _matrix(va["initial_states"], "validate.initial_states") if "initial_states" in va else None,
    )

    so = _section(raw, "solver")
    unknown = set(so) - set(SolverSettings.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown [solver] keys {sorted(unknown)}")
    solver = SolverSettings(**so)
    if solver.backend not in ("auto", "ipm", "clarabel"):
        raise ConfigError("solver.backend must be auto, ipm or clarabel")

    fixtures = dict(_section(raw, "fixtures"))
    return RunConfig(str(raw.get("name", origin or "run")), list(variables), struct, truth, spec,
                     prior, synth, ver, val, fixtures, solver, raw, origin)


def load_config(ref: str | Path) -> RunConfig:
    """Load a config file, or one of the shipped presets by name."""
    ref = str(ref)
    if ref in PRESETS:
        text = resources.files("densityctl.presets").joinpath(f"{ref}.toml").read_text()
        base, origin = Path.cwd(), f"preset:{ref}"
    else:
        path = Path(ref)
        if not path.is_file():
            raise ConfigError(f"config file {ref} not found")
        text, base, origin = path.read_text(), path.parent, str(path)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    return parse_config(raw, base, origin)
