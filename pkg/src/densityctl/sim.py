"""Fixed-step RK4 simulation: data-generating experiments and closed-loop validation."""
from __future__ import annotations

import ast
import csv
import math
import operator
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datamodel import ExperimentData, SystemStructure

BLOWUP_NORM = 1e12
CONVERGENCE_RADIUS = 1e-2


class IntegrationBlowup(RuntimeError):
    def __init__(self, t: float, state):
        super().__init__(f"state left the finite range at t={t:.6g}")
        self.t = t
        self.state = state


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n, len(times))
    diverged_at: float | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    def to_csv(self, path, comment: str | None = None) -> None:
        n = self.states.shape[0]
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)])
            for k, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[:, k]])


def _rk4_step(field, t, x, h):
    k1 = field(t, x)
    k2 = field(t + h / 2, x + h / 2 * k1)
    k3 = field(t + h / 2, x + h / 2 * k2)
    k4 = field(t + h, x + h * k3)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(field: Callable, x0, t_span, dt: float, record_every: int = 1,
              stop_radius: float | None = None) -> Trajectory:
    """Classical RK4 for ``xdot = field(t, x)`` from ``t_span[0]`` to ``t_span[1]``.

    The step is shrunk slightly so the end time is hit exactly. Raises
    :class:`IntegrationBlowup` when the state becomes non-finite or huge.
    """
    t0, t1 = map(float, t_span)
    if dt <= 0 or t1 < t0:
        raise ValueError("need dt > 0 and t1 >= t0")
    x = np.array(x0, dtype=float)
    steps = max(1, math.ceil((t1 - t0) / dt - 1e-9)) if t1 > t0 else 0
    h = (t1 - t0) / steps if steps else 0.0
    times, states = [t0], [x.copy()]
    for k in range(steps):
        t = t0 + k * h
        x = _rk4_step(field, t, x, h)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > BLOWUP_NORM:
            raise IntegrationBlowup(t + h, x)
        if (k + 1) % record_every == 0 or k + 1 == steps:
            times.append(t0 + (k + 1) * h if k + 1 < steps else t1)
            states.append(x.copy())
        if stop_radius is not None and np.linalg.norm(x) < stop_radius * 1e-3:
            break
    return Trajectory(np.array(times), np.array(states).T)


# ---------------------------------------------------------------------------
# input signals written as expressions in t

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow, ast.BitXor: operator.pow}
_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp, "tanh": math.tanh}


class InputSignal:
    """A scalar signal such as ``"-sin(2*t) + cos(t)"``; ``^`` means power."""

    def __init__(self, text: str):
        self.text = text
        try:
            self._tree = ast.parse(text.strip(), mode="eval").body
        except SyntaxError as exc:
            raise ValueError(f"bad input signal {text!r}: {exc.msg}") from None
        self._check(self._tree)

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self._check(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if len(node.args) != 1 or node.keywords:
                raise ValueError(f"{node.func.id} takes one argument")
            self._check(node.args[0])
        elif isinstance(node, ast.Name) and node.id in ("t", "pi"):
            pass
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        else:
            raise ValueError(f"unsupported construct in input signal {self.text!r}")

    def _eval(self, node, t):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, t), self._eval(node.right, t))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, t)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](self._eval(node.args[0], t))
        if isinstance(node, ast.Name):
            return t if node.id == "t" else math.pi
        return float(node.value)

    def __call__(self, t: float) -> float:
        return float(self._eval(self._tree, float(t)))

    def __repr__(self):
        return f"InputSignal({self.text!r})"


def as_input(u, m: int) -> Callable[[float], np.ndarray]:
    """Normalise strings, callables or lists of either into ``t -> R^m``."""
    if isinstance(u, str) or callable(u):
        u = [u]
    parts = [InputSignal(p) if isinstance(p, str) else p for p in u]
    if len(parts) != m:
        raise ValueError(f"expected {m} input signals, got {len(parts)}")
    return lambda t: np.array([float(p(t)) for p in parts])


# ---------------------------------------------------------------------------


@dataclass
class GroundTruthSystem:
    """The true plant, known to the simulator only."""

    struct: SystemStructure
    A: np.ndarray
    B: np.ndarray
    input_signal: Callable | str | list = "0"
    omega: float = 0.0
    seed: int = 0

    def __post_init__(self):
        s = self.struct
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float)).reshape(s.n, s.f)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float)).reshape(s.n, s.g)
        self._u = as_input(self.input_signal, s.m)
        if self.omega < 0:
            raise ValueError("omega must be non-negative")

    def u(self, t: float) -> np.ndarray:
        return self._u(t)

    def drift(self, x, u) -> np.ndarray:
        s = self.struct
        return self.A @ s.F_at(x) + self.B @ (s.G_at(x) @ u)

    def open_loop_field(self, t, x):
        return self.drift(x, self._u(t))

    def closed_loop_field(self, controller):
        return lambda t, x: self.drift(x, controller(x))


def ball_noise(rng: np.random.Generator, n: int, T: int, omega: float) -> np.ndarray:
    """``T`` samples uniform in the Euclidean ball of radius ``omega``."""
    if omega == 0:
        return np.zeros((n, T))
    g = rng.standard_normal((n, T))
    g /= np.linalg.norm(g, axis=0, keepdims=True)
    r = rng.random(T) ** (1.0 / n)
    return omega * g * r


def run_experiment(system: GroundTruthSystem, x0, sample_times, dt: float = 1e-4) -> ExperimentData:
    """Integrate the open loop and record ``(x, xdot + w, u)`` at the sample times.

    The disturbance enters only the recorded derivative samples; each ``w_i``
    is drawn uniformly from the ``omega`` ball with a seeded generator.
    """
    s = system.struct
    times = np.asarray(sample_times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("sample times must be non-negative and strictly increasing")
    rng = np.random.default_rng(system.seed)
    W = ball_noise(rng, s.n, times.size, system.omega)
    x = np.array(x0, dtype=float)
    if x.shape != (s.n,):
        raise ValueError(f"x0 must have {s.n} entries")
    t = 0.0
    X, Xd, U = [], [], []
    for k, tk in enumerate(times):
        if tk > t:
            x = integrate(system.open_loop_field, x, (t, tk), dt, record_every=10**9).final
            t = tk
        u = system.u(tk)
        X.append(x.copy())
        U.append(u)
        Xd.append(system.drift(x, u) + W[:, k])
    return ExperimentData(times, np.array(X).T, np.array(Xd).T, np.array(U).T)


@dataclass
class ConvergenceReport:
    initial_states: np.ndarray
    final_norms: np.ndarray
    converged: np.ndarray
    trajectories: list = field(default_factory=list)
    diverged: list = field(default_factory=list)
    radius: float = CONVERGENCE_RADIUS

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def summary(self) -> str:
        lines = []
        for x0, nrm, ok in zip(self.initial_states, self.final_norms, self.converged):
            lines.append(f"x0={np.array2string(x0, precision=4)} |x(T)|={nrm:.3e} "
                         f"{'converged' if ok else 'NOT converged'}")
        return "\n".join(lines)


def validate_closed_loop(system: GroundTruthSystem, controller, initial_states, horizon: float,
                         dt: float = 1e-3, radius: float = CONVERGENCE_RADIUS,
                         record_every: int = 10) -> ConvergenceReport:
    field_fn = system.closed_loop_field(controller)
    inits = np.atleast_2d(np.asarray(initial_states, dtype=float))
    finals, oks, trajs, diverged = [], [], [], []
    for x0 in inits:
        try:
            tr = integrate(field_fn, x0, (0.0, horizon), dt, record_every=record_every)
            nrm = float(np.linalg.norm(tr.final))
        except IntegrationBlowup as exc:
            tr = Trajectory(np.array([0.0, exc.t]), np.column_stack([x0, np.full_like(x0, np.nan)]),
                            diverged_at=exc.t)
            nrm = np.inf
            diverged.append(exc.t)
        trajs.append(tr)
        finals.append(nrm)
        oks.append(nrm < radius)
    return ConvergenceReport(inits, np.array(finals), np.array(oks), trajs, diverged, radius)
