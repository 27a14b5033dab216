"""Rational controller synthesis with a density function ``rho = a / b^alpha``.

For every parameter vector ``v`` of the data-consistent set, the weighted
divergence ``b div(a A F + B G c) - alpha grad(b) (a A F + B G c)`` equals
``R(x)^T v``. Positivity of that linear functional over the whole ellipsoid is
imposed through one matrix-SOS constraint of size ``1 + l`` (no multiplier).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import PriorKnowledge, SystemStructure, UncertaintyQuadric
from .polynomial import (
    Polynomial,
    eval_array,
    leading_form_min_on_sphere,
    poly_array,
    sphere_grid,
    squared_norm,
)
from .sdp import SolverSettings, certify, solve
from .sos import AffinePoly, SOSProgram, extract, lift, monomial_basis

log = logging.getLogger(__name__)

POSITIVITY_RADII = (1e-2, 1e-1, 1.0, 10.0)
POSITIVITY_RTOL = 1e-12


class SynthesisInfeasible(RuntimeError):
    """The SOS program has no solution at the requested degrees."""

    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


class SolverFailure(RuntimeError):
    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


@dataclass(frozen=True)
class RationalController:
    """State feedback ``K(x) = c(x) / a(x)`` with ``a > 0`` and ``c(0) = 0``."""

    a: Polynomial
    c: np.ndarray

    def __post_init__(self):
        c = poly_array(list(np.asarray(self.c, dtype=object).ravel()))
        object.__setattr__(self, "c", c)
        if any(p.nvars != self.a.nvars for p in c):
            raise ValueError("a and c must share variables")
        c0 = eval_array(c, np.zeros(self.a.nvars))
        if np.max(np.abs(c0)) > 1e-12:
            raise ValueError(f"c(0) must vanish, got {c0}")

    @property
    def nvars(self) -> int:
        return self.a.nvars

    @property
    def m(self) -> int:
        return self.c.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return eval_array(self.c, x) / self.a.eval(x)

    def batch(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        den = self.a.eval(pts)
        return np.column_stack([p.eval(pts) for p in self.c]) / den[:, None]

    def gain_polynomials(self) -> np.ndarray:
        """``c / a`` as polynomials when ``a`` is constant."""
        if self.a.degree() > 0:
            raise ValueError("K is not polynomial for a non-constant denominator")
        a0 = self.a.coefficient((0,) * self.nvars)
        return poly_array([p.scale(1.0 / a0) for p in self.c])

    @classmethod
    def from_gain(cls, K) -> "RationalController":
        K = list(np.asarray(K, dtype=object).ravel())
        return cls(Polynomial.constant(K[0].nvars, 1.0), poly_array(K))


@dataclass
class DensityConfig:
    """Choices that make the synthesis program linear in ``a`` and ``c``."""

    b: Polynomial
    beta: Polynomial | None = None
    epsilon: float = 1e-4
    alpha: float | str = "auto"
    deg_a: int = 0
    deg_c: int = 2

    def __post_init__(self):
        n = self.b.nvars
        if self.beta is None:
            self.beta = squared_norm(n).scale(1e-4)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.deg_a < 0 or self.deg_c < 0:
            raise ValueError("degrees must be non-negative")
        if self.deg_a % 2:
            raise ValueError("deg_a must be even so that a - epsilon can be SOS")
        if self.alpha != "auto" and float(self.alpha) <= 0:
            raise ValueError("alpha must be positive")


# ---------------------------------------------------------------------------
# positivity and integrability checks


def positive_off_origin(p: Polynomial, delta: float = 1e-6, density: int = 200) -> tuple[bool, str]:
    """Check ``p(x) > 0`` for ``x != 0``: SOS test of ``p - delta |x|^k``, else sphere sampling.

    ``p`` is first scaled to unit largest coefficient so that ``delta`` sits
    well above the solver's feasibility tolerance.
    """
    n = p.nvars
    if p.is_zero() or abs(p.coefficient((0,) * n)) > 1e-12:
        return False, "must vanish at the origin and be nonzero"
    p = p.scale(1.0 / max(abs(c) for c in p.terms.values()))
    k = int(p.min_degree())
    if k % 2 == 0:
        prog = SOSProgram(n)
        prog.add_sos(p - squared_norm(n) ** (k // 2) * delta)
        prob = prog.compile()
        sol = solve(prob)
        if sol.feasible and certify(prob, sol).ok:
            return True, "sos"
    pts = sphere_grid(n, density)
    for r in POSITIVITY_RADII:
        vals = p.eval(r * pts)
        # relative threshold: rounding turns exact zeros on the axes into ~1e-33
        if np.min(vals) <= POSITIVITY_RTOL * np.max(np.abs(vals)):
            return False, f"nonpositive value {np.min(vals):.3e} on sphere of radius {r}"
    return True, "sampling"


def _gc_degree(struct: SystemStructure, deg_c: int) -> int:
    return max(int(p.degree()) for p in struct.G.flat if not p.is_zero()) + deg_c


def numerator_degree(struct: SystemStructure, deg_a: int, deg_c: int) -> int:
    deg_F = max(int(p.degree()) for p in struct.F if not p.is_zero())
    return max(deg_a + deg_F, _gc_degree(struct, deg_c))


def choose_alpha(b: Polynomial, deg_numerator_bound: int, n: int) -> int:
    """Smallest integer ``alpha`` with ``alpha deg(b) >= deg_numerator_bound + n + 1``.

    With a positive leading form, ``b >= c |x|^deg(b)`` far out, so the vectors
    ``a F / (b^alpha |x|)`` and ``G c / (b^alpha |x|)`` decay at least like
    ``|x|^(-n-2)`` and are integrable outside the unit ball.
    """
    if leading_form_min_on_sphere(b) <= 0:
        raise ValueError("leading form of b is not positive on the unit sphere; "
                         "the degree rule cannot certify integrability")
    deg_b = int(b.degree())
    return max(1, math.ceil((deg_numerator_bound + n + 1) / deg_b))


def integrability_check(b: Polynomial, alpha: float, deg_num: int, n: int) -> tuple[bool, int | None]:
    """Return ``(certified, rule_value)``; ``rule_value`` is None when the rule does not apply."""
    try:
        rule = choose_alpha(b, deg_num, n)
    except ValueError:
        return False, None
    return alpha >= rule, rule


# ---------------------------------------------------------------------------
# the synthesis program


def _gc(struct: SystemStructure, c) -> list:
    n = struct.n
    out = []
    for k in range(struct.g):
        acc = AffinePoly.zero(n)
        for j in range(struct.m):
            acc = acc + lift(c[j], n) * struct.G[k, j]
        out.append(acc)
    return out


def build_R(a, c, b: Polynomial, alpha: float, struct: SystemStructure) -> np.ndarray:
    """Template vector ``R(x)`` of length ``n (f + g)`` with ``R^T v`` the weighted divergence."""
    n = struct.n
    a = lift(a, n)
    c = list(np.asarray(c, dtype=object).ravel())
    if len(c) != struct.m:
        raise ValueError(f"controller numerator needs {struct.m} entries, got {len(c)}")
    aF = [a * Fj for Fj in struct.F]
    Gc = _gc(struct, c)
    db = [b.partial(i) * float(alpha) for i in range(n)]
    out = []
    for i in range(n):
        out.extend(e.partial(i) * b - e * db[i] for e in aF)
    for i in range(n):
        out.extend(e.partial(i) * b - e * db[i] for e in Gc)
    arr = np.empty(len(out), dtype=object)
    arr[:] = out
    return arr


def robust_matrix(q: UncertaintyQuadric, vec, prior: PriorKnowledge, beta) -> np.ndarray:
    """``(1+l)`` template matrix whose PSD-ness gives ``vec^T v >= beta`` on the whole set.

    Entries: corner ``vec_sbar^T center + vec_s^T v_s - beta``, border
    ``sqrt(N|N22) vec_sbar`` and lower block ``-(corner + beta) N22``.
    """
    vec = np.asarray(vec, dtype=object)
    nv = next(iter(vec.flat)).nvars
    s0, sb0 = prior.s0, prior.sbar0
    l = sb0.size
    if l < 1:
        raise ValueError("at least one parameter must be unknown")
    corner = AffinePoly.zero(nv)
    for k, idx in enumerate(sb0):
        if q.center[k]:
            corner = corner + lift(vec[idx], nv) * float(q.center[k])
    for idx, val in zip(s0, prior.pinned_values):
        if val:
            corner = corner + lift(vec[idx], nv) * float(val)
    M = np.empty((1 + l, 1 + l), dtype=object)
    M[0, 0] = corner - beta
    for k, idx in enumerate(sb0):
        border = lift(vec[idx], nv) * q.sqrt_schur
        M[0, 1 + k] = border
        M[1 + k, 0] = border
    for i in range(l):
        for j in range(l):
            M[1 + i, 1 + j] = corner * float(-q.N22[i, j])
    return M


def theorem2_constraint(q: UncertaintyQuadric, R, prior: PriorKnowledge, beta) -> np.ndarray:
    return robust_matrix(q, R, prior, beta)


@dataclass
class SynthesisResult:
    controller: RationalController
    alpha: float
    integrability_certified: bool
    alpha_rule: int | None
    program: SOSProgram
    problem: object
    solution: object
    report: object
    provenance: dict = field(default_factory=dict)

    @property
    def matrix_size(self) -> int:
        return self.program.constraints[-1].size


def controller_templates(prog: SOSProgram, struct: SystemStructure, deg_a: int, deg_c: int):
    n = struct.n
    a = prog.new_poly("a", monomial_basis(n, deg_a))
    c = [prog.new_poly(f"c{j + 1}", monomial_basis(n, deg_c, drop_constant=True))
         for j in range(struct.m)]
    return a, c


def synthesize(struct: SystemStructure, q: UncertaintyQuadric, prior: PriorKnowledge,
               cfg: DensityConfig, settings: SolverSettings | None = None) -> SynthesisResult:
    """Solve the density-function SOS program and return ``K = c / a``."""
    n = struct.n
    for name, poly in (("b", cfg.b), ("beta", cfg.beta)):
        ok, how = positive_off_origin(poly)
        if not ok:
            raise ValueError(f"{name} is not positive away from the origin: {how}")
    deg_num = numerator_degree(struct, cfg.deg_a, cfg.deg_c)
    if cfg.alpha == "auto":
        alpha = choose_alpha(cfg.b, deg_num, n)
        certified, rule = True, alpha
    else:
        alpha = float(cfg.alpha)
        certified, rule = integrability_check(cfg.b, alpha, deg_num, n)
        if rule is not None and alpha < rule:
            raise ValueError(f"alpha={alpha} is below the integrability rule value {rule}")
        if rule is None:
            log.warning("integrability of rho f / |x| is not certified by the degree rule "
                        "(leading form of b is not positive definite); using alpha=%s", alpha)

    prog = SOSProgram(n)
    a, c = controller_templates(prog, struct, cfg.deg_a, cfg.deg_c)
    prog.add_sos(a - cfg.epsilon, name="a_minus_eps")
    R = build_R(a, c, cfg.b, alpha, struct)
    M = theorem2_constraint(q, R, prior, cfg.beta)
    prog.add_matrix_sos(M, name="divergence")
    prob = prog.compile()
    sol = solve(prob, settings)
    report = certify(prob, sol)
    diag = {"status": sol.status, "margin": sol.margin, "min_eig": min(sol.block_min_eigs, default=0.0),
            "eq_residual": sol.max_eq_residual, **sol.info}
    if sol.status == "infeasible":
        raise SynthesisInfeasible(f"synthesis program infeasible (margin {sol.margin:.3e})", sol)
    if not sol.feasible:
        raise SolverFailure(f"synthesis solve ended {sol.status}: {report.summary()}", sol)
    a_val = extract(a, sol)
    c_val = [extract(ci, sol) for ci in c]
    ctrl = RationalController(a_val, poly_array(c_val))
    prov = {
        "alpha": alpha, "alpha_rule": rule, "integrability_certified": certified,
        "epsilon": cfg.epsilon, "deg_a": cfg.deg_a, "deg_c": cfg.deg_c,
        "b": cfg.b.to_string(), "beta": cfg.beta.to_string(),
        "matrix_size": M.shape[0], "block_sizes": prob.block_sizes,
        "n_decision_vars": prob.n_vars, "solver": diag, "certify": report.summary(),
    }
    return SynthesisResult(ctrl, alpha, certified, rule, prog, prob, sol, report, prov)
