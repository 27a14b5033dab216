"""Data-driven Lyapunov certification of a fixed rational controller.

Given ``K = c / a``, a polynomial ``V`` certifies stability of every
data-consistent closed loop when ``-grad V . (a A F + B G c) >= beta`` for all
``(A, B)`` in the set. That functional is ``aL(x)^T v`` with
``aL = Q(x) grad V(x)``, and its robust positivity becomes one matrix-SOS
constraint: full size ``1 + l`` (:func:`corollary5_certify`), reduced size
``1 + n`` (:func:`corollary6_certify`), or the classical multiplier form
(:func:`prop4_certify`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import PriorKnowledge, SystemStructure, UncertaintyQuadric
from .polynomial import (Polynomial, eval_array, leading_form_min_on_sphere, poly_array, sphere_grid,
                         squared_norm)
from .sdp import SolverSettings, certify, solve
from .slemma import LinearFunctional, lemma_matrix
from .sos import AffinePoly, SOSProgram, extract, lift, monomial_basis
from .synthesis import RationalController, SolverFailure, positive_off_origin, robust_matrix

log = logging.getLogger(__name__)

POINTWISE_TOL = 1e-7


class NotCertified(RuntimeError):
    """No certificate was found at the requested degree (this does not prove non-informativity)."""

    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


@dataclass
class LyapunovCertificate:
    V: Polynomial
    method: str
    deg_v: int
    matrix_size: int
    epsilon: Polynomial
    beta: Polynomial
    n_decision_vars: int
    gamma: Polynomial | None = None
    program: SOSProgram | None = field(default=None, repr=False)
    problem: object = field(default=None, repr=False)
    solution: object = field(default=None, repr=False)
    report: object = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "method": self.method, "deg_v": self.deg_v, "V": self.V.to_string(),
            "matrix_size": self.matrix_size, "epsilon": self.epsilon.to_string(),
            "beta": self.beta.to_string(), "n_decision_vars": self.n_decision_vars,
        }
        if self.gamma is not None:
            out["gamma"] = self.gamma.to_string()
        if self.solution is not None:
            out["solver"] = {"status": self.solution.status, "margin": self.solution.margin,
                             "eq_residual": self.solution.max_eq_residual,
                             **{k: v for k, v in self.solution.info.items()}}
        if self.report is not None:
            out["certify"] = self.report.summary()
        return out


# ---------------------------------------------------------------------------
# the functional aL(x)


def _gc_poly(struct: SystemStructure, ctrl: RationalController) -> list:
    return [sum((struct.G[k, j] * ctrl.c[j] for j in range(struct.m)), Polynomial.zero(struct.n))
            for k in range(struct.g)]


def build_Q(struct: SystemStructure, ctrl: RationalController) -> np.ndarray:
    """Polynomial matrix ``Q = [-I kron aF; -I kron Gc]`` of shape ``(n(f+g), n)``."""
    n, f, g = struct.n, struct.f, struct.g
    aF = [ctrl.a * Fj for Fj in struct.F]
    Gc = _gc_poly(struct, ctrl)
    zero = Polynomial.zero(n)
    Q = np.empty((n * (f + g), n), dtype=object)
    Q[:] = zero
    for i in range(n):
        for j in range(f):
            Q[i * f + j, i] = -aF[j]
        for k in range(g):
            Q[n * f + i * g + k, i] = -Gc[k]
    return poly_array(Q.tolist())


def build_L_scaled(V, struct: SystemStructure, ctrl: RationalController) -> np.ndarray:
    """Template vector ``aL = Q grad V``; ``aL^T v = -a grad V . f`` for the system ``v``."""
    n = struct.n
    V = lift(V, n)
    grad = [V.partial(i) for i in range(n)]
    Q = build_Q(struct, ctrl)
    out = []
    for r in range(Q.shape[0]):
        acc = AffinePoly.zero(n)
        for i in range(n):
            if not Q[r, i].is_zero():
                acc = acc + grad[i] * Q[r, i]
        out.append(acc)
    arr = np.empty(len(out), dtype=object)
    arr[:] = out
    return arr


def _defaults(n, eps, beta):
    eps = squared_norm(n).scale(1e-4) if eps is None else eps
    beta = squared_norm(n).scale(1e-4) if beta is None else beta
    for name, poly in (("epsilon", eps), ("beta", beta)):
        ok, how = positive_off_origin(poly)
        if not ok:
            raise ValueError(f"{name} is not positive away from the origin: {how}")
    if leading_form_min_on_sphere(eps) <= 0:
        raise ValueError("epsilon must be radially unbounded (positive leading form)")
    return eps, beta


def _lyapunov_template(prog: SOSProgram, n: int, deg_v: int) -> AffinePoly:
    # deg_v = 0 leaves V = 0, which the solve then reports as not certified
    if deg_v < 0 or deg_v % 2:
        raise ValueError("deg_v must be a non-negative even integer")
    # no constant (V(0) = 0) and no linear part (V >= eps |x|^2 forces a zero gradient at 0)
    monos = [m for m in monomial_basis(n, deg_v) if sum(m) >= 2]
    return prog.new_poly("V", monos)


def _finish(prog, V, method, deg_v, size, eps, beta, settings, gamma=None) -> LyapunovCertificate:
    prob = prog.compile()
    sol = solve(prob, settings)
    report = certify(prob, sol)
    log.info("%s: SOS matrix %dx%d, %d decision variables, status %s",
             method, size, size, prob.n_vars, sol.status)
    if sol.status == "infeasible":
        raise NotCertified(f"not certified at degree {deg_v} ({method}, margin {sol.margin:.3e})", sol)
    if not sol.feasible:
        raise SolverFailure(f"{method} solve ended {sol.status}: {report.summary()}", sol)
    return LyapunovCertificate(
        extract(V, sol), method, deg_v, size, eps, beta, prob.n_vars,
        None if gamma is None else extract(gamma, sol), prog, prob, sol, report,
    )


def corollary5_certify(struct: SystemStructure, q: UncertaintyQuadric, prior: PriorKnowledge,
                       ctrl: RationalController, deg_v: int, eps: Polynomial | None = None,
                       beta: Polynomial | None = None,
                       settings: SolverSettings | None = None) -> LyapunovCertificate:
    """Full-size certificate: one ``(1+l) x (1+l)`` SOS matrix plus ``V - eps`` SOS."""
    n = struct.n
    eps, beta = _defaults(n, eps, beta)
    prog = SOSProgram(n)
    V = _lyapunov_template(prog, n, deg_v)
    prog.add_sos(V - eps, name="V_minus_eps")
    aL = build_L_scaled(V, struct, ctrl)
    M = robust_matrix(q, aL, prior, beta)
    prog.add_matrix_sos(M, name="decrease")
    return _finish(prog, V, "cor5", deg_v, M.shape[0], eps, beta, settings)


def reduced_matrix(q: UncertaintyQuadric, aL, Q, prior: PriorKnowledge, beta) -> np.ndarray:
    """``(1+n)`` matrix: congruence of the full-size one by ``diag(1, N22^-1 Q_sbar)``."""
    nv = next(iter(aL.flat)).nvars
    sb0, s0 = prior.sbar0, prior.s0
    n = Q.shape[1]
    corner = AffinePoly.zero(nv)
    for k, idx in enumerate(sb0):
        if q.center[k]:
            corner = corner + aL[idx] * float(q.center[k])
    for idx, val in zip(s0, prior.pinned_values):
        if val:
            corner = corner + aL[idx] * float(val)
    Qs = Q[sb0, :]
    H = np.empty((sb0.size, n), dtype=object)  # N22^-1 Q_sbar
    for r in range(sb0.size):
        for k in range(n):
            H[r, k] = sum((Qs[t, k] * float(q.inv_N22[r, t]) for t in range(sb0.size)
                           if q.inv_N22[r, t] and not Qs[t, k].is_zero()), Polynomial.zero(nv))
    P = np.empty((n, n), dtype=object)  # Q_sbar^T N22^-1 Q_sbar, negative semidefinite
    for i in range(n):
        for j in range(i, n):
            P[i, j] = sum((Qs[r, i] * H[r, j] for r in range(sb0.size) if not Qs[r, i].is_zero()),
                          Polynomial.zero(nv))
            P[j, i] = P[i, j]
    M = np.empty((1 + n, 1 + n), dtype=object)
    M[0, 0] = corner - beta
    for k in range(n):
        border = AffinePoly.zero(nv)
        for r, idx in enumerate(sb0):
            if not H[r, k].is_zero():
                border = border + aL[idx] * H[r, k]
        M[0, 1 + k] = M[1 + k, 0] = border * q.sqrt_schur
    for i in range(n):
        for j in range(n):
            M[1 + i, 1 + j] = -(corner * P[i, j])
    return M


def corollary6_certify(struct: SystemStructure, q: UncertaintyQuadric, prior: PriorKnowledge,
                       ctrl: RationalController, deg_v: int, eps: Polynomial | None = None,
                       beta: Polynomial | None = None,
                       settings: SolverSettings | None = None) -> LyapunovCertificate:
    """Reduced-size certificate: one ``(1+n) x (1+n)`` SOS matrix plus ``V - eps`` SOS."""
    n = struct.n
    eps, beta = _defaults(n, eps, beta)
    prog = SOSProgram(n)
    V = _lyapunov_template(prog, n, deg_v)
    prog.add_sos(V - eps, name="V_minus_eps")
    aL = build_L_scaled(V, struct, ctrl)
    M = reduced_matrix(q, aL, build_Q(struct, ctrl), prior, beta)
    prog.add_matrix_sos(M, name="decrease")
    return _finish(prog, V, "cor6", deg_v, M.shape[0], eps, beta, settings)


def multiplier_matrix(q: UncertaintyQuadric, aL, prior: PriorKnowledge, beta, gamma) -> np.ndarray:
    """``[[2 aL_s^T v_s - beta, aL_sbar^T], [aL_sbar, 0]] - gamma N``."""
    nv = next(iter(aL.flat)).nvars
    s0, sb0 = prior.s0, prior.sbar0
    l = sb0.size
    gamma = lift(gamma, nv)
    known = AffinePoly.zero(nv)
    for idx, val in zip(s0, prior.pinned_values):
        if val:
            known = known + aL[idx] * float(val)
    M = np.empty((1 + l, 1 + l), dtype=object)
    M[0, 0] = known * 2.0 - beta - gamma * q.N11
    for k, idx in enumerate(sb0):
        M[0, 1 + k] = M[1 + k, 0] = aL[idx] - gamma * float(q.N21[k])
    for i in range(l):
        for j in range(l):
            M[1 + i, 1 + j] = gamma * float(-q.N22[i, j])
    return M


def prop4_certify(struct: SystemStructure, q: UncertaintyQuadric, prior: PriorKnowledge,
                  ctrl: RationalController, deg_v: int, deg_gamma: int | None = None,
                  eps: Polynomial | None = None, beta: Polynomial | None = None,
                  settings: SolverSettings | None = None,
                  gamma_zero: bool = False) -> LyapunovCertificate:
    """Classical S-procedure certificate with an SOS multiplier ``gamma(x)``.

    ``deg_gamma`` defaults to the degree of ``aL`` rounded up to even, the
    degree of the exact rational multiplier. ``gamma_zero`` pins the
    multiplier to zero.
    """
    n = struct.n
    eps, beta = _defaults(n, eps, beta)
    prog = SOSProgram(n)
    V = _lyapunov_template(prog, n, deg_v)
    prog.add_sos(V - eps, name="V_minus_eps")
    aL = build_L_scaled(V, struct, ctrl)
    if deg_gamma is None:
        d = int(max(e.degree() for e in aL))
        deg_gamma = d + d % 2
    if gamma_zero:
        gamma = AffinePoly.zero(n)
    else:
        gamma = prog.new_poly("gamma", monomial_basis(n, deg_gamma))
        prog.add_sos(gamma, name="gamma_sos")
    M = multiplier_matrix(q, aL, prior, beta, gamma)
    prog.add_matrix_sos(M, name="decrease")
    return _finish(prog, V, "prop4", deg_v, M.shape[0], eps, beta, settings,
                   None if gamma_zero else gamma)


CERTIFIERS = {"cor5": corollary5_certify, "cor6": corollary6_certify, "prop4": prop4_certify}


# ---------------------------------------------------------------------------
# pointwise checks


def default_grid(n: int, per_axis: int = 21, half_width: float = 2.0,
                 radii=(0.1, 1.0, 5.0), per_sphere: int = 100, seed: int = 0) -> np.ndarray:
    """Regular grid on ``[-w, w]^n`` without the origin, plus random points on spheres."""
    axes = [np.linspace(-half_width, half_width, per_axis)] * n
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    grid = grid[np.linalg.norm(grid, axis=1) > 1e-12]
    rng = np.random.default_rng(seed)
    shells = []
    for r in radii:
        d = rng.standard_normal((per_sphere, n))
        shells.append(r * d / np.linalg.norm(d, axis=1, keepdims=True))
    return np.vstack([grid] + shells)


@dataclass
class PointwiseReport:
    points: np.ndarray
    min_eigs: np.ndarray
    scales: np.ndarray
    tol: float

    @property
    def violations(self) -> np.ndarray:
        return np.flatnonzero(self.min_eigs < -self.tol * self.scales)

    @property
    def ok(self) -> bool:
        return self.violations.size == 0

    @property
    def worst(self) -> float:
        return float(np.min(self.min_eigs / self.scales))


def _fixed_L(struct, ctrl, V: Polynomial) -> np.ndarray:
    Q = build_Q(struct, ctrl)
    grad = V.gradient()
    return poly_array([sum((Q[r, i] * grad[i] for i in range(struct.n)), Polynomial.zero(struct.n))
                       for r in range(Q.shape[0])])


def pointwise_thm3(q: UncertaintyQuadric, prior: PriorKnowledge, struct: SystemStructure,
                   ctrl: RationalController, V: Polynomial, beta: Polynomial, points,
                   tol: float = POINTWISE_TOL) -> PointwiseReport:
    """Evaluate the lemma matrix of ``aL(x)^T v - beta(x)`` at each point.

    A point passes when the minimum eigenvalue is at least ``-tol`` relative
    to ``1 + ||M(x)||``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    aL = _fixed_L(struct, ctrl, V)
    vals = np.column_stack([p.eval(pts) for p in aL])  # (k, n_params)
    bvals = beta.eval(pts)
    s0, sb0 = prior.s0, prior.sbar0
    known = vals[:, s0] @ prior.pinned_values if s0.size else np.zeros(len(pts))
    mins, scales = np.empty(len(pts)), np.empty(len(pts))
    for k in range(len(pts)):
        M = lemma_matrix(q, LinearFunctional(vals[k, sb0], known[k]))
        M[0, 0] -= bvals[k]
        w = np.linalg.eigvalsh(M)
        mins[k] = w[0]
        scales[k] = 1.0 + np.abs(w).max()
    return PointwiseReport(pts, mins, scales, tol)


def explicit_multiplier(q: UncertaintyQuadric, prior: PriorKnowledge, struct, ctrl, V, points):
    """The multiplier ``aL_sbar^T N22^-1 aL_sbar / (aL_sbar^T N22^-1 N21 - aL_s^T v_s)`` pointwise."""
    pts = np.atleast_2d(points)
    aL = _fixed_L(struct, ctrl, V)
    vals = np.column_stack([p.eval(pts) for p in aL])
    s0, sb0 = prior.s0, prior.sbar0
    lam = vals[:, sb0]
    known = vals[:, s0] @ prior.pinned_values if s0.size else np.zeros(len(pts))
    num = np.einsum("ki,ij,kj->k", lam, q.inv_N22, lam)
    den = lam @ (q.inv_N22 @ q.N21) - known
    return num / den, lam, known


def prop4_pointwise(q: UncertaintyQuadric, prior: PriorKnowledge, struct, ctrl, V, beta, points,
                    tol: float = POINTWISE_TOL) -> PointwiseReport:
    """Multiplier-form matrix with the explicit multiplier, evaluated at each point."""
    pts = np.atleast_2d(points)
    gam, lam, known = explicit_multiplier(q, prior, struct, ctrl, V, pts)
    bvals = beta.eval(pts)
    l = lam.shape[1]
    mins, scales = np.empty(len(pts)), np.empty(len(pts))
    for k in range(len(pts)):
        M = np.zeros((1 + l, 1 + l))
        M[0, 0] = 2 * known[k] - bvals[k]
        M[0, 1:] = M[1:, 0] = lam[k]
        M -= gam[k] * q.N
        w = np.linalg.eigvalsh(M)
        mins[k] = min(w[0], gam[k])
        scales[k] = 1.0 + np.abs(w).max()
    return PointwiseReport(pts, mins, scales, tol)


# ---------------------------------------------------------------------------


@dataclass
class ModelCheck:
    ok: bool
    decrease: Polynomial
    solution: object
    report: object
    program: SOSProgram


def model_based_lyapunov_check(f_closed, V: Polynomial, beta: Polynomial,
                               settings: SolverSettings | None = None,
                               tol: float | None = None) -> ModelCheck:
    """SOS test of ``-grad V . f - beta`` for a known closed-loop vector field."""
    f_closed = list(np.asarray(f_closed, dtype=object).ravel())
    n = V.nvars
    if len(f_closed) != n:
        raise ValueError("vector field and V disagree on the state dimension")
    grad = V.gradient()
    dec = -sum((grad[i] * f_closed[i] for i in range(n)), Polynomial.zero(n)) - beta
    prog = SOSProgram(n)
    prog.add_sos(dec, name="decrease")
    prob = prog.compile()
    settings = settings or SolverSettings()
    if tol is not None:
        settings = replace(settings, feas_tol=tol)
    sol = solve(prob, settings)
    report = certify(prob, sol, tol=settings.feas_tol)
    return ModelCheck(sol.feasible and report.ok, dec, sol, report, prog)


def closed_loop_field(struct: SystemStructure, A, B, ctrl: RationalController):
    """``x -> A F(x) + B G(x) K(x)``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return lambda t, x: A @ struct.F_at(x) + B @ (struct.G_at(x) @ ctrl(x))
