"""Solve compiled SOS feasibility problems and re-check the answers.

Feasibility is posed as: minimise a margin ``t`` subject to
``S_k(y) + t I >= 0`` for every block, ``A_eq y = b_eq`` and ``t >= -floor``.
An optimum with ``t <= feas_tol`` means feasible; a clearly positive optimum
certifies infeasibility. Two backends exist: Clarabel, and the interior-point
method in :mod:`densityctl.ipm`. Clarabel handles degenerate problems better
but stores a dense scaling block per PSD cone, so ``"auto"`` switches to the
interior-point method once that storage would be large.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import clarabel
import numpy as np
from scipy import sparse

from . import ipm
from .sos import SDPProblem, SDPSolution

log = logging.getLogger(__name__)

FEAS_TOL = 1e-8
MAX_ITERS = 200
TIME_LIMIT = 120.0
MARGIN_FLOOR = 1e-3
TRACE_BOUND = 1e3
CLARABEL_MEMORY = 4e8  # bytes of dense cone scaling tolerated by "auto"


@dataclass
class SolverSettings:
    feas_tol: float = FEAS_TOL
    max_iters: int = MAX_ITERS
    time_limit: float = TIME_LIMIT
    margin_floor: float = MARGIN_FLOOR
    polish: bool = True
    verbose: bool = False
    backend: str = "auto"
    trace_bound: float = TRACE_BOUND


def _svec_scale(size: int) -> np.ndarray:
    rows, cols = np.tril_indices(size)
    return np.where(rows == cols, 1.0, np.sqrt(2.0))


def _identity_tri(size: int) -> np.ndarray:
    rows, cols = np.tril_indices(size)
    return (rows == cols).astype(float)


def _polish(prob: SDPProblem, y: np.ndarray) -> np.ndarray:
    """Remove equality residuals by moving Gram entries only.

    Every Gram entry appears in exactly one coefficient-matching row, so the
    least-norm correction restricted to Gram columns is row-separable.
    """
    gram_cols = np.zeros(prob.n_vars, dtype=bool)
    for blk in prob.blocks:
        gram_cols[blk.coef.indices] = True
    A = prob.A_eq.tocsr()
    resid = A @ y - prob.b_eq
    Ag = A[:, gram_cols]
    col_count = np.asarray((Ag != 0).sum(axis=0)).ravel()
    if np.any(col_count > 1):
        return y
    norms = np.asarray(Ag.multiply(Ag).sum(axis=1)).ravel()
    scale = np.divide(resid, norms, out=np.zeros_like(resid), where=norms > 0)
    y = y.copy()
    y[gram_cols] -= Ag.T @ scale
    return y


def evaluate(prob: SDPProblem, y) -> tuple[list, float, np.ndarray]:
    """Block minimum eigenvalues, max equality residual and residual vector."""
    y = np.asarray(y, dtype=float)
    eigs = [float(np.linalg.eigvalsh(blk.matrix(y))[0]) for blk in prob.blocks]
    resid = prob.A_eq @ y - prob.b_eq if prob.n_equalities else np.zeros(0)
    worst = float(np.max(np.abs(resid))) if resid.size else 0.0
    return eigs, worst, resid


def _solve_clarabel(prob: SDPProblem, settings: SolverSettings):
    n = prob.n_vars
    it = n  # index of the margin variable
    A_parts, b_parts, cones = [], [], []
    if prob.n_equalities:
        A_parts.append(sparse.hstack([prob.A_eq, sparse.csr_matrix((prob.n_equalities, 1))]))
        b_parts.append(prob.b_eq)
        cones.append(clarabel.ZeroConeT(prob.n_equalities))
    A_parts.append(sparse.csr_matrix(([-1.0], ([0], [it])), shape=(1, n + 1)))
    b_parts.append(np.array([settings.margin_floor]))
    cones.append(clarabel.NonnegativeConeT(1))
    for blk in prob.blocks:
        sc = _svec_scale(blk.size)
        ident = _identity_tri(blk.size)
        Ablk = sparse.hstack([blk.coef, sparse.csr_matrix(ident.reshape(-1, 1))])
        A_parts.append(-sparse.diags(sc) @ Ablk)
        b_parts.append(sc * blk.const)
        cones.append(clarabel.PSDTriangleConeT(blk.size))
    A = sparse.vstack(A_parts).tocsc()
    b = np.concatenate(b_parts)
    P = sparse.csc_matrix((n + 1, n + 1))
    q = np.zeros(n + 1)
    q[it] = 1.0
    opts = clarabel.DefaultSettings()
    opts.verbose = settings.verbose
    opts.max_iter = settings.max_iters
    opts.time_limit = settings.time_limit
    opts.tol_feas = 1e-10
    opts.tol_gap_abs = 1e-10
    opts.tol_gap_rel = 1e-10
    opts.presolve_enable = False
    res = clarabel.DefaultSolver(P, q, A, b, cones, opts).solve()
    status = str(res.status)
    x = np.asarray(res.x, dtype=float)
    y = x[:n] if x.size == n + 1 else np.zeros(n)
    margin = float(x[it]) if x.size == n + 1 else np.inf
    if "Infeasible" in status and "Almost" not in status:
        kind = "infeasible"
    elif status in ("Solved", "AlmostSolved"):
        kind = "solved"
    elif status in ("MaxIterations", "MaxTime"):
        kind = "limit"
    else:
        kind = "error"
    return y, margin, kind, {"solver_status": status, "iterations": int(res.iterations)}


class _Reduction:
    """Map an :class:`SDPProblem` with a margin onto :class:`ipm.StandardForm`.

    A block whose map selects distinct, otherwise unused variables becomes a
    PSD variable ``X = S(y) + t I`` directly; any other block is lifted with
    explicit equalities. The margin ``t`` is the last free variable and the
    objective. A row ``sum_k tr(X_k - t I) + w = R`` with ``w >= 0`` bounds
    the Gram matrices, which keeps the optimal set bounded and the dual
    strictly feasible.
    """

    def __init__(self, prob: SDPProblem):
        self.prob = prob
        n = prob.n_vars
        self.owner = {}  # var -> (block, r, c)
        sel_blocks, gen_blocks = [], []
        for k, blk in enumerate(prob.blocks):
            coef = blk.coef.tocsr()
            T = blk.size * (blk.size + 1) // 2
            cols = coef.indices
            is_sel = (np.all(blk.const == 0) and coef.nnz == T and np.all(np.diff(coef.indptr) == 1)
                      and np.all(coef.data == 1.0) and len(set(cols.tolist())) == T
                      and not any(int(j) in self.owner for j in cols))
            if is_sel:
                r, c = np.tril_indices(blk.size)
                for e, j in enumerate(cols):
                    self.owner[int(j)] = (k, int(r[e]), int(c[e]))
                sel_blocks.append(k)
            else:
                gen_blocks.append(k)
        self.free = [j for j in range(n) if j not in self.owner]
        self.free_pos = {j: i for i, j in enumerate(self.free)}
        self.t_pos = len(self.free)
        self.block_order = {k: i for i, k in enumerate(sel_blocks + gen_blocks)}
        self.sizes = [prob.blocks[k].size for k in sel_blocks + gen_blocks]
        rows = []  # per row: (entries {block: [(r, c, a)]}, {free: a}, rhs)
        A = prob.A_eq.tocsr() if prob.n_equalities else sparse.csr_matrix((0, n))
        for i in range(A.shape[0]):
            row = ({}, {}, float(prob.b_eq[i]))
            for j, a in zip(A.indices[A.indptr[i]:A.indptr[i + 1]], A.data[A.indptr[i]:A.indptr[i + 1]]):
                self._add_var(row, int(j), float(a))
            rows.append(row)
        for k in gen_blocks:
            blk = prob.blocks[k]
            coef = blk.coef.tocsr()
            r_idx, c_idx = np.tril_indices(blk.size)
            kb = self.block_order[k]
            for e in range(coef.shape[0]):
                r, c = int(r_idx[e]), int(c_idx[e])
                row = ({kb: [(r, c, 1.0)]}, {}, float(blk.const[e]))
                if r == c:
                    row[1][self.t_pos] = -1.0
                for j, a in zip(coef.indices[coef.indptr[e]:coef.indptr[e + 1]],
                                coef.data[coef.indptr[e]:coef.indptr[e + 1]]):
                    self._add_var(row, int(j), -float(a))
                rows.append(row)
        self.rows = rows

    def _add_var(self, row, j, a):
        if j in self.owner:
            k, r, c = self.owner[j]
            row[0].setdefault(self.block_order[k], []).append((r, c, a))
            if r == c:  # y = X_rr - t
                row[1][self.t_pos] = row[1].get(self.t_pos, 0.0) - a
        else:
            u = self.free_pos[j]
            row[1][u] = row[1].get(u, 0.0) + a

    def standard_form(self, trace_bound: float):
        """Scaled standard form, or a reason string if a row is inconsistent.

        Rows are divided by their largest Gram coefficient and each free
        variable is rescaled so its column peaks at one. Normalising rows by
        free-variable coefficients instead would shrink the Gram part of a
        row by orders of magnitude and hide its true residual.
        """
        keep, scales = [], []
        for i, (ent, uc, rhs) in enumerate(self.rows):
            gram = [abs(a) for lst in ent.values() for *_, a in lst]
            s = max(gram, default=0.0) or max((abs(v) for v in uc.values()), default=0.0)
            if s == 0:
                if abs(rhs) > 1e-12:
                    return None, f"equality {i} reads 0 == {rhs:g}"
                continue
            keep.append(i)
            scales.append(s)
        col = np.zeros(len(self.free) + 1)
        for i, s in zip(keep, scales):
            for uidx, a in self.rows[i][1].items():
                col[uidx] = max(col[uidx], abs(a) / s)
        col[col == 0] = 1.0
        col[self.t_pos] = 1.0
        self.col_scale = col
        m = len(keep) + 1
        per_block = [([], [], [], []) for _ in self.sizes]
        Bt = ([], [], [])
        b = np.zeros(m)
        for new, (i, s) in enumerate(zip(keep, scales)):
            ent, uc, rhs = self.rows[i]
            for kb, lst in ent.items():
                acc = {}
                for r, c, a in lst:
                    acc[(r, c)] = acc.get((r, c), 0.0) + a
                for (r, c), a in acc.items():
                    if a:
                        tgt = per_block[kb]
                        tgt[0].append(new)
                        tgt[1].append(r)
                        tgt[2].append(c)
                        tgt[3].append(a / s)
            for uidx, a in uc.items():
                if a:
                    Bt[0].append(new)
                    Bt[1].append(uidx)
                    Bt[2].append(a / s / col[uidx])
            b[new] = rhs / s
        for kb, size in enumerate(self.sizes):
            per_block[kb][0].extend([m - 1] * size)
            per_block[kb][1].extend(range(size))
            per_block[kb][2].extend(range(size))
            per_block[kb][3].extend([1.0] * size)
        Bt[0].append(m - 1)
        Bt[1].append(self.t_pos)
        Bt[2].append(-float(sum(self.sizes)))
        b[m - 1] = trace_bound
        A_l = np.zeros((m, 1))
        A_l[m - 1, 0] = 1.0
        blocks = [ipm.BlockEntries.from_tri(size, np.array(t[0], dtype=int), np.array(t[1], dtype=int),
                                            np.array(t[2], dtype=int), np.array(t[3], dtype=float))
                  for size, t in zip(self.sizes, per_block)]
        n_u = len(self.free) + 1
        B = sparse.csr_matrix((Bt[2], (Bt[0], Bt[1])), shape=(m, n_u))
        c_u = np.zeros(n_u)
        c_u[self.t_pos] = 1.0
        return ipm.StandardForm(m, blocks, [None] * len(blocks), A_l, np.zeros(1), B, c_u, b), None

    def recover(self, res: "ipm.IPMResult"):
        t = float(res.u[self.t_pos])
        y = np.zeros(self.prob.n_vars)
        for j, (k, r, c) in self.owner.items():
            y[j] = res.X[self.block_order[k]][r, c] - (t if r == c else 0.0)
        for j, u in self.free_pos.items():
            y[j] = res.u[u] / self.col_scale[u]
        return y, t


def _solve_ipm(prob: SDPProblem, settings: SolverSettings):
    red = _Reduction(prob)
    tol = settings.feas_tol
    best = {"score": -np.inf, "y": None, "t": None}

    def candidate(X, x, u):
        y, t = red.recover(ipm.IPMResult(X, x, u, None, None, None, "", 0, 0, 0, 0, 0, 0))
        if settings.polish and prob.n_equalities:
            y = _polish(prob, y)
        eigs, worst, _ = evaluate(prob, y)
        score = min(min(eigs, default=0.0), -worst)
        if score > best["score"]:
            best.update(score=score, y=y, t=t)
        return score >= -tol

    def stop(pobj, dobj, pinf, dinf, X, x, u):
        if dinf < 1e-11 and dobj > 10 * tol:
            return True  # margin provably positive
        # on degenerate problems the iterates pass closest to feasibility
        # before round-off builds up, so every reasonable iterate is checked
        return pinf < 1e-6 and candidate(X, x, u)

    bound = settings.trace_bound
    deadline = time.perf_counter() + settings.time_limit
    attempts = []
    while True:
        sf, reason = red.standard_form(bound)
        if sf is None:
            return np.zeros(prob.n_vars), np.inf, "infeasible", {
                "solver_status": "inconsistent", "reason": reason, "iterations": 0}
        res = ipm.solve_standard_form(sf, settings.max_iters, max(1.0, deadline - time.perf_counter()),
                                      stop=stop, verbose=settings.verbose)
        y, t = red.recover(res)
        active = bool(res.x[0] < 1e-6 * bound)
        attempts.append((bound, res.status, res.iterations, t))
        if best["score"] < -tol and t > 10 * tol and active \
                and bound < 1e6 * settings.trace_bound and time.perf_counter() < deadline:
            bound *= 100.0  # the margin may only be positive because the bound bites
            continue
        break
    info = {"solver_status": res.status, "iterations": sum(a[2] for a in attempts),
            "primal_infeasibility": res.pinf, "dual_infeasibility": res.dinf,
            "dual_bound": res.dobj, "trace_bound": bound, "trace_bound_active": active,
            "attempts": attempts}
    if best["y"] is not None and best["score"] >= -tol:
        info["accepted_iterate"] = True
        return best["y"], best["t"], "solved", info
    if res.dinf < 1e-9 and res.dobj > 10 * tol and not active:
        t = res.dobj  # certified lower bound on the margin
    if res.status in ("optimal", "stopped"):
        kind = "solved"
    elif res.status in ("max_iterations", "time_limit"):
        kind = "limit"
    else:
        kind = "solved" if max(res.pinf, res.dinf) < 1e-7 else "error"
    if best["y"] is not None and kind != "solved":
        y, t = best["y"], best["t"]  # closest approach, reported as such by the caller
    return y, t, kind, info


def clarabel_memory(prob: SDPProblem) -> float:
    """Rough bytes Clarabel needs for its dense PSD-cone scaling blocks."""
    return sum(8.0 * (s * (s + 1) / 2) ** 2 for s in prob.block_sizes)


def choose_backend(prob: SDPProblem) -> str:
    return "clarabel" if clarabel_memory(prob) <= CLARABEL_MEMORY else "ipm"


BACKENDS = {"ipm": _solve_ipm, "clarabel": _solve_clarabel}


def solve(prob: SDPProblem, settings: SolverSettings | None = None, **overrides) -> SDPSolution:
    settings = replace(settings or SolverSettings(), **overrides)
    n = prob.n_vars
    if prob.infeasible_reasons:
        return SDPSolution("infeasible", np.zeros(n), np.inf, [], np.inf,
                           {"reason": list(prob.infeasible_reasons)})
    backend = choose_backend(prob) if settings.backend == "auto" else settings.backend
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {settings.backend!r}")
    start = time.perf_counter()
    y, margin, kind, info = BACKENDS[backend](prob, settings)
    elapsed = time.perf_counter() - start
    info.update({"backend": backend, "solve_time": elapsed, "n_vars": n,
                 "n_equalities": prob.n_equalities, "block_sizes": prob.block_sizes})
    if kind == "infeasible":
        eigs, worst, _ = evaluate(prob, y)
        return SDPSolution("infeasible", y, np.inf, eigs, worst, info)
    if not np.all(np.isfinite(y)):
        return SDPSolution("failed", y, margin, [], np.inf, info)
    if settings.polish and prob.n_equalities:
        y = _polish(prob, y)
    eigs, worst, _ = evaluate(prob, y)
    min_eig = min(eigs) if eigs else 0.0
    info["min_eig"] = min_eig
    ok = min_eig >= -settings.feas_tol and worst <= settings.feas_tol
    if ok:
        result = "feasible"
    elif margin > 10 * settings.feas_tol and kind == "solved":
        result = "infeasible"
    elif kind == "limit":
        result = "failed"
    else:
        result = "inaccurate"
    log.debug("sdp %s: margin %.3e, min eig %.3e, eq residual %.3e, %s in %.2fs",
              result, margin, min_eig, worst, info.get("solver_status"), elapsed)
    return SDPSolution(result, y, margin, eigs, worst, info)


@dataclass
class CertifyReport:
    ok: bool
    tol: float
    worst_block: int | None
    worst_block_label: str
    worst_min_eig: float
    worst_eq_row: int | None
    worst_eq_label: str
    worst_eq_residual: float
    block_min_eigs: list = field(default_factory=list)

    def summary(self) -> str:
        return (f"{'PASS' if self.ok else 'FAIL'}: worst block {self.worst_block_label!r} "
                f"min eig {self.worst_min_eig:.3e}; worst equality {self.worst_eq_label!r} "
                f"residual {self.worst_eq_residual:.3e} (tol {self.tol:.1e})")


def certify(prob: SDPProblem, sol: SDPSolution, tol: float = 10 * FEAS_TOL) -> CertifyReport:
    """Recompute block eigenvalues and equality residuals from the raw solution."""
    eigs, worst, resid = evaluate(prob, sol.y)
    wb = int(np.argmin(eigs)) if eigs else None
    we = int(np.argmax(np.abs(resid))) if resid.size else None
    min_eig = eigs[wb] if wb is not None else 0.0
    ok = bool(np.all(np.isfinite(sol.y))) and min_eig >= -tol and worst <= tol
    return CertifyReport(
        ok, tol, wb, prob.blocks[wb].label if wb is not None else "",
        min_eig, we, prob.eq_labels[we] if we is not None and prob.eq_labels else "",
        worst, eigs,
    )
