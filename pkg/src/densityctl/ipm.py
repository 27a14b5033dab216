"""Primal-dual interior-point method for block SDPs in standard form.

    minimise   <C, X> + c_l^T x + c_u^T u
    subject to A(X) + A_l x + B u = b,   X_k >= 0 (PSD),  x >= 0,  u free

with HKM search directions and Mehrotra's predictor-corrector. The Schur
complement ``M_ij = <A_i, X A_j Z^-1>`` is assembled from the sparse entry
lists of each constraint, so memory grows with the number of equalities and
not with the square of the cone dimension.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.linalg import lapack

REG = 1e-14
REFINE_STEPS = 30


@dataclass
class BlockEntries:
    """Entries ``(row, r, c, val)`` of the constraint matrices on one PSD block.

    Both halves of an off-diagonal pair are stored, each with half the
    coefficient, so that ``<A_i, X> = sum val * X[r, c]``.
    """

    size: int
    rows: np.ndarray
    r: np.ndarray
    c: np.ndarray
    val: np.ndarray

    @classmethod
    def from_tri(cls, size, rows, r, c, val):
        rows, r, c, val = map(np.asarray, (rows, r, c, val))
        off = r != c
        return cls(
            size,
            np.concatenate([rows, rows[off]]),
            np.concatenate([r, c[off]]),
            np.concatenate([c, r[off]]),
            np.concatenate([np.where(off, val / 2, val), val[off] / 2]),
        )


@dataclass
class StandardForm:
    m: int
    blocks: list  # BlockEntries
    C: list  # dense symmetric or None (zero)
    A_l: np.ndarray  # (m, n_l)
    c_l: np.ndarray
    B: sparse.csr_matrix  # (m, n_u)
    c_u: np.ndarray
    b: np.ndarray


@dataclass
class IPMResult:
    X: list
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    Z: list
    z: np.ndarray
    status: str
    iterations: int
    pobj: float
    dobj: float
    pinf: float
    dinf: float
    solve_time: float


def _apply_A(sf: StandardForm, X, x, u) -> np.ndarray:
    out = sf.A_l @ x + sf.B @ u
    for blk, Xk in zip(sf.blocks, X):
        out += np.bincount(blk.rows, weights=blk.val * Xk[blk.r, blk.c], minlength=sf.m)
    return out


def _apply_At(blk: BlockEntries, lam) -> np.ndarray:
    out = np.zeros((blk.size, blk.size))
    np.add.at(out, (blk.r, blk.c), lam[blk.rows] * blk.val)
    return out


class _SchurBuilder:
    """Precomputed index structure for ``M_ij = <A_i, X A_j W>`` on one block."""

    def __init__(self, blk: BlockEntries, m: int):
        n = blk.size
        self.blk = blk
        order = np.argsort(blk.rows, kind="stable")
        self.rows_sorted = blk.rows[order]
        self.p = blk.r[order]
        self.q = blk.c[order]
        self.w = blk.val[order]
        self.uniq, self.starts = np.unique(self.rows_sorted, return_index=True)
        self.ends = np.append(self.starts[1:], self.rows_sorted.size)
        self.gather = sparse.csr_matrix(
            (blk.val, (blk.rows, blk.r * n + blk.c)), shape=(m, n * n)
        )

    def add_to(self, M: np.ndarray, X: np.ndarray, W: np.ndarray) -> None:
        Xp = X[:, self.p] * self.w  # n x nnz
        Wq = W[self.q, :]  # nnz x n
        g = self.gather
        cols = np.empty((M.shape[0], self.uniq.size))
        for k, (s, e) in enumerate(zip(self.starts, self.ends)):
            K = Xp[:, s:e] @ Wq[s:e, :]
            cols[:, k] = g @ K.ravel()
        M[:, self.uniq] += cols


def _ormqr(side, trans, qr, tau, C):
    lwork = int(lapack.dormqr(side, trans, qr, tau, C, -1)[1][0])
    out, _, info = lapack.dormqr(side, trans, qr, tau, C, max(lwork, 1))
    if info != 0:
        raise linalg.LinAlgError(f"dormqr failed with info={info}")
    return out


def _cholesky_shifted(S: np.ndarray):
    """Solver for ``S x = r`` by Cholesky of the Jacobi-scaled ``S``.

    The smallest diagonal shift that makes the factorisation succeed is used.
    """
    d = np.sqrt(np.maximum(np.diag(S), 1e-300))
    Ss = S / d[:, None] / d[None, :]
    for shift in (0.0,) + tuple(REG * 10.0 ** k for k in range(0, 8, 2)):
        try:
            L = linalg.cho_factor(Ss + shift * np.eye(S.shape[0]) if shift else Ss,
                                  lower=True, check_finite=False)
            break
        except linalg.LinAlgError:
            continue
    else:
        raise linalg.LinAlgError("Schur complement is not positive definite")
    return lambda r: linalg.cho_solve(L, r / d, check_finite=False) / d


class _FreeElimination:
    """Solve ``M dlam + B du = h``, ``B^T dlam = ru`` through a QR of ``B``.

    With ``B = Q [R; 0]`` the multiplier step is ``dlam = Q [R^-T ru; d]``,
    so ``B^T lam = c_u`` is enforced exactly instead of drifting with the
    conditioning of ``M``; ``d`` solves the projected positive definite
    system ``(Q^T M Q)_22 d = ...`` by Cholesky.
    """

    def __init__(self, B: np.ndarray):
        self.m, self.k = B.shape
        if self.k:
            (self.qr, self.tau), R = linalg.qr(B, mode="raw")
            self.R = np.triu(R[: self.k, : self.k])
            diag = np.abs(np.diag(self.R))
            if diag.min() <= 1e-12 * max(diag.max(), 1.0):
                raise ValueError("free variables are linearly dependent")

    def factor(self, M: np.ndarray):
        k = self.k
        if not k:
            S22 = M
        else:
            S = _ormqr("R", "N", self.qr, self.tau, _ormqr("L", "T", self.qr, self.tau, M))
            S = 0.5 * (S + S.T)
            S22 = S[k:, k:]
        chol = _cholesky_shifted(S22)

        def solve(h, ru):
            if not k:
                return chol(h), np.zeros(0)
            e = linalg.solve_triangular(self.R, ru, trans="T", lower=False)
            qh = _ormqr("L", "T", self.qr, self.tau, h.reshape(-1, 1)).ravel()
            d = chol(qh[k:] - S[k:, :k] @ e)
            du = linalg.solve_triangular(self.R, qh[:k] - S[:k, :k] @ e - S[:k, k:] @ d)
            dlam = _ormqr("L", "N", self.qr, self.tau, np.concatenate([e, d]).reshape(-1, 1))
            return dlam.ravel(), du

        return solve


def _max_step(X, dX) -> float:
    """Largest ``alpha`` (capped at 1e3) with ``X + alpha dX`` PSD, for ``X`` PD."""
    try:
        L = linalg.cholesky(X, lower=True)
    except linalg.LinAlgError:
        return 0.0
    T = linalg.solve_triangular(L, dX, lower=True)
    T = linalg.solve_triangular(L, T.T, lower=True)
    lmin = float(linalg.eigvalsh(0.5 * (T + T.T), subset_by_index=[0, 0])[0])
    return 1e3 if lmin >= 0 else min(1e3, -1.0 / lmin)


def _max_step_lp(x, dx) -> float:
    neg = dx < 0
    return min(1e3, float(np.min(-x[neg] / dx[neg]))) if np.any(neg) else 1e3


def solve_standard_form(sf: StandardForm, max_iters=200, time_limit=120.0, tol=1e-10,
                        stop=None, verbose=False) -> IPMResult:
    """Infeasible-start path following.

    ``stop(pobj, dobj, pinf, dinf, X, x, u)`` is consulted every iteration and
    may end the run early, for instance once the current point already
    certifies what the caller needs.
    """
    start = time.perf_counter()
    m = sf.m
    sizes = [blk.size for blk in sf.blocks]
    n_l, n_u = sf.A_l.shape[1], sf.B.shape[1]
    N = sum(sizes) + n_l
    builders = [_SchurBuilder(blk, m) for blk in sf.blocks]
    Cs = [np.zeros((s, s)) if C is None else C for C, s in zip(sf.C, sizes)]
    normC = max([np.abs(C).max() for C in Cs if C.size] + [np.abs(sf.c_l).max(initial=0),
                                                           np.abs(sf.c_u).max(initial=0)])
    norm_b = np.linalg.norm(sf.b)
    xi = max(10.0, np.sqrt(max(sizes + [1])), 1.0 + norm_b)
    eta = max(10.0, np.sqrt(max(sizes + [1])), 1.0 + normC)
    X = [xi * np.eye(s) for s in sizes]
    Z = [eta * np.eye(s) for s in sizes]
    x = np.full(n_l, xi)
    z = np.full(n_l, eta)
    u = np.zeros(n_u)
    lam = np.zeros(m)
    B = sf.B.toarray() if n_u else np.zeros((m, 0))
    free = _FreeElimination(B)
    status, it = "max_iterations", 0
    best = None

    def residuals():
        rp = sf.b - _apply_A(sf, X, x, u)
        Rd = [C - Zk - _apply_At(blk, lam) for C, Zk, blk in zip(Cs, Z, sf.blocks)]
        rd = sf.c_l - z - sf.A_l.T @ lam
        ru = sf.c_u - B.T @ lam
        pobj = sum(float(np.sum(C * Xk)) for C, Xk in zip(Cs, X)) + sf.c_l @ x + sf.c_u @ u
        dobj = float(sf.b @ lam)
        pinf = np.linalg.norm(rp) / (1 + norm_b)
        dinf = (np.sqrt(sum(np.sum(R * R) for R in Rd) + rd @ rd + ru @ ru)) / (1 + normC)
        return rp, Rd, rd, ru, float(pobj), dobj, float(pinf), float(dinf)

    for it in range(1, max_iters + 1):
        rp, Rd, rd, ru, pobj, dobj, pinf, dinf = residuals()
        mu = (sum(float(np.sum(Xk * Zk)) for Xk, Zk in zip(X, Z)) + x @ z) / N
        gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        merit = max(pinf, dinf, gap)
        if best is None or merit < best[0]:
            best = (merit, [Xk.copy() for Xk in X], x.copy(), u.copy(), lam.copy(),
                    [Zk.copy() for Zk in Z], z.copy(), pobj, dobj, pinf, dinf)
        if verbose:
            print(f"{it:3d} pobj {pobj:+.6e} dobj {dobj:+.6e} pinf {pinf:.1e} dinf {dinf:.1e} "
                  f"gap {gap:.1e} mu {mu:.1e}")
        if pinf < tol and dinf < tol and gap < tol:
            status = "optimal"
            break
        if stop is not None and stop(pobj, dobj, pinf, dinf, X, x, u):
            status = "stopped"
            break
        if time.perf_counter() - start > time_limit:
            status = "time_limit"
            break
        W = []
        for Zk in Z:
            try:
                Lz = linalg.cholesky(Zk, lower=True)
            except linalg.LinAlgError:
                status = "numerical_error"
                break
            Li = linalg.solve_triangular(Lz, np.eye(Zk.shape[0]), lower=True)
            W.append(Li.T @ Li)
        if status == "numerical_error":
            break
        M = np.zeros((m, m))
        for bld, Xk, Wk in zip(builders, X, W):
            bld.add_to(M, Xk, Wk)
        M = 0.5 * (M + M.T)
        if n_l:
            M += (sf.A_l * np.minimum(x / np.maximum(z, 1e-300), 1e300)) @ sf.A_l.T
        try:
            kkt_solve = free.factor(M)
        except (linalg.LinAlgError, ValueError):
            status = "numerical_error"
            break

        def direction(Rc, rc):
            h = rp.copy()
            for blk, Xk, Wk, R, Rdk in zip(sf.blocks, X, W, Rc, Rd):
                Y = (R - Xk @ Rdk) @ Wk
                h -= np.bincount(blk.rows, weights=blk.val * Y[blk.r, blk.c], minlength=m)
            if n_l:
                h -= sf.A_l @ ((rc - x * rd) / z)
            dlam, du = kkt_solve(h, ru)
            dlam, du = dlam.copy(), du.copy()
            zero = np.zeros_like(ru)
            prev = np.inf
            for rnd in range(REFINE_STEPS + 1):
                dZ = [Rdk - _apply_At(blk, dlam) for Rdk, blk in zip(Rd, sf.blocks)]
                dX = []
                for Xk, Wk, R, dZk in zip(X, W, Rc, dZ):
                    D = (R - Xk @ dZk) @ Wk
                    dX.append(0.5 * (D + D.T))
                dz = rd - sf.A_l.T @ dlam
                dx = (rc - x * dz) / z if n_l else np.zeros(0)
                # the Schur solve loses accuracy near the boundary; correct the
                # step against the primal equations it is meant to satisfy
                res = rp - _apply_A(sf, dX, dx, du)
                nres = float(np.linalg.norm(res))
                if rnd == REFINE_STEPS or nres <= 1e-14 * (1.0 + norm_b) or nres > 0.9 * prev:
                    break
                prev = nres
                ddl, ddu = kkt_solve(res, zero)
                dlam += ddl
                du += ddu
            if verbose:
                print(f"      refined {rnd} |res| {nres:.2e}")
            finite = [dlam, du, dx, dz] + dX + dZ
            if not all(np.all(np.isfinite(v)) for v in finite):
                raise FloatingPointError("non-finite search direction")
            return dX, dx, du, dlam, dZ, dz

        def steps(dX, dx, dZ, dz):
            ap = min([_max_step(Xk, d) for Xk, d in zip(X, dX)] + [_max_step_lp(x, dx)])
            ad = min([_max_step(Zk, d) for Zk, d in zip(Z, dZ)] + [_max_step_lp(z, dz)])
            return ap, ad

        Rc = [-(Xk @ Zk) for Xk, Zk in zip(X, Z)]
        rc = -x * z
        try:
            dX, dx, du, dlam, dZ, dz = direction(Rc, rc)
        except FloatingPointError:
            status = "numerical_error"
            break
        ap, ad = steps(dX, dx, dZ, dz)
        ap, ad = min(1.0, ap), min(1.0, ad)
        mu_aff = (sum(float(np.sum((Xk + ap * a) * (Zk + ad * b_)))
                      for Xk, a, Zk, b_ in zip(X, dX, Z, dZ))
                  + (x + ap * dx) @ (z + ad * dz)) / N
        sigma = min(1.0, max(0.0, mu_aff / mu) ** 3)
        Rc = [sigma * mu * np.eye(Xk.shape[0]) - Xk @ Zk - a @ b_
              for Xk, Zk, a, b_ in zip(X, Z, dX, dZ)]
        rc = sigma * mu - x * z - dx * dz
        try:
            dX, dx, du, dlam, dZ, dz = direction(Rc, rc)
        except FloatingPointError:
            status = "numerical_error"
            break
        ap, ad = steps(dX, dx, dZ, dz)
        tau = 0.9 + 0.09 * min(ap, ad, 1.0)
        ap, ad = min(1.0, tau * ap), min(1.0, tau * ad)
        X = [Xk + ap * d for Xk, d in zip(X, dX)]
        x = x + ap * dx
        u = u + ap * du
        lam = lam + ad * dlam
        Z = [Zk + ad * d for Zk, d in zip(Z, dZ)]
        z = z + ad * dz
        if verbose:
            print(f"    steps {ap:.3f} {ad:.3f} sigma {sigma:.2e}")
        if max(ap, ad) < 1e-10:
            status = "stalled"
            break

    if status in ("optimal", "stopped"):
        rp, Rd, rd, ru, pobj, dobj, pinf, dinf = residuals()
    else:
        # fall back to the best iterate seen
        _, X, x, u, lam, Z, z, pobj, dobj, pinf, dinf = best
    return IPMResult(X, x, u, lam, Z, z, status, it, pobj, dobj, pinf, dinf,
                     time.perf_counter() - start)
