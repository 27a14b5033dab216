"""Experiment data, prior knowledge and the data-consistent parameter set.

Parameters of ``xdot = A F(x) + B G(x) u + w`` are stacked as
``v = [vec(A^T); vec(B^T)]``: the rows of ``A`` (length ``f`` each) followed by
the rows of ``B`` (length ``g`` each). Entry ``(i, j)`` of ``[A B]`` (1-based)
therefore sits at 1-based position ``(i-1) f + j`` if ``j <= f`` and
``n f + (i-1) g + (j - f)`` otherwise.

Known entries are pinned; the unknown remainder ``z`` ranges over
``{z : [1; z]^T N [1; z] >= 0}`` for the matrix ``N`` built here.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg

from .polynomial import Polynomial, array_nvars, eval_array, poly_array

RANK_RTOL = 1e-9
MEMBERSHIP_TOL = 1e-9


class AssumptionViolation(ValueError):
    """The stacked data matrix lacks full row rank."""


class EmptyParameterSet(ValueError):
    """No parameter vector is consistent with the data and the noise bound."""


@dataclass(frozen=True)
class SystemStructure:
    """Known polynomial features ``F`` (length f) and input matrix ``G`` (g x m)."""

    F: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        F = poly_array(list(np.asarray(self.F, dtype=object).ravel()))
        G = np.asarray(self.G, dtype=object)
        if G.ndim == 1:
            G = G.reshape(-1, 1)
        G = poly_array(G.tolist())
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        nF, nG = array_nvars(F), array_nvars(G)
        if any(p.nvars != nF for p in F) or any(p.nvars != nG for p in G.flat) or nF != nG:
            raise ValueError("F and G must share the same variables")
        f0 = eval_array(F, np.zeros(nF))
        if np.max(np.abs(f0)) > 1e-12:
            raise ValueError(f"F(0) must vanish, got {f0}")

    @property
    def n(self) -> int:
        return self.F[0].nvars

    @property
    def f(self) -> int:
        return self.F.shape[0]

    @property
    def g(self) -> int:
        return self.G.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[1]

    @property
    def n_params(self) -> int:
        return self.n * (self.f + self.g)

    def F_at(self, x) -> np.ndarray:
        return eval_array(self.F, np.asarray(x, dtype=float))

    def G_at(self, x) -> np.ndarray:
        return eval_array(self.G, np.asarray(x, dtype=float)).reshape(self.g, self.m)

    def vector_field(self, A, B, controller=None):
        """Closed-loop (or open-loop if ``controller`` is None) right-hand side."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)

        def rhs(x, u=None):
            x = np.asarray(x, dtype=float)
            Fx = eval_array(self.F, x)
            Gx = eval_array(self.G, x)
            if u is None:
                u = np.zeros(self.m) if controller is None else np.atleast_1d(controller(x))
            return A @ Fx + B @ (Gx @ np.atleast_1d(u))

        return rhs

    def closed_loop_numerator(self, A, B, a: Polynomial, c) -> np.ndarray:
        """Polynomial vector ``a A F + B G c`` (the closed loop scaled by ``a``)."""
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        c = np.asarray(c, dtype=object).ravel()
        Gc = [sum((self.G[k, j] * c[j] for j in range(self.m)), Polynomial.zero(self.n))
              for k in range(self.g)]
        out = []
        for i in range(self.n):
            row = Polynomial.zero(self.n)
            for j in range(self.f):
                if A[i, j]:
                    row = row + a * self.F[j] * float(A[i, j])
            for k in range(self.g):
                if B[i, k]:
                    row = row + Gc[k] * float(B[i, k])
            out.append(row)
        return poly_array(out)


@dataclass(frozen=True)
class ExperimentData:
    """Samples at strictly increasing times; matrices are ``(dim, T)``."""

    times: np.ndarray
    X: np.ndarray
    Xdot: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Xd = np.atleast_2d(np.asarray(self.Xdot, dtype=float))
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        T = t.size
        if X.shape[1] != T or Xd.shape != X.shape or U.shape[1] != T:
            raise ValueError(
                f"inconsistent sample counts: times {T}, X {X.shape}, Xdot {Xd.shape}, U {U.shape}"
            )
        if T > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("sample times must be strictly increasing")
        for name, val in (("times", t), ("X", X), ("Xdot", Xd), ("U", U)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def T(self) -> int:
        return self.times.size

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    def to_csv(self, path, comment: str | None = None) -> None:
        """Write ``t, x_1..x_n, xdot_1..xdot_n, u_1..u_m`` with a header row.

        An optional ``comment`` goes first as a ``#`` line; readers skip it.
        """
        n, m = self.n, self.m
        header = (["t"] + [f"x_{i + 1}" for i in range(n)]
                  + [f"xdot_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)])
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.T):
                row = [self.times[k], *self.X[:, k], *self.Xdot[:, k], *self.U[:, k]]
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, n: int, m: int) -> "ExperimentData":
        with open(path, newline="") as fh:
            rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        if not rows:
            raise ValueError(f"{path}: empty experiment file")
        header, body = rows[0], [r for r in rows[1:] if r]
        if len(header) != 1 + 2 * n + m:
            raise ValueError(f"{path}: expected {1 + 2 * n + m} columns for n={n}, m={m}, "
                             f"got {len(header)}")
        try:
            arr = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(-1, len(header))
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None
        if arr.shape[0] == 0:
            raise ValueError(f"{path}: no samples")
        return cls(arr[:, 0], arr[:, 1:1 + n].T, arr[:, 1 + n:1 + 2 * n].T, arr[:, 1 + 2 * n:].T)


def assemble_data_matrices(struct: SystemStructure, data: ExperimentData):
    """Return ``(Xdot, Fdata, GUdata)`` with columns ``F(x_i)`` and ``G(x_i) u_i``."""
    if data.n != struct.n or data.m != struct.m:
        raise ValueError(
            f"data has n={data.n}, m={data.m}; structure expects n={struct.n}, m={struct.m}"
        )
    Fd = np.column_stack([eval_array(struct.F, data.X[:, i]) for i in range(data.T)])
    GU = np.column_stack(
        [eval_array(struct.G, data.X[:, i]) @ data.U[:, i] for i in range(data.T)]
    )
    return np.array(data.Xdot), Fd.reshape(struct.f, data.T), GU.reshape(struct.g, data.T)


def check_assumption1(Fdata, GUdata):
    """Full-row-rank test of ``[Fdata; GUdata]``; returns ``(ok, smallest singular value)``."""
    M = np.vstack([np.atleast_2d(Fdata), np.atleast_2d(GUdata)])
    rows = M.shape[0]
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size < rows or sv.size == 0:
        return False, 0.0
    smallest = float(sv[-1])
    return bool(sv[0] > 0 and smallest > RANK_RTOL * sv[0]), smallest


def pointwise_noise_bound(omega: float, T: int) -> float:
    """Energy bound ``omega^2 T`` for per-sample noise norms bounded by ``omega``."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    return float(omega) ** 2 * int(T)


@dataclass(frozen=True)
class NoiseModel:
    """Quadratic noise bound ``[1; vec(W^T)]^T Phi [1; vec(W^T)] >= 0``."""

    Phi: np.ndarray

    def __post_init__(self):
        Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        if Phi.shape[0] != Phi.shape[1] or not np.allclose(Phi, Phi.T, atol=1e-12):
            raise ValueError("Phi must be square and symmetric")
        P22 = Phi[1:, 1:]
        if P22.size and np.max(np.linalg.eigvalsh(P22)) >= 0:
            raise ValueError("the lower-right block of Phi must be negative definite")
        Phi.flags.writeable = False
        object.__setattr__(self, "Phi", Phi)

    @classmethod
    def energy(cls, phi11: float, n: int, T: int) -> "NoiseModel":
        if phi11 < 0:
            raise ValueError("Phi11 must be non-negative")
        Phi = -np.eye(1 + n * T)
        Phi[0, 0] = phi11
        return cls(Phi)

    @classmethod
    def pointwise(cls, omega: float, n: int, T: int) -> "NoiseModel":
        return cls.energy(pointwise_noise_bound(omega, T), n, T)

    @property
    def phi11(self) -> float:
        return float(self.Phi[0, 0])

    @property
    def is_energy_form(self) -> bool:
        """``Phi = diag(Phi11, -I)``, for which the data-consistent form is at most ``Phi11``."""
        k = self.Phi.shape[0] - 1
        return bool(np.all(self.Phi[0, 1:] == 0) and np.array_equal(self.Phi[1:, 1:], -np.eye(k)))

    def contains(self, W) -> bool:
        w = np.concatenate([[1.0], np.asarray(W, dtype=float).reshape(-1)])
        return bool(w @ self.Phi @ w >= -MEMBERSHIP_TOL)


def param_index(i: int, j: int, n: int, f: int, g: int) -> int:
    """1-based position in ``v`` of 1-based entry ``(i, j)`` of ``[A B]``."""
    if not (1 <= i <= n and 1 <= j <= f + g):
        raise IndexError(f"entry ({i}, {j}) outside a {n} x {f + g} parameter matrix")
    if j <= f:
        return (i - 1) * f + j
    return n * f + (i - 1) * g + (j - f)


def vectorize(A, B) -> np.ndarray:
    return np.concatenate([np.asarray(A, dtype=float).ravel(), np.asarray(B, dtype=float).ravel()])


def unvectorize(v, n: int, f: int, g: int):
    v = np.asarray(v, dtype=float)
    if v.size != n * (f + g):
        raise ValueError(f"expected {n * (f + g)} parameters, got {v.size}")
    return v[: n * f].reshape(n, f).copy(), v[n * f:].reshape(n, g).copy()


@dataclass(frozen=True)
class PriorKnowledge:
    """Known entries of ``[A B]``, keyed by 1-based ``v`` position."""

    n: int
    f: int
    g: int
    values: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        total = self.n * (self.f + self.g)
        clean = {}
        for k, val in dict(self.values).items():
            k = int(k)
            if not 1 <= k <= total:
                raise IndexError(f"parameter index {k} outside 1..{total}")
            clean[k] = float(val)
        object.__setattr__(self, "values", clean)

    @classmethod
    def none(cls, n, f, g) -> "PriorKnowledge":
        return cls(n, f, g, {})

    @classmethod
    def from_entries(cls, entries, n: int, f: int, g: int) -> "PriorKnowledge":
        """``entries`` is an iterable of ``(row, col, value)`` triples, 1-based."""
        vals = {}
        for row, col, value in entries:
            vals[param_index(int(row), int(col), n, f, g)] = float(value)
        return cls(n, f, g, vals)

    @property
    def pinned_indices(self) -> tuple:
        return tuple(sorted(self.values))

    @property
    def free_indices(self) -> tuple:
        pinned = set(self.values)
        return tuple(k for k in range(1, self.n * (self.f + self.g) + 1) if k not in pinned)

    @property
    def n_free(self) -> int:
        return self.n * (self.f + self.g) - len(self.values)

    @property
    def pinned_values(self) -> np.ndarray:
        return np.array([self.values[k] for k in self.pinned_indices], dtype=float)

    @property
    def s0(self) -> np.ndarray:
        return np.array(self.pinned_indices, dtype=int) - 1

    @property
    def sbar0(self) -> np.ndarray:
        return np.array(self.free_indices, dtype=int) - 1

    def assemble(self, z) -> np.ndarray:
        """Full ``v`` from the free part ``z`` and the pinned values."""
        v = np.zeros(self.n * (self.f + self.g))
        v[self.s0] = self.pinned_values
        v[self.sbar0] = np.asarray(z, dtype=float)
        return v

    def free_part(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float)[self.sbar0]

    def entries(self):
        """``(row, col, value)`` triples (1-based) for every pinned entry."""
        out = []
        for k, val in sorted(self.values.items()):
            if k <= self.n * self.f:
                i, j = divmod(k - 1, self.f)
                out.append((i + 1, j + 1, val))
            else:
                i, j = divmod(k - 1 - self.n * self.f, self.g)
                out.append((i + 1, self.f + j + 1, val))
        return out


class UncertaintyQuadric:
    """Symmetric ``N`` with ``N22 < 0`` and ``N | N22 >= 0``; caches its blocks.

    The set ``Z(N) = {z : [1; z]^T N [1; z] >= 0}`` is the ellipsoid
    ``center + (-N22)^(-1/2) s sqrt(schur)`` for ``||s|| <= 1``.
    """

    def __init__(self, N, schur_tol: float = 1e-9, schur_max: float | None = None):
        N = np.atleast_2d(np.asarray(N, dtype=float))
        if N.shape[0] != N.shape[1] or N.shape[0] < 2:
            raise ValueError("N must be square with size at least 2")
        if not np.allclose(N, N.T, atol=1e-12 * max(1.0, np.max(np.abs(N)))):
            raise ValueError("N must be symmetric")
        N = 0.5 * (N + N.T)
        self.N = N
        self.N11 = float(N[0, 0])
        self.N21 = N[1:, 0].copy()
        self.N22 = N[1:, 1:].copy()
        w, U = np.linalg.eigh(self.N22)
        scale = max(np.max(np.abs(w)), 1e-300)
        if np.max(w) >= -1e-10 * scale:
            raise AssumptionViolation(
                f"N22 is not negative definite (largest eigenvalue {np.max(w):.3e})"
            )
        self.inv_N22 = (U / w) @ U.T
        self.center = -self.inv_N22 @ self.N21
        schur = self.N11 - float(self.N21 @ self.inv_N22 @ self.N21)
        if schur < -schur_tol * max(1.0, abs(self.N11)):
            raise EmptyParameterSet(f"Schur complement N|N22 = {schur:.3e} < 0")
        schur = max(schur, 0.0)
        if schur_max is not None and schur > schur_max:
            # the data-consistent form never exceeds schur_max; the excess is round-off
            N = N.copy()
            N[0, 0] -= schur - schur_max
            self.N = N
            self.N11 = float(N[0, 0])
            schur = float(schur_max)
        self.schur = schur
        self.sqrt_schur = float(np.sqrt(self.schur))
        self.neg_N22_sqrt = (U * np.sqrt(-w)) @ U.T
        self.neg_N22_inv_sqrt = (U / np.sqrt(-w)) @ U.T
        for arr in (self.N, self.N21, self.N22, self.inv_N22, self.center,
                    self.neg_N22_sqrt, self.neg_N22_inv_sqrt):
            arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.N22.shape[0]

    def form(self, z) -> float | np.ndarray:
        """``[1; z]^T N [1; z]``; accepts one point or a ``(k, dim)`` batch."""
        z = np.asarray(z, dtype=float)
        zz = np.atleast_2d(z)
        vals = self.N11 + 2 * zz @ self.N21 + np.einsum("ki,ij,kj->k", zz, self.N22, zz)
        return float(vals[0]) if z.ndim == 1 else vals

    def contains(self, z, tol: float = MEMBERSHIP_TOL) -> bool:
        return bool(self.form(z) >= -tol)

    def radius_along(self, direction) -> float:
        """Distance from the center to the boundary along ``direction``."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        return float(np.sqrt(self.schur / -(d @ self.N22 @ d)))


def build_uncertainty_quadric(Xdot, Fdata, GUdata, noise: NoiseModel,
                              prior: PriorKnowledge) -> UncertaintyQuadric:
    """Quadric ``N`` describing every free-parameter vector consistent with the data."""
    Xdot = np.atleast_2d(np.asarray(Xdot, dtype=float))
    Fdata = np.atleast_2d(np.asarray(Fdata, dtype=float))
    GUdata = np.atleast_2d(np.asarray(GUdata, dtype=float))
    n, T = Xdot.shape
    if Fdata.shape[1] != T or GUdata.shape[1] != T:
        raise ValueError("data matrices must share the sample count")
    if (prior.n, prior.f, prior.g) != (n, Fdata.shape[0], GUdata.shape[0]):
        raise ValueError("prior knowledge dimensions do not match the data")
    if noise.Phi.shape[0] != 1 + n * T:
        raise ValueError(f"Phi must be {(1 + n * T)} x {(1 + n * T)}")
    if prior.n_free < 1:
        raise ValueError("every parameter is pinned; nothing is uncertain")
    ok, smin = check_assumption1(Fdata, GUdata)
    if not ok:
        raise AssumptionViolation(
            f"[F; GU] does not have full row rank (smallest singular value {smin:.3e})"
        )
    I = np.eye(n)
    D = np.vstack([np.kron(I, Fdata), np.kron(I, GUdata)])
    xv = Xdot.reshape(-1)  # vec(Xdot^T): rows of Xdot stacked
    s0, sb0 = prior.s0, prior.sbar0
    offset = xv - (D[s0].T @ prior.pinned_values if s0.size else 0.0)
    M = np.zeros((1 + n * T, 1 + sb0.size))
    M[0, 0] = 1.0
    M[1:, 0] = offset
    M[1:, 1:] = -D[sb0].T
    N = M.T @ noise.Phi @ M
    return UncertaintyQuadric(N, schur_max=noise.phi11 if noise.is_energy_form else None)


def membership_sigma(q: UncertaintyQuadric, z, tol: float = MEMBERSHIP_TOL) -> bool:
    return q.contains(z, tol)
