"""Compile (matrix) sum-of-squares constraints into a semidefinite program.

Unknown polynomial coefficients live in a :class:`DecisionVars` registry and
enter polynomials affinely through :class:`AffinePoly`. A constraint
``P(x) in SOS^q[x]`` becomes a Gram block ``G >= 0`` together with
coefficient-matching equalities ``P(x) == M(x)^T G M(x)``, where
``M = blockdiag(m_1, ..., m_q)`` stacks one monomial basis per diagonal entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, sparse

from .polynomial import Polynomial, grlex_key, monomials

CONST = -1
COEF_TOL = 1e-14
CHOP_RTOL = 1e-10


class BasisCoverageError(ValueError):
    """A fixed nonzero coefficient cannot be produced by the chosen basis."""


class DecisionVars:
    """Registry of named groups of scalar decision variables."""

    def __init__(self):
        self.groups: dict[str, range] = {}
        self.size = 0

    def add(self, name: str, count: int) -> range:
        if name in self.groups:
            raise ValueError(f"decision variable group {name!r} already registered")
        if count < 0:
            raise ValueError("count must be non-negative")
        r = range(self.size, self.size + count)
        self.groups[name] = r
        self.size += count
        return r

    def __contains__(self, name):
        return name in self.groups

    def __getitem__(self, name) -> range:
        return self.groups[name]


class AffinePoly:
    """Polynomial whose coefficients are affine in decision variables.

    Each monomial maps to ``{var_index: coef}``; key ``CONST`` holds the
    constant part of the coefficient.
    """

    __slots__ = ("nvars", "_terms")

    def __init__(self, nvars: int, terms: dict | None = None):
        self.nvars = nvars
        self._terms = {}
        for mono, expr in (terms or {}).items():
            clean = {k: float(v) for k, v in expr.items() if abs(v) > COEF_TOL}
            if clean:
                self._terms[tuple(mono)] = clean

    @classmethod
    def from_polynomial(cls, p: Polynomial) -> "AffinePoly":
        return cls(p.nvars, {m: {CONST: c} for m, c in p.items()})

    @classmethod
    def zero(cls, nvars: int) -> "AffinePoly":
        return cls(nvars)

    @classmethod
    def _raw(cls, nvars, terms):
        out = cls.__new__(cls)
        out.nvars = nvars
        out._terms = terms
        return out

    # queries -----------------------------------------------------------------
    def items(self):
        return self._terms.items()

    def support(self) -> list:
        return sorted(self._terms, key=grlex_key)

    def coefficient(self, mono) -> dict:
        return dict(self._terms.get(tuple(mono), {}))

    def variables(self) -> set:
        out = set()
        for expr in self._terms.values():
            out.update(k for k in expr if k != CONST)
        return out

    def is_fixed(self) -> bool:
        return not self.variables()

    def is_zero(self) -> bool:
        return not self._terms

    def degree(self) -> float:
        return max((sum(m) for m in self._terms), default=-math.inf)

    def min_degree(self) -> float:
        return min((sum(m) for m in self._terms), default=math.inf)

    def value(self, y) -> Polynomial:
        y = np.asarray(y, dtype=float)
        out = {}
        for mono, expr in self._terms.items():
            c = 0.0
            for k, v in expr.items():
                c += v if k == CONST else v * y[k]
            out[mono] = c
        return Polynomial(self.nvars, out)

    def constant_part(self) -> Polynomial:
        return Polynomial(self.nvars, {m: e.get(CONST, 0.0) for m, e in self._terms.items()})

    # arithmetic ------------------------------------------------------------------
    @staticmethod
    def _lift(other, nvars):
        if isinstance(other, AffinePoly):
            return other
        if isinstance(other, Polynomial):
            return AffinePoly.from_polynomial(other)
        if isinstance(other, (int, float, np.integer, np.floating)):
            return AffinePoly(nvars, {(0,) * nvars: {CONST: float(other)}})
        return None

    def __add__(self, other):
        other = self._lift(other, self.nvars)
        if other is None:
            return NotImplemented
        out = {m: dict(e) for m, e in self._terms.items()}
        for m, e in other._terms.items():
            tgt = out.setdefault(m, {})
            for k, v in e.items():
                tgt[k] = tgt.get(k, 0.0) + v
        return AffinePoly._raw(self.nvars, _prune(out))

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        other = self._lift(other, self.nvars)
        if other is None:
            return NotImplemented
        return self + other.scale(-1.0)

    def __rsub__(self, other):
        other = self._lift(other, self.nvars)
        if other is None:
            return NotImplemented
        return other + self.scale(-1.0)

    def scale(self, k: float) -> "AffinePoly":
        k = float(k)
        if k == 0.0:
            return AffinePoly(self.nvars)
        return AffinePoly._raw(
            self.nvars, {m: {v: k * c for v, c in e.items()} for m, e in self._terms.items()}
        )

    def __mul__(self, other):
        if isinstance(other, (int, float, np.integer, np.floating)):
            return self.scale(other)
        if isinstance(other, AffinePoly):
            if other.is_fixed():
                other = other.constant_part()
            elif self.is_fixed():
                return other * self.constant_part()
            else:
                raise TypeError("product of two decision-dependent templates is not affine")
        if not isinstance(other, Polynomial):
            return NotImplemented
        out: dict = {}
        for m1, e in self._terms.items():
            for m2, c in other.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                tgt = out.setdefault(m, {})
                for k, v in e.items():
                    tgt[k] = tgt.get(k, 0.0) + v * c
        return AffinePoly._raw(self.nvars, _prune(out))

    __rmul__ = __mul__

    def partial(self, i: int) -> "AffinePoly":
        out: dict = {}
        for m, e in self._terms.items():
            p = m[i]
            if p:
                nm = m[:i] + (p - 1,) + m[i + 1:]
                tgt = out.setdefault(nm, {})
                for k, v in e.items():
                    tgt[k] = tgt.get(k, 0.0) + v * p
        return AffinePoly._raw(self.nvars, _prune(out))

    def __repr__(self):
        return f"AffinePoly(nvars={self.nvars}, terms={len(self._terms)}, vars={len(self.variables())})"


def _prune(terms: dict) -> dict:
    out = {}
    for m, e in terms.items():
        clean = {k: v for k, v in e.items() if abs(v) > COEF_TOL}
        if clean:
            out[m] = clean
    return out


def chop(P: np.ndarray, rtol: float = CHOP_RTOL) -> np.ndarray:
    """Drop coefficients below ``rtol`` times the largest one in the same entry.

    Removes round-off residue (e.g. from a least-squares center) that no
    finite monomial basis could match exactly.
    """
    out = np.empty(P.shape, dtype=object)
    for idx in np.ndindex(P.shape):
        e = P[idx]
        scale = max((abs(v) for _, d in e.items() for v in d.values()), default=0.0)
        thresh = rtol * scale
        terms = {}
        for mono, d in e.items():
            kept = {k: v for k, v in d.items() if abs(v) > thresh}
            if kept:
                terms[mono] = kept
        out[idx] = AffinePoly._raw(e.nvars, terms)
    return out


def lift(p, nvars: int) -> AffinePoly:
    """Coerce a number, Polynomial or AffinePoly into an AffinePoly."""
    out = AffinePoly._lift(p, nvars)
    if out is None:
        raise TypeError(f"cannot use {type(p).__name__} as a polynomial template")
    return out


def template_array(entries, nvars: int) -> np.ndarray:
    arr = np.asarray(entries, dtype=object)
    out = np.empty(arr.shape, dtype=object)
    for idx in np.ndindex(arr.shape):
        out[idx] = lift(arr[idx], nvars)
    return out


# ---------------------------------------------------------------------------
# monomial bases


def monomial_basis(nvars: int, max_degree: int, drop_constant: bool = False) -> list:
    """Every monomial of total degree ``<= max_degree``, graded-lex order."""
    if max_degree < 0:
        return []
    return monomials(nvars, max_degree, 1 if drop_constant else 0)


def newton_box_basis(support: Sequence[tuple], nvars: int) -> list:
    """Half-degree basis restricted to half the Newton polytope of the support.

    Any SOS decomposition of a polynomial with this support only uses
    monomials ``m`` with ``2m`` in the convex hull of the support, so the
    restriction loses nothing. The bounding box pre-filters candidates.
    """
    support = list(support)
    if not support:
        return []
    degs = [sum(m) for m in support]
    lo_d, hi_d = math.ceil(min(degs) / 2), max(degs) // 2
    if lo_d > hi_d:
        return []
    arr = np.array(support)
    lo = np.ceil(arr.min(axis=0) / 2).astype(int)
    hi = (arr.max(axis=0) // 2).astype(int)
    basis = [m for m in monomials(nvars, hi_d, lo_d)
             if all(lo[k] <= m[k] <= hi[k] for k in range(nvars))]
    basis = [m for m in basis if _in_hull(2 * np.array(m), arr)]
    return prune_unreachable(basis, support)


def _in_hull(point: np.ndarray, pts: np.ndarray) -> bool:
    """Is ``point`` a convex combination of the rows of ``pts``?"""
    k = pts.shape[0]
    A_eq = np.vstack([pts.T, np.ones((1, k))]).astype(float)
    b_eq = np.append(point, 1.0).astype(float)
    res = optimize.linprog(np.zeros(k), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return res.status == 0


def prune_unreachable(basis: Sequence[tuple], support: Sequence[tuple]) -> list:
    """Drop monomials ``m`` whose square ``2m`` is absent from the support and
    is not a sum of two other basis monomials.

    For such ``m`` the Gram diagonal entry is forced to zero, and with it the
    whole row of a PSD Gram matrix. Repeats until nothing changes.
    """
    support = set(map(tuple, support))
    basis = [tuple(m) for m in basis]
    while True:
        present = set(basis)
        keep = []
        for m in basis:
            sq = tuple(2 * k for k in m)
            if sq in support or any(
                o != m and tuple(s - k for s, k in zip(sq, o)) in present for o in basis
            ):
                keep.append(m)
        if len(keep) == len(basis):
            return keep
        basis = keep


# ---------------------------------------------------------------------------
# SDP container


@dataclass
class PSDBlock:
    """Affine map ``y -> S(y)`` into symmetric ``size x size`` matrices.

    Lower-triangle entries are stored row-major (``(r, c)`` with ``r >= c`` at
    ``r (r + 1) / 2 + c``): ``tri(S) = const + coef @ y``.
    """

    size: int
    const: np.ndarray
    coef: sparse.csr_matrix
    label: str = ""

    def matrix(self, y) -> np.ndarray:
        tri = self.const + self.coef @ np.asarray(y, dtype=float)
        return tri_to_sym(tri, self.size)


def tri_index(r: int, c: int) -> int:
    if r < c:
        r, c = c, r
    return r * (r + 1) // 2 + c


def tri_to_sym(tri, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    rows, cols = np.tril_indices(size)
    # np.tril_indices enumerates row-major lower triangle, matching tri_index.
    out[rows, cols] = tri
    out[cols, rows] = tri
    return out


@dataclass
class SDPProblem:
    """Feasibility problem: find ``y`` with every block PSD and ``A_eq y = b_eq``."""

    n_vars: int
    blocks: list
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    eq_labels: list = field(default_factory=list)
    infeasible_reasons: list = field(default_factory=list)

    @property
    def block_sizes(self) -> list:
        return [b.size for b in self.blocks]

    @property
    def n_equalities(self) -> int:
        return self.A_eq.shape[0]

    def dump(self, fh) -> None:
        """Plain-text sparse dump: sizes, then ``block i j var coeff`` tuples.

        ``var`` is ``-1`` for the constant part. Equalities follow as
        ``eq row var coeff`` lines and ``rhs row value`` lines.
        """
        fh.write(f"vars {self.n_vars}\n")
        fh.write("blocks " + " ".join(str(s) for s in self.block_sizes) + "\n")
        for k, blk in enumerate(self.blocks):
            rows, cols = np.tril_indices(blk.size)
            for t in np.flatnonzero(blk.const):
                fh.write(f"{k} {rows[t]} {cols[t]} -1 {blk.const[t]:.17g}\n")
            coo = blk.coef.tocoo()
            for t, v, val in zip(coo.row, coo.col, coo.data):
                fh.write(f"{k} {rows[t]} {cols[t]} {v} {val:.17g}\n")
        coo = self.A_eq.tocoo()
        for r, v, val in zip(coo.row, coo.col, coo.data):
            fh.write(f"eq {r} {v} {val:.17g}\n")
        for r, val in enumerate(self.b_eq):
            if val:
                fh.write(f"rhs {r} {val:.17g}\n")


@dataclass
class SDPSolution:
    status: str  # feasible | infeasible | inaccurate | failed
    y: np.ndarray
    margin: float
    block_min_eigs: list
    max_eq_residual: float
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


class InfeasibleSolution(RuntimeError):
    pass


def extract(template, sol: SDPSolution):
    """Substitute solved decision values into a template (or template array)."""
    if not sol.feasible:
        raise InfeasibleSolution(f"cannot extract from a {sol.status} solution")
    if isinstance(template, np.ndarray):
        out = np.empty(template.shape, dtype=object)
        for idx in np.ndindex(template.shape):
            out[idx] = lift(template[idx], _nvars_of(template)).value(sol.y)
        return out
    return template.value(sol.y)


def _nvars_of(arr):
    return next(iter(arr.flat)).nvars


# ---------------------------------------------------------------------------
# constraints and programs


@dataclass
class SOSConstraint:
    """``P(x) in SOS^q[x]`` with per-row monomial bases."""

    name: str
    P: np.ndarray  # q x q object array of AffinePoly, as compiled
    bases: list
    gram_vars: range = range(0)
    original: np.ndarray | None = None  # before chopping; used for reconstruction checks

    @property
    def size(self) -> int:
        return self.P.shape[0]

    @property
    def gram_size(self) -> int:
        return sum(len(b) for b in self.bases)

    def gram(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return tri_to_sym(y[self.gram_vars.start:self.gram_vars.stop], self.gram_size)

    def basis_matrix(self, x) -> np.ndarray:
        """``M(x) = blockdiag(m_1(x), ..., m_q(x))`` of shape ``(gram_size, q)``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros((self.gram_size, self.size))
        r = 0
        for j, basis in enumerate(self.bases):
            for mono in basis:
                out[r, j] = np.prod(x ** np.array(mono))
                r += 1
        return out

    def value(self, y, compiled: bool = False) -> np.ndarray:
        P = self.P if compiled or self.original is None else self.original
        out = np.empty(P.shape, dtype=object)
        for idx in np.ndindex(P.shape):
            out[idx] = P[idx].value(y)
        return out

    def reconstruction_error(self, y, points) -> float:
        """Max ``|P(x) - M(x)^T G M(x)|`` (relative to ``1 + |P(x)|``) over points."""
        G = self.gram(y)
        Pval = self.value(y)
        worst = 0.0
        for x in np.atleast_2d(points):
            M = self.basis_matrix(x)
            rec = M.T @ G @ M
            direct = np.array([[Pval[i, j].eval(x) for j in range(self.size)]
                               for i in range(self.size)])
            err = np.max(np.abs(rec - direct) / (1.0 + np.abs(direct)))
            worst = max(worst, float(err))
        return worst


class SOSProgram:
    """Collects templates and SOS constraints over one decision vector."""

    def __init__(self, nvars: int):
        self.nvars = nvars
        self.vars = DecisionVars()
        self.constraints: list[SOSConstraint] = []
        self.equalities: list[tuple[str, AffinePoly]] = []
        self._compiled_vars = None

    def new_poly(self, name: str, monos: Sequence[tuple]) -> AffinePoly:
        """Template ``sum_k y_k x^monos[k]`` with fresh decision variables."""
        monos = sorted({tuple(m) for m in monos}, key=grlex_key)
        ids = self.vars.add(name, len(monos))
        return AffinePoly(self.nvars, {m: {k: 1.0} for m, k in zip(monos, ids)})

    def add_sos(self, p, basis=None, name: str | None = None,
                chop_rtol: float | None = CHOP_RTOL) -> SOSConstraint:
        P = np.empty((1, 1), dtype=object)
        P[0, 0] = lift(p, self.nvars)
        return self.add_matrix_sos(P, None if basis is None else [basis], name, chop_rtol)

    def add_matrix_sos(self, P, bases=None, name: str | None = None,
                       chop_rtol: float | None = CHOP_RTOL) -> SOSConstraint:
        P = template_array(P, self.nvars)
        original = P
        if chop_rtol:
            P = chop(P, chop_rtol)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("matrix SOS constraint needs a square template matrix")
        q = P.shape[0]
        for i in range(q):
            for j in range(i + 1, q):
                diff = P[i, j] - P[j, i]
                if not diff.is_zero():
                    raise ValueError(f"template matrix is not symmetric at ({i}, {j})")
        explicit = bases is not None
        if bases is None:
            bases = [newton_box_basis(P[j, j].support(), self.nvars) for j in range(q)]
        else:
            bases = [sorted({tuple(m) for m in b}, key=grlex_key) for b in bases]
            if len(bases) != q:
                raise ValueError("need one basis per diagonal entry")
        name = name or f"sos{len(self.constraints)}"
        con = SOSConstraint(name, P, bases, original=original)
        con.explicit_basis = explicit
        self.constraints.append(con)
        return con

    def add_zero(self, p, name: str | None = None) -> None:
        """Require every coefficient of ``p`` to vanish."""
        self.equalities.append((name or f"eq{len(self.equalities)}", lift(p, self.nvars)))

    def compile(self) -> SDPProblem:
        for con in self.constraints:
            if f"gram:{con.name}" not in self.vars:
                S = con.gram_size
                con.gram_vars = self.vars.add(f"gram:{con.name}", S * (S + 1) // 2)
        n = self.vars.size
        rows, cols, vals, rhs, labels, reasons = [], [], [], [], [], []

        def emit(entries: dict, expr: dict, label: str, explicit: bool):
            # sum(entries) - expr == 0
            r = len(rhs)
            row = dict(entries)
            for k, v in expr.items():
                if k != CONST:
                    row[k] = row.get(k, 0.0) - v
            c = expr.get(CONST, 0.0)
            if not row:
                if abs(c) > 1e-12:
                    if explicit:
                        raise BasisCoverageError(f"{label}: basis cannot produce coefficient {c:g}")
                    reasons.append(f"{label}: fixed coefficient {c:g} cannot be matched")
                return
            for k, v in row.items():
                rows.append(r)
                cols.append(k)
                vals.append(v)
            rhs.append(c)
            labels.append(label)

        blocks = []
        for con in self.constraints:
            q = con.size
            offsets = np.cumsum([0] + [len(b) for b in con.bases])
            base = con.gram_vars.start
            for i in range(q):
                for j in range(i, q):
                    gram_terms: dict = {}
                    for a_idx, a in enumerate(con.bases[i]):
                        for b_idx, b in enumerate(con.bases[j]):
                            ra, rb = offsets[i] + a_idx, offsets[j] + b_idx
                            if i == j and rb < ra:
                                continue
                            mono = tuple(x + y for x, y in zip(a, b))
                            weight = 2.0 if (i == j and ra != rb) else 1.0
                            var = base + tri_index(ra, rb)
                            tgt = gram_terms.setdefault(mono, {})
                            tgt[var] = tgt.get(var, 0.0) + weight
                    entry = con.P[i, j]
                    monos = set(gram_terms) | set(entry._terms)
                    for mono in sorted(monos, key=grlex_key):
                        emit(gram_terms.get(mono, {}), entry._terms.get(mono, {}),
                             f"{con.name}[{i},{j}]{mono}", getattr(con, "explicit_basis", False))
            S = con.gram_size
            if S == 0:
                continue
            T = S * (S + 1) // 2
            coef = sparse.csr_matrix(
                (np.ones(T), (np.arange(T), np.arange(base, base + T))), shape=(T, n)
            )
            blocks.append(PSDBlock(S, np.zeros(T), coef, con.name))
        for name, expr in self.equalities:
            for mono, e in sorted(expr.items(), key=lambda kv: grlex_key(kv[0])):
                emit({}, e, f"{name}{mono}", False)
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(rhs), n))
        return SDPProblem(n, blocks, A, np.array(rhs, dtype=float), labels, reasons)
