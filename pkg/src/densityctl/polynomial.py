"""Sparse multivariate polynomials over the reals.

A :class:`Polynomial` maps exponent tuples to float coefficients. Variables are
positional (``x[0]`` .. ``x[n-1]``); names only exist at the parser boundary.
Vectors and matrices of polynomials are plain numpy object arrays, which lets
``A @ F`` with a float matrix ``A`` work out of the box.
"""
from __future__ import annotations

import itertools
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

PRUNE_TOL = 1e-14

Monomial = tuple


def grlex_key(mono: Monomial):
    """Graded lexicographic sort key (ascending: 1 < x2 < x1 < x2^2 < ...)."""
    return (sum(mono), mono)


class Polynomial:
    """Immutable sparse polynomial in ``nvars`` positional variables."""

    __slots__ = ("nvars", "_terms", "_cache")

    def __init__(self, nvars: int, terms: Mapping[Monomial, float] | None = None):
        if nvars < 1:
            raise ValueError("a polynomial needs at least one variable")
        self.nvars = int(nvars)
        clean = {}
        for mono, coef in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != self.nvars:
                raise ValueError(
                    f"exponent {mono} has length {len(mono)}, expected {self.nvars}"
                )
            if min(mono, default=0) < 0:
                raise ValueError(f"negative exponent in {mono}")
            coef = float(coef)
            if abs(coef) > PRUNE_TOL:
                clean[mono] = coef
        self._terms = clean
        self._cache = None

    # construction helpers -------------------------------------------------
    @classmethod
    def constant(cls, nvars: int, value: float) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def zero(cls, nvars: int) -> "Polynomial":
        return cls(nvars)

    @classmethod
    def variable(cls, nvars: int, index: int) -> "Polynomial":
        if not 0 <= index < nvars:
            raise IndexError(f"variable index {index} out of range for {nvars} variables")
        mono = [0] * nvars
        mono[index] = 1
        return cls(nvars, {tuple(mono): 1.0})

    @classmethod
    def variables(cls, nvars: int) -> list["Polynomial"]:
        return [cls.variable(nvars, i) for i in range(nvars)]

    @classmethod
    def _raw(cls, nvars: int, terms: dict) -> "Polynomial":
        # Trusted constructor: keys are valid tuples, values already floats.
        p = cls.__new__(cls)
        p.nvars = nvars
        p._terms = {m: c for m, c in terms.items() if abs(c) > PRUNE_TOL}
        p._cache = None
        return p

    # basic queries ----------------------------------------------------------
    @property
    def terms(self) -> dict:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def sorted_terms(self, descending: bool = True) -> list:
        return sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]), reverse=descending)

    def coefficient(self, mono: Monomial) -> float:
        return self._terms.get(tuple(mono), 0.0)

    def is_zero(self) -> bool:
        return not self._terms

    def degree(self) -> float:
        """Maximum total degree; ``-inf`` for the zero polynomial."""
        if not self._terms:
            return -math.inf
        return max(sum(m) for m in self._terms)

    def min_degree(self) -> float:
        if not self._terms:
            return math.inf
        return min(sum(m) for m in self._terms)

    def support(self) -> list:
        return sorted(self._terms, key=grlex_key)

    def homogeneous_part(self, d: int) -> "Polynomial":
        return Polynomial._raw(self.nvars, {m: c for m, c in self._terms.items() if sum(m) == d})

    def leading_form(self) -> "Polynomial":
        if self.is_zero():
            return self
        return self.homogeneous_part(int(self.degree()))

    # arithmetic -------------------------------------------------------------
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError(
                    f"variable count mismatch: {self.nvars} vs {other.nvars}"
                )
            return other
        if isinstance(other, (int, float, np.integer, np.floating)):
            return Polynomial.constant(self.nvars, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial._raw(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._raw(self.nvars, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other + (-self)

    def scale(self, k: float) -> "Polynomial":
        k = float(k)
        return Polynomial._raw(self.nvars, {m: k * c for m, c in self._terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float, np.integer, np.floating)):
            return self.scale(other)
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        out: dict = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial._raw(self.nvars, out)

    __rmul__ = __mul__

    def __truediv__(self, k):
        if isinstance(k, (int, float, np.integer, np.floating)):
            return self.scale(1.0 / float(k))
        return NotImplemented

    def __pow__(self, k: int) -> "Polynomial":
        if int(k) != k or k < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = Polynomial.constant(self.nvars, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self):
        return hash((self.nvars, frozenset(self._terms.items())))

    def allclose(self, other: "Polynomial", atol: float = 1e-12) -> bool:
        diff = self - other
        return all(abs(c) <= atol for c in diff._terms.values())

    # calculus -------------------------------------------------------------------
    def partial(self, i: int) -> "Polynomial":
        """Formal partial derivative with respect to ``x[i]`` (0-based)."""
        if not 0 <= i < self.nvars:
            raise IndexError(f"variable index {i} out of range for {self.nvars} variables")
        out = {}
        for m, c in self._terms.items():
            e = m[i]
            if e:
                nm = m[:i] + (e - 1,) + m[i + 1:]
                out[nm] = out.get(nm, 0.0) + c * e
        return Polynomial._raw(self.nvars, out)

    def gradient(self) -> np.ndarray:
        return poly_array([self.partial(i) for i in range(self.nvars)])

    # evaluation -----------------------------------------------------------------
    def _arrays(self):
        if self._cache is None:
            if self._terms:
                monos = list(self._terms)
                exps = np.array(monos, dtype=np.int64)
                coefs = np.array([self._terms[m] for m in monos])
            else:
                exps = np.zeros((0, self.nvars), dtype=np.int64)
                coefs = np.zeros(0)
            self._cache = (exps, coefs)
        return self._cache

    def eval(self, x) -> float | np.ndarray:
        """Evaluate at a point (shape ``(n,)``) or a batch of points (``(k, n)``)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.nvars:
            raise ValueError(f"expected points with {self.nvars} coordinates, got shape {x.shape}")
        exps, coefs = self._arrays()
        single = x.ndim == 1
        pts = x.reshape(-1, self.nvars)
        if not coefs.size:
            vals = np.zeros(pts.shape[0])
        else:
            vals = np.prod(pts[:, None, :] ** exps[None, :, :], axis=2) @ coefs
        return float(vals[0]) if single else vals

    __call__ = eval

    # text ----------------------------------------------------------------------
    def to_string(self, names: Sequence[str] | None = None, precision: int = 17) -> str:
        names = list(names) if names is not None else [f"x{i + 1}" for i in range(self.nvars)]
        if not self._terms:
            return "0"
        parts = []
        for mono, coef in self.sorted_terms():
            factors = []
            for name, e in zip(names, mono):
                if e == 1:
                    factors.append(name)
                elif e > 1:
                    factors.append(f"{name}^{e}")
            mag = abs(coef)
            txt = format(mag, f".{precision}g")
            if factors:
                body = "*".join(factors) if mag == 1.0 else txt + "*" + "*".join(factors)
            else:
                body = txt
            sign = "-" if coef < 0 else "+"
            parts.append((sign, body))
        first_sign, first = parts[0]
        out = ("-" if first_sign == "-" else "") + first
        for sign, body in parts[1:]:
            out += f" {sign} {body}"
        return out

    def __str__(self):
        return self.to_string(precision=6)

    def __repr__(self):
        return f"Polynomial({self.nvars}, {self.to_string(precision=6)!r})"


# ---------------------------------------------------------------------------
# arrays of polynomials


def poly_array(entries) -> np.ndarray:
    """Pack (nested) sequences of polynomials into a read-only object array."""
    arr = np.empty(np.shape(np.array(entries, dtype=object)), dtype=object)
    flat = list(_flatten(entries))
    for idx, p in zip(np.ndindex(arr.shape), flat):
        arr[idx] = p
    arr.flags.writeable = False
    return arr


def _flatten(entries):
    if isinstance(entries, (Polynomial,)) or not isinstance(entries, (list, tuple, np.ndarray)):
        yield entries
        return
    for e in entries:
        yield from _flatten(e)


def eval_array(arr: np.ndarray, x) -> np.ndarray:
    """Evaluate every entry of a polynomial array at one point ``x``."""
    out = np.empty(arr.shape)
    for idx in np.ndindex(arr.shape):
        out[idx] = arr[idx].eval(x)
    return out


def eval_array_batch(arr: np.ndarray, pts) -> np.ndarray:
    """Evaluate at ``k`` points; result has shape ``(k,) + arr.shape``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.empty((pts.shape[0],) + arr.shape)
    for idx in np.ndindex(arr.shape):
        out[(slice(None),) + idx] = arr[idx].eval(pts)
    return out


def array_nvars(arr) -> int:
    first = next(iter(np.asarray(arr, dtype=object).flat))
    return first.nvars


def divergence(field) -> Polynomial:
    """Sum of ``d field[i] / d x[i]`` for a square polynomial vector field."""
    field = list(np.asarray(field, dtype=object).ravel())
    if not field:
        raise ValueError("empty vector field")
    n = field[0].nvars
    if len(field) != n:
        raise ValueError(f"divergence needs {n} components, got {len(field)}")
    out = Polynomial.zero(n)
    for i, fi in enumerate(field):
        out = out + fi.partial(i)
    return out


def jacobian(field) -> np.ndarray:
    field = list(np.asarray(field, dtype=object).ravel())
    return poly_array([[fi.partial(j) for j in range(fi.nvars)] for fi in field])


def monomials(nvars: int, max_degree: int, min_degree: int = 0) -> list:
    """All exponent tuples with ``min_degree <= total degree <= max_degree``, grlex order."""
    out = []
    for d in range(max(min_degree, 0), max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(nvars), d):
            mono = [0] * nvars
            for i in combo:
                mono[i] += 1
            out.append(tuple(mono))
    return sorted(set(out), key=grlex_key)


def sphere_grid(nvars: int, density: int = 200) -> np.ndarray:
    """Deterministic point set on the unit sphere in ``nvars`` dimensions."""
    if nvars == 1:
        return np.array([[1.0], [-1.0]])
    if nvars == 2:
        th = np.linspace(0.0, 2 * np.pi, 4 * density, endpoint=False)
        return np.column_stack([np.cos(th), np.sin(th)])
    # Gridded cube surface projected onto the sphere; covers every orthant.
    ticks = np.linspace(-1.0, 1.0, max(density // 4, 9))
    pts = []
    for axis in range(nvars):
        for sign in (-1.0, 1.0):
            rest = np.array(list(itertools.product(ticks, repeat=nvars - 1)))
            face = np.insert(rest, axis, sign, axis=1)
            pts.append(face)
    pts = np.unique(np.vstack(pts), axis=0)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def leading_form_min_on_sphere(p: Polynomial, density: int = 200) -> float:
    """Minimum of the top-degree homogeneous part of ``p`` over a sphere grid."""
    if p.is_zero():
        raise ValueError("the zero polynomial has no leading form")
    lead = p.leading_form()
    return float(np.min(lead.eval(sphere_grid(p.nvars, density))))


def as_polynomial(value, nvars: int) -> Polynomial:
    if isinstance(value, Polynomial):
        return value
    return Polynomial.constant(nvars, float(value))


def sum_polys(polys: Iterable[Polynomial], nvars: int) -> Polynomial:
    out: dict = {}
    for p in polys:
        for m, c in p.items():
            out[m] = out.get(m, 0.0) + c
    return Polynomial._raw(nvars, out)


def squared_norm(nvars: int) -> Polynomial:
    """``x1^2 + ... + xn^2``."""
    return Polynomial(nvars, {tuple(2 if j == i else 0 for j in range(nvars)): 1.0 for i in range(nvars)})
