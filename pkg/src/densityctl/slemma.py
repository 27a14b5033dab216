"""Multiplier-free S-lemma: when does ``lam^T z + a >= 0`` hold on ``Z(N)``?

For ``N22 < 0`` and ``N | N22 >= 0`` the answer is a single definiteness test
of the matrix returned by :func:`lemma_matrix`; the closed-form minimum of the
linear functional over the ellipsoid (:func:`min_linear_over_zset`) serves as
an independent check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import UncertaintyQuadric

PSD_RTOL = 1e-9
PD_RTOL = 1e-10


@dataclass(frozen=True)
class LinearFunctional:
    """``z -> lam^T z + a``."""

    lam: np.ndarray
    a: float

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if not np.all(np.isfinite(lam)) or not np.isfinite(self.a):
            raise ValueError("linear functional must be finite")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "a", float(self.a))

    def __call__(self, z):
        return np.asarray(z, dtype=float) @ self.lam + self.a


def _as_quadric(q) -> UncertaintyQuadric:
    return q if isinstance(q, UncertaintyQuadric) else UncertaintyQuadric(q)


def psd_sqrt(M) -> np.ndarray:
    """Unique symmetric PSD square root."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    M = 0.5 * (M + M.T)
    w, U = np.linalg.eigh(M)
    if w.size and w.min() < -1e-8 * max(1.0, np.abs(w).max()):
        raise ValueError(f"matrix is not PSD (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (U * np.sqrt(w)) @ U.T


def min_eig(M) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def is_psd(M, rtol: float = PSD_RTOL) -> bool:
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return bool(w[0] >= -rtol * (1.0 + np.abs(w).max()))


def is_pd(M, rtol: float = PD_RTOL) -> bool:
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return bool(w[0] > rtol * (1.0 + np.abs(w).max()))


def zset_point(q, s_vec) -> np.ndarray:
    """Point ``center + (-N22)^(-1/2) s sqrt(N|N22)`` of the ellipsoid, ``||s|| <= 1``."""
    q = _as_quadric(q)
    s_vec = np.asarray(s_vec, dtype=float)
    if np.linalg.norm(s_vec) > 1 + 1e-12:
        raise ValueError("s_vec must lie in the closed unit ball")
    return q.center + q.neg_N22_inv_sqrt @ s_vec * q.sqrt_schur


def min_linear_over_zset(q, fnl: LinearFunctional) -> float:
    """Exact minimum of ``lam^T z + a`` over ``Z(N)``."""
    q = _as_quadric(q)
    lam = fnl.lam
    return float(fnl.a + lam @ q.center - q.sqrt_schur * np.linalg.norm(q.neg_N22_inv_sqrt @ lam))


def lemma_matrix(q, fnl: LinearFunctional) -> np.ndarray:
    q = _as_quadric(q)
    lam = fnl.lam
    corner = float(lam @ q.center + fnl.a)  # -lam^T N22^-1 N21 + a
    r = lam.size
    out = np.empty((1 + r, 1 + r))
    out[0, 0] = corner
    out[0, 1:] = q.sqrt_schur * lam
    out[1:, 0] = q.sqrt_schur * lam
    out[1:, 1:] = -corner * q.N22
    return out


def slemma_nonstrict(q, fnl: LinearFunctional) -> bool:
    """True iff ``lam^T z + a >= 0`` for every ``z`` in ``Z(N)``."""
    return is_psd(lemma_matrix(q, fnl))


def slemma_strict(q, fnl: LinearFunctional, mode: str = "definite", beta: float | None = None) -> bool:
    """True iff ``lam^T z + a > 0`` on ``Z(N)``.

    ``mode="definite"`` tests strict definiteness; ``mode="margin"`` tests
    semidefiniteness after subtracting ``beta > 0`` from the corner entry.
    """
    M = lemma_matrix(q, fnl)
    if mode == "definite":
        return is_pd(M)
    if mode == "margin":
        if beta is None or beta <= 0:
            raise ValueError("margin mode needs beta > 0")
        M = M.copy()
        M[0, 0] -= beta
        return is_psd(M)
    raise ValueError(f"unknown mode {mode!r}")
