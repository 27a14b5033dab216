"""scikit-learn style wrappers.

Samples are rows: ``X`` holds states ``(T, n)``, ``y`` the measured
derivatives ``(T, n)`` and ``u`` the inputs ``(T, m)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .datamodel import (
    ExperimentData,
    NoiseModel,
    PriorKnowledge,
    SystemStructure,
    assemble_data_matrices,
    build_uncertainty_quadric,
)
from .parser import parse_poly
from .synthesis import DensityConfig, RationalController, synthesize
from .verify import CERTIFIERS, default_grid, pointwise_thm3


def _structure(variables, F, G) -> SystemStructure:
    P = lambda t: parse_poly(t, variables) if isinstance(t, str) else t
    return SystemStructure([P(t) for t in F], [[P(t) for t in row] for row in G])


def _quadric(struct, prior_entries, omega, X, y, u):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = np.asarray(u, dtype=float).reshape(X.shape[0], -1)
    if X.shape != y.shape or X.shape[1] != struct.n:
        raise ValueError(f"X and y must both be (T, {struct.n})")
    data = ExperimentData(np.arange(X.shape[0], dtype=float), X.T, y.T, u.T)
    prior = PriorKnowledge.from_entries(prior_entries or [], struct.n, struct.f, struct.g)
    mats = assemble_data_matrices(struct, data)
    return build_uncertainty_quadric(*mats, NoiseModel.pointwise(omega, struct.n, data.T), prior), prior


class DensitySynthesizer(BaseEstimator):
    """Fit a rational controller ``K = c / a`` to experiment samples.

    Parameters mirror the synthesis config; ``F``, ``G``, ``b`` and ``beta``
    are polynomial strings over ``variables``. ``prior`` is a list of
    ``(row, col, value)`` entries of ``[A B]`` known in advance.
    """

    def __init__(self, variables=("x1", "x2"), F=("x1", "x2"), G=(("1",),), b="x1^2 + x2^2",
                 beta=None, epsilon=1e-4, alpha="auto", deg_a=0, deg_c=2, prior=None, omega=0.0,
                 settings=None):
        self.variables = variables
        self.F = F
        self.G = G
        self.b = b
        self.beta = beta
        self.epsilon = epsilon
        self.alpha = alpha
        self.deg_a = deg_a
        self.deg_c = deg_c
        self.prior = prior
        self.omega = omega
        self.settings = settings

    def fit(self, X, y, u):
        names = list(self.variables)
        struct = _structure(names, self.F, self.G)
        q, prior = _quadric(struct, self.prior, self.omega, X, y, u)
        cfg = DensityConfig(parse_poly(self.b, names),
                            None if self.beta is None else parse_poly(self.beta, names),
                            self.epsilon, self.alpha, self.deg_a, self.deg_c)
        self.result_ = synthesize(struct, q, prior, cfg, self.settings)
        self.controller_ = self.result_.controller
        self.structure_ = struct
        self.quadric_ = q
        self.prior_ = prior
        self.alpha_ = self.result_.alpha
        return self

    def predict(self, X) -> np.ndarray:
        """Control input ``K(x)`` for each row of ``X``, shape ``(T, m)``."""
        if not hasattr(self, "controller_"):
            raise NotFittedError("call fit before predict")
        return self.controller_.batch(np.atleast_2d(np.asarray(X, dtype=float)))


class StabilityCertifier(BaseEstimator):
    """Search a Lyapunov function proving every data-consistent closed loop stable.

    ``controller`` is a fitted :class:`DensitySynthesizer`, a
    :class:`RationalController`, or a list of gain strings.
    """

    def __init__(self, controller=None, variables=("x1", "x2"), F=("x1", "x2"), G=(("1",),),
                 method="cor5", deg_v=2, epsilon=None, beta=None, prior=None, omega=0.0,
                 settings=None):
        self.controller = controller
        self.variables = variables
        self.F = F
        self.G = G
        self.method = method
        self.deg_v = deg_v
        self.epsilon = epsilon
        self.beta = beta
        self.prior = prior
        self.omega = omega
        self.settings = settings

    def _controller(self, names) -> RationalController:
        c = self.controller
        if isinstance(c, DensitySynthesizer):
            return c.controller_
        if isinstance(c, RationalController):
            return c
        if c is None:
            raise ValueError("no controller to certify")
        return RationalController.from_gain([parse_poly(t, names) for t in c])

    def fit(self, X, y, u):
        if self.method not in CERTIFIERS:
            raise ValueError(f"method must be one of {sorted(CERTIFIERS)}")
        names = list(self.variables)
        struct = _structure(names, self.F, self.G)
        q, prior = _quadric(struct, self.prior, self.omega, X, y, u)
        P = lambda t: None if t is None else parse_poly(t, names)
        ctrl = self._controller(names)
        self.certificate_ = CERTIFIERS[self.method](struct, q, prior, ctrl, self.deg_v,
                                                    eps=P(self.epsilon), beta=P(self.beta),
                                                    settings=self.settings)
        self.V_ = self.certificate_.V
        self.controller_ = ctrl
        self.structure_, self.quadric_, self.prior_ = struct, q, prior
        return self

    def predict(self, X) -> np.ndarray:
        """Lyapunov function values ``V(x)`` for each row of ``X``."""
        if not hasattr(self, "V_"):
            raise NotFittedError("call fit before predict")
        return self.V_.eval(np.atleast_2d(np.asarray(X, dtype=float)))

    def score(self, X=None, y=None) -> float:
        """Fraction of points where the pointwise robust decrease condition holds."""
        if not hasattr(self, "V_"):
            raise NotFittedError("call fit before score")
        pts = default_grid(self.structure_.n) if X is None else np.atleast_2d(X)
        rep = pointwise_thm3(self.quadric_, self.prior_, self.structure_, self.controller_,
                             self.V_, self.certificate_.beta, pts)
        return 1.0 - rep.violations.size / len(pts)
