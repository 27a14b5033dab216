"""Data-driven controller synthesis and stability certification for polynomial systems.

From noisy samples of ``xdot = A F(x) + B G(x) u`` with unknown ``A, B``, build
a rational feedback ``K = c / a`` through a density function and certify every
data-consistent closed loop with a Lyapunov function, both via SOS programs.
"""
from .config import ConfigError, RunConfig, load_config
from .datamodel import (
    AssumptionViolation,
    ExperimentData,
    NoiseModel,
    PriorKnowledge,
    SystemStructure,
    UncertaintyQuadric,
    build_uncertainty_quadric,
    membership_sigma,
)
from .parser import parse_poly
from .polynomial import Polynomial
from .sdp import SolverSettings
from .synthesis import DensityConfig, RationalController, SynthesisInfeasible, synthesize
from .verify import (
    NotCertified,
    corollary5_certify,
    corollary6_certify,
    model_based_lyapunov_check,
    pointwise_thm3,
    prop4_certify,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionViolation", "ConfigError", "DensityConfig", "DensitySynthesizer", "ExperimentData",
    "NoiseModel", "NotCertified", "Polynomial", "PriorKnowledge", "RationalController", "RunConfig",
    "SolverSettings", "StabilityCertifier", "SynthesisInfeasible", "SystemStructure",
    "UncertaintyQuadric", "build_uncertainty_quadric", "corollary5_certify", "corollary6_certify",
    "load_config", "membership_sigma", "model_based_lyapunov_check", "parse_poly",
    "pointwise_thm3", "prop4_certify", "synthesize",
]


def __getattr__(name):
    # scikit-learn is only imported when the estimator wrappers are used
    if name in ("DensitySynthesizer", "StabilityCertifier"):
        from . import estimators
        return getattr(estimators, name)
    raise AttributeError(f"module 'densityctl' has no attribute {name!r}")
