"""NPML density estimation over Sobolev balls and simulated minimum-distance estimation."""

from .auxiliary import AuxiliaryModel, default_dimension, is_member, project
from .errors import *  # noqa: F401,F403
from .families import (
    ExponentialFamily,
    FixedDensityFamily,
    ParametricFamily,
    SimulationMechanism,
    fisher_information,
    make_draws,
    make_family,
    simulate_sample,
)
from .npml import NpmlFit, NpmlOptions, Sample, empirical_loglik, fit_npml, loglik_gradient
from .smd import (
    EstimationResult,
    ObjectiveContext,
    Q_n,
    Q_nk,
    Q_pop,
    SmdOptions,
    k_schedule,
    minimize_md,
    minimize_smd,
)
from .sobolev import (
    UNIT_INTERVAL,
    Interval,
    SpectralFunction,
    embedding_constant,
    evaluate,
    gauss_legendre,
    sobolev_norm,
    sup_norm,
)

__version__ = "0.1.0"
