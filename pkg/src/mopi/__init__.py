"""Prediction sets calibrated by minimax optimization over weighted coverage
deviations, with split-conformal and conditional-calibration baselines,
synthetic benchmarks and conditional-coverage diagnostics."""

from .baselines import fit_cc, fit_scp, pinball_loss
from .core import Dataset, MopiError
from .datagen import GeneratorSpec, GroupScheme, generate, oracle_rule
from .metrics import exact_msce, marginal_coverage, root_msce_binned, set_size_summary
from .sets import Box, Ellipsoid, PredictionRule, Sublevel, Surrogate
from .shapes import init_shape
from .solver import AdamConfig, SolverConfig, fit_mopi, mopi_objective
from .weights import GaussianRKHS, IndicatorBasis, InnerMax

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "Box", "Dataset", "Ellipsoid", "GaussianRKHS", "GeneratorSpec", "GroupScheme",
    "IndicatorBasis", "InnerMax", "MopiError", "PredictionRule", "SolverConfig", "Sublevel", "Surrogate",
    "exact_msce", "fit_cc", "fit_mopi", "fit_scp", "generate", "init_shape", "marginal_coverage",
    "mopi_objective", "oracle_rule", "pinball_loss", "root_msce_binned", "set_size_summary",
]
