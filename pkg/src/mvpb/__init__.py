"""Publication-bias tests for bivariate random-effects meta-analysis.

Provides REML fitting of the bivariate random-effects model, a joint
regression-based score test for funnel asymmetry across outcomes, the
classical Egger, Begg, and trim-and-fill comparators with combined-measure
and Bonferroni adapters, and a reproducible Monte-Carlo harness.
"""

from mvpb.brma import BrmaFit, BrmaParams, RemlOptions, marginal_cov, reml_fit, restricted_loglik
from mvpb.data import MetaDataset, Study, TestResult, UniSeries
from mvpb.pbtests import (
    begg_test,
    bonferroni_combine,
    combine_logdor,
    egger_test,
    total_se_series,
    trim_fill,
)
from mvpb.rst import RstDesign, RstResult, build_design, profile_b, rst_test
from mvpb.sim import SimCellResult, SimScenario, apply_selection, generate_study, run_cell

__version__ = "0.1.0"

__all__ = [
    "BrmaFit",
    "BrmaParams",
    "MetaDataset",
    "RemlOptions",
    "RstDesign",
    "RstResult",
    "SimCellResult",
    "SimScenario",
    "Study",
    "TestResult",
    "UniSeries",
    "apply_selection",
    "begg_test",
    "bonferroni_combine",
    "build_design",
    "combine_logdor",
    "egger_test",
    "generate_study",
    "marginal_cov",
    "profile_b",
    "reml_fit",
    "restricted_loglik",
    "rst_test",
    "run_cell",
    "total_se_series",
    "trim_fill",
]
