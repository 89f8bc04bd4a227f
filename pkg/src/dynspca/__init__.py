"""Dynamic sparse principal subspace estimation for repeated-measurement panels."""

from .errors import DynspcaError
from .estimator import DpcaConfig, FveRule, PointFit, SubspaceFit, fit_trajectory, subspace_distance
from .kernel import KernelFamily, KernelSpec, local_linear_weights
from .manpg import ManPGParams, SolveStatus, manpg_solve
from .panel import Design, PanelDataset
from .simbench import GroundTruth, SimDesign, generate_panel, mise, run_study
from .smooth_cov import CovarianceSmoother
from .tuning import TuningGrids, TuningReport, tune

__version__ = "0.1.0"

__all__ = [
    "CovarianceSmoother", "Design", "DpcaConfig", "DynspcaError", "FveRule", "GroundTruth",
    "KernelFamily", "KernelSpec", "ManPGParams", "PanelDataset", "PointFit", "SimDesign",
    "SolveStatus", "SubspaceFit", "TuningGrids", "TuningReport", "fit_trajectory", "generate_panel",
    "local_linear_weights", "manpg_solve", "mise", "run_study", "subspace_distance", "tune",
]
