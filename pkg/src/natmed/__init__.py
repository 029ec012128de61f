"""One-step estimation of natural mediation effects under case-cohort sampling."""

__version__ = "0.1.0"

from .data import Dataset, Observation, load_csv, validate_case_cohort, write_csv  # noqa: E402
from .estimators import (  # noqa: E402
    EffectReport,
    PsiEstimate,
    effect_report,
    estimate_psi,
    estimate_psi_alternative,
    estimate_psi_classic,
    estimate_psi_density_ratio,
)
from .kernels import BACKEND  # noqa: E402
from .nuisance import Known, NuisanceStrategy, TargetPair  # noqa: E402
from .regress import LearnerSpec, WeightedSample, fit, fit_ensemble  # noqa: E402

__all__ = [
    "BACKEND", "Dataset", "EffectReport", "Known", "LearnerSpec", "NuisanceStrategy", "Observation",
    "PsiEstimate", "TargetPair", "WeightedSample", "effect_report", "estimate_psi", "estimate_psi_alternative",
    "estimate_psi_classic", "estimate_psi_density_ratio", "fit", "fit_ensemble", "load_csv",
    "validate_case_cohort", "write_csv",
]
