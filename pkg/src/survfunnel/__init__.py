"""Case-mix adjusted funnel plots for censored survival outcomes."""

from .coxmodel import CoxFit, ModelSpec, fit_cox
from .funnelbench import (
    BenchmarkConfig,
    CenterSummary,
    Classification,
    benchmark_followup,
    benchmark_mortality,
)
from .survdata import MISSING, Dataset, StepFunction, SubjectRecord

__version__ = "0.1.0"

__all__ = [
    "BenchmarkConfig",
    "CenterSummary",
    "Classification",
    "CoxFit",
    "Dataset",
    "MISSING",
    "ModelSpec",
    "StepFunction",
    "SubjectRecord",
    "benchmark_followup",
    "benchmark_mortality",
    "fit_cox",
]
