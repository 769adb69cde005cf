"""Clustered, spatially correlated sparse Bayesian learning for variance-fault diagnosis."""
from .datagen import Scenario, generate, numerical_scenario, assembly_scenario
from .estimator import CSSBL, MSBL
from .evaluation import aggregate, auc, match_groups, nmse, score_trial
from .exceptions import CSSBLError
from .model import (BlockStructure, CorrelationBlocks, Dataset, FaultQualityModel,
                    Hyperpriors, VbState)
from .vbem import ConvergenceTrace, VbemConfig, estimate_variances, run

__version__ = "0.1.0"

__all__ = [
    "BlockStructure", "CSSBL", "CSSBLError", "ConvergenceTrace", "CorrelationBlocks",
    "Dataset", "FaultQualityModel", "Hyperpriors", "MSBL", "Scenario", "VbState",
    "VbemConfig", "aggregate", "assembly_scenario", "auc", "estimate_variances",
    "generate", "match_groups", "nmse", "numerical_scenario", "run", "score_trial",
]
