"""Revocable deep reinforcement learning for graph matching and the QAP."""

from .core import (AffinityMatrix, ContractError, MatchResult, PartialSolution, Sense, f1_metrics,
                   objective_ratio, objective_score, optimal_gap)
from .env import EnvConfig, MatchingEnv
from .instances import Instance, SyntheticSpec, load_instance, synthetic_instance
from .regularizer import RegFn, RegKind

__version__ = "0.1.0"

__all__ = ["AffinityMatrix", "ContractError", "EnvConfig", "Instance", "MatchResult", "MatchingEnv",
           "PartialSolution", "RegFn", "RegKind", "Sense", "SyntheticSpec", "f1_metrics", "load_instance",
           "objective_ratio", "objective_score", "optimal_gap", "synthetic_instance"]
