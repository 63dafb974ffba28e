"""Parallel-decoding masked token generation with automated strategy search."""

__version__ = "0.1.0"

from .strategy import (
    ArcsineMaskRatio,
    GenerationSchedule,
    HeuristicParams,
    TrainingStrategy,
    heuristic_schedule,
    project_schedule,
)
from .toyworld import GroundTruthChain, make_chain, sample_dataset
from .predictor import ModelPredictor, OraclePredictor, TrainConfig, init_model, train
from .sampler import SelectionPolicy, confidence_policy, fixed_order_policy, generate
from .metrics import EvalSpec, Evaluator, evaluate_F, frechet_distance
from .optimizer import (
    AutoNatConfig,
    GenOptConfig,
    LineSearchConfig,
    autonat,
    finite_diff_grad,
    line_search_training,
    optimize_generation,
)

__all__ = [
    "ArcsineMaskRatio",
    "AutoNatConfig",
    "EvalSpec",
    "Evaluator",
    "GenOptConfig",
    "GenerationSchedule",
    "GroundTruthChain",
    "HeuristicParams",
    "LineSearchConfig",
    "ModelPredictor",
    "OraclePredictor",
    "SelectionPolicy",
    "TrainConfig",
    "TrainingStrategy",
    "autonat",
    "confidence_policy",
    "evaluate_F",
    "finite_diff_grad",
    "fixed_order_policy",
    "frechet_distance",
    "generate",
    "heuristic_schedule",
    "init_model",
    "line_search_training",
    "make_chain",
    "optimize_generation",
    "project_schedule",
    "sample_dataset",
    "train",
]
