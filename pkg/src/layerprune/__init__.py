"""Layer pruning toolkit for decoder-only transformers.

Importance scoring from per-layer gradient magnitudes, iterative or one-shot
layer removal, first-order activation-drift analysis, and ridge-based
projection compensation folded back into the down-projection weight.
"""

__version__ = "0.1.0"

from .calibration import CalibrationSet, build_calibration
from .checkpoint import load_checkpoint, save_checkpoint
from .compensation import (CompensationProblem, CompensationSolution,
                           apply_solution, capture_problem, objective_value,
                           solve_closed_form, solve_iterative)
from .drift import DriftReport, compute_drift, select_compensation_targets
from .evaluation import (BenchResult, CompareConfig, EvalResult, bench_forward,
                         compare_runs, eval_perplexity)
from .importance import (ImportanceScores, score_block_influence,
                         score_grad_norm, score_loss_delta, score_random)
from .model import (ActivationTrace, DecoderLayer, ModelConfig,
                    TransformerModel, cross_entropy, fold_compensation,
                    forward, init_model, remove_layer)
from .pruning import PruneRun, compute_K, prune_iterative, prune_one_shot
from .tensor import (GradientMap, Tape, Tensor, backward, frobenius_norm,
                     ridge_solve)
from .training import TrainConfig, train

__all__ = [
    "ActivationTrace", "BenchResult", "CalibrationSet", "CompareConfig",
    "CompensationProblem", "CompensationSolution", "DecoderLayer",
    "DriftReport", "EvalResult", "GradientMap", "ImportanceScores",
    "ModelConfig", "PruneRun", "Tape", "Tensor", "TrainConfig",
    "TransformerModel", "apply_solution", "backward", "bench_forward",
    "build_calibration", "capture_problem", "compare_runs", "compute_K",
    "compute_drift", "cross_entropy", "eval_perplexity", "fold_compensation",
    "forward", "frobenius_norm", "init_model", "load_checkpoint",
    "objective_value", "prune_iterative", "prune_one_shot", "remove_layer",
    "ridge_solve", "save_checkpoint", "score_block_influence",
    "score_grad_norm", "score_loss_delta", "score_random",
    "select_compensation_targets", "solve_closed_form", "solve_iterative",
    "train",
]
