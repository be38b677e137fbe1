"""Layer removal driven by importance scores.

Iterative mode rescores the current pruned model before every removal;
scores are never reused across rounds because removing a layer shifts the
remaining layers' importance. One-shot mode scores the intact model once and
removes the K lowest-scoring layers together. Argmin ties break toward the
lowest original index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationSet
from .errors import InputError
from .importance import ImportanceScores, get_metric
from .model import TransformerModel, remove_layer

ITERATIVE = "iterative"
ONE_SHOT = "one_shot"


@dataclass(frozen=True)
class PruneStep:
    step: int
    removed: tuple[int, ...]
    scores: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "removed": list(self.removed),
            "scores": {str(i): s for i, s in sorted(self.scores.items())},
        }


@dataclass(frozen=True)
class PruneRun:
    mode: str
    metric: str
    target_removed: int
    ratio: float
    history: tuple[PruneStep, ...]
    removed_order: tuple[int, ...]
    forward_passes: int
    backward_passes: int

    def removed_joined(self) -> str:
        return ",".join(str(i) for i in self.removed_order)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "metric": self.metric,
            "target_removed": self.target_removed,
            "ratio": self.ratio,
            "removed_layers": self.removed_joined(),
            "removed_order": list(self.removed_order),
            "history": [h.to_dict() for h in self.history],
            "forward_passes": self.forward_passes,
            "backward_passes": self.backward_passes,
        }


def compute_K(n_layers: int, ratio: float) -> int:
    """Layers to remove for a pruning ratio: round half up, at least one."""
    if not 0.0 < ratio < 1.0:
        raise InputError(f"pruning ratio must lie in (0, 1), got {ratio}")
    return max(1, int(np.floor(ratio * n_layers + 0.5)))


def _argmin(scores: dict[int, float]) -> int:
    best_i, best_s = None, None
    for i in sorted(scores):
        s = scores[i]
        if best_s is None or s < best_s:
            best_i, best_s = i, s
    return best_i


def _check_k(model: TransformerModel, k: int) -> None:
    retained = len(model.layers)
    if not 1 <= k < retained:
        raise InputError(
            f"K must satisfy 1 <= K < retained layer count ({retained}), got {k}")


def prune_iterative(model: TransformerModel, calib: CalibrationSet, k: int,
                    metric: str, seed: int = 0, threads: int = 1,
                    ) -> tuple[TransformerModel, PruneRun]:
    """Remove the argmin-score layer K times, rescoring between removals."""
    _check_k(model, k)
    score_fn = get_metric(metric, seed=seed, threads=threads)
    ratio = k / len(model.layers)
    history: list[PruneStep] = []
    removed: list[int] = []
    fwd = bwd = 0
    current = model
    for step in range(1, k + 1):
        scores = score_fn(current, calib)
        worst = _argmin(scores.scores)
        current = remove_layer(current, worst)
        removed.append(worst)
        history.append(PruneStep(step, (worst,), dict(scores.scores)))
        fwd += scores.forward_passes
        bwd += scores.backward_passes
    run = PruneRun(ITERATIVE, metric, k, ratio, tuple(history), tuple(removed),
                   fwd, bwd)
    return current, run


def prune_one_shot(model: TransformerModel, calib: CalibrationSet, k: int,
                   metric: str, seed: int = 0, threads: int = 1,
                   ) -> tuple[TransformerModel, PruneRun]:
    """Score the intact model once and remove the K lowest-scoring layers."""
    _check_k(model, k)
    score_fn = get_metric(metric, seed=seed, threads=threads)
    ratio = k / len(model.layers)
    scores: ImportanceScores = score_fn(model, calib)
    worst = [i for i, _ in scores.ranked()[:k]]
    current = model
    for i in worst:
        current = remove_layer(current, i)
    run = PruneRun(ONE_SHOT, metric, k, ratio,
                   (PruneStep(1, tuple(worst), dict(scores.scores)),),
                   tuple(worst), scores.forward_passes, scores.backward_passes)
    return current, run
