"""First-order activation drift between an original and a pruned model.

For every layer retained by the pruned model, both models' outputs at that
layer are averaged over every calibration token (one d-vector per layer per
model, pooled over tokens and samples jointly), and the drift is the L2
distance between the two means. Layer correspondence is by original index.
The most-drifted layers are the compensation targets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model as md
from .calibration import CalibrationSet
from .errors import InputError
from .model import TransformerModel, forward
from .runtime import ordered_map

MAX_DRIFT = "max_drift"
LOCAL = "local"
STRATEGIES = (MAX_DRIFT, LOCAL)


@dataclass(frozen=True)
class DriftReport:
    deltas: dict[int, float]            # retained original index -> drift
    removed: tuple[int, ...]            # pruned layer indices, ascending
    tokens_used: int
    mean_vectors: dict[int, tuple[np.ndarray, np.ndarray]] | None = None

    def ranked(self) -> list[tuple[int, float]]:
        """Layers ordered most-drifted first, ties toward the lower index."""
        return sorted(self.deltas.items(), key=lambda kv: (-kv[1], kv[0]))

    def to_dict(self) -> dict:
        return {
            "deltas": {str(i): d for i, d in sorted(self.deltas.items())},
            "removed": list(self.removed),
            "tokens_used": self.tokens_used,
        }


def compute_drift(original: TransformerModel, pruned: TransformerModel,
                  calib: CalibrationSet, threads: int = 1,
                  keep_means: bool = True) -> DriftReport:
    if original.config != pruned.config:
        raise InputError("drift requires models with identical configs")
    if not (pruned.removed >= original.removed):
        raise InputError("pruned model must derive from the original")
    retained = pruned.retained_indices
    cap_orig = {i: frozenset({md.H_OUT}) for i in retained}
    cap_pruned = {i: frozenset({md.H_OUT}) for i in retained}

    def one_sample(pair):
        x, _ = pair
        _, tr_o = forward(original, x, capture=cap_orig)
        _, tr_p = forward(pruned, x, capture=cap_pruned)
        sums_o = [tr_o.get(i, md.H_OUT).sum(axis=1) for i in retained]
        sums_p = [tr_p.get(i, md.H_OUT).sum(axis=1) for i in retained]
        return sums_o, sums_p, x.shape[0]

    results = ordered_map(one_sample, calib.pairs(), threads)
    d = original.config.d_model
    acc_o = {i: np.zeros(d) for i in retained}
    acc_p = {i: np.zeros(d) for i in retained}
    tokens = 0
    for sums_o, sums_p, t_len in results:    # fixed sample-index order
        tokens += t_len
        for i, so, sp in zip(retained, sums_o, sums_p):
            acc_o[i] += so
            acc_p[i] += sp
    deltas = {}
    means = {} if keep_means else None
    for i in retained:
        mo, mp = acc_o[i] / tokens, acc_p[i] / tokens
        deltas[i] = float(np.linalg.norm(mo - mp))
        if keep_means:
            means[i] = (mo, mp)
    return DriftReport(deltas=deltas, removed=tuple(sorted(pruned.removed)),
                       tokens_used=tokens, mean_vectors=means)


def select_compensation_targets(report: DriftReport, strategy: str,
                                z: int = 1) -> list[int]:
    """Compensation layer choice.

    max_drift: the Z most-drifted retained layers, descending drift, ties
    toward the lower index. local: for each pruned layer, its nearest
    preceding retained layer (the first retained layer when nothing
    precedes), deduplicated in pruned-index order.
    """
    if strategy == MAX_DRIFT:
        if not 1 <= z <= len(report.deltas):
            raise InputError(
                f"Z must lie in [1, {len(report.deltas)}], got {z}")
        return [i for i, _ in report.ranked()[:z]]
    if strategy == LOCAL:
        retained = sorted(report.deltas)
        if not retained:
            raise InputError("local strategy requires retained layers")
        chosen: list[int] = []
        for r in sorted(report.removed):
            preceding = [i for i in retained if i < r]
            pick = preceding[-1] if preceding else retained[0]
            if pick not in chosen:
                chosen.append(pick)
        return chosen
    raise InputError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def write_drift_csv(report: DriftReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer_index", "delta"])
        for i in sorted(report.deltas):
            writer.writerow([i, repr(report.deltas[i])])
