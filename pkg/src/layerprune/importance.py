"""Per-layer importance metrics.

The primary metric scores a layer by the calibration-set mean of the summed
Frobenius norms of the loss gradient over all nine of its learnable tensors
(four attention projections, two norm gains, three FFN projections). One
forward-backward pass per sample covers every layer at once, so each pruning
decision costs N passes regardless of depth.

Two baselines are included for the comparison harness: input-output cosine
similarity ("block influence", one forward per sample) and mask-and-measure
loss deltas (one bypassed forward per retained layer per sample, the
quadratic-cost approach). A seeded random metric serves as a control.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model as md
from .calibration import CalibrationSet
from .errors import InputError
from .model import TransformerModel, cross_entropy, forward, remove_layer, run_backward
from .runtime import ordered_map
from .tensor import Tape, frobenius_norm

GRAD_NORM = "grad_norm"
BLOCK_INFLUENCE = "block_influence"
LOSS_DELTA = "loss_delta"
RANDOM = "random"
METRICS = (GRAD_NORM, BLOCK_INFLUENCE, LOSS_DELTA, RANDOM)


@dataclass
class ImportanceScores:
    metric: str
    scores: dict[int, float]
    n_samples_used: int
    wall_time: float
    forward_passes: int = 0
    backward_passes: int = 0
    excluded_tokens: int = 0

    def ranked(self) -> list[tuple[int, float]]:
        """Layers ordered worst-first: ascending score, ties by lower index."""
        return sorted(self.scores.items(), key=lambda kv: (kv[1], kv[0]))

    def to_dict(self) -> dict:
        # wall_time deliberately excluded: reports must be byte-stable
        return {
            "metric": self.metric,
            "scores": {str(i): s for i, s in sorted(self.scores.items())},
            "n_samples_used": self.n_samples_used,
            "forward_passes": self.forward_passes,
            "backward_passes": self.backward_passes,
            "excluded_tokens": self.excluded_tokens,
        }


def _check_inputs(model: TransformerModel, calib: CalibrationSet) -> None:
    if not model.layers:
        raise InputError("importance scoring requires at least one retained layer")
    if calib.n < 1:
        raise InputError("importance scoring requires a non-empty calibration set")


def score_grad_norm(model: TransformerModel, calib: CalibrationSet,
                    threads: int = 1) -> ImportanceScores:
    """Mean summed gradient magnitude per layer; N forward-backward passes."""
    _check_inputs(model, calib)
    t0 = time.perf_counter()
    f0, b0 = md.PASS_COUNTERS.snapshot()
    retained = model.retained_indices

    def one_sample(pair):
        x, y = pair
        tape = Tape()
        logits, _ = forward(model, x, tape=tape)
        grads = run_backward(tape, cross_entropy(logits, y))
        return [
            sum(frobenius_norm(grads[f"layers.{i}.{t}"])
                for t in md.LAYER_TENSOR_NAMES)
            for i in retained
        ]

    per_sample = ordered_map(one_sample, calib.pairs(), threads)
    sums = [0.0] * len(retained)
    for sample in per_sample:           # fixed sample-index order
        for j, g in enumerate(sample):
            sums[j] += g
    f1, b1 = md.PASS_COUNTERS.snapshot()
    return ImportanceScores(
        metric=GRAD_NORM,
        scores={i: s / calib.n for i, s in zip(retained, sums)},
        n_samples_used=calib.n,
        wall_time=time.perf_counter() - t0,
        forward_passes=f1 - f0, backward_passes=b1 - b0,
    )


def score_block_influence(model: TransformerModel, calib: CalibrationSet,
                          threads: int = 1) -> ImportanceScores:
    """1 minus the token-mean cosine between each layer's input and output.

    Tokens whose input or output vector has zero norm are excluded and
    counted; a layer acting as the identity scores exactly 0.
    """
    _check_inputs(model, calib)
    t0 = time.perf_counter()
    f0, b0 = md.PASS_COUNTERS.snapshot()
    retained = model.retained_indices
    cap = md.capture_all(model, md.H_IN, md.H_OUT)

    def one_sample(pair):
        x, _ = pair
        _, trace = forward(model, x, capture=cap)
        sums, counts, excluded = [], [], 0
        for i in retained:
            h_in = trace.get(i, md.H_IN)
            h_out = trace.get(i, md.H_OUT)
            nin = np.linalg.norm(h_in, axis=0)
            nout = np.linalg.norm(h_out, axis=0)
            ok = (nin > 0) & (nout > 0)
            excluded += int(np.sum(~ok))
            cos = np.sum(h_in[:, ok] * h_out[:, ok], axis=0) / (nin[ok] * nout[ok])
            sums.append(float(np.sum(cos)))
            counts.append(int(np.sum(ok)))
        return sums, counts, excluded

    per_sample = ordered_map(one_sample, calib.pairs(), threads)
    total = [0.0] * len(retained)
    n_tok = [0] * len(retained)
    excluded = 0
    for sums, counts, exc in per_sample:
        excluded += exc
        for j in range(len(retained)):
            total[j] += sums[j]
            n_tok[j] += counts[j]
    scores = {}
    for j, i in enumerate(retained):
        if n_tok[j] == 0:
            raise InputError(f"all tokens excluded for layer {i} (zero-norm streams)")
        scores[i] = 1.0 - total[j] / n_tok[j]
    f1, b1 = md.PASS_COUNTERS.snapshot()
    return ImportanceScores(
        metric=BLOCK_INFLUENCE, scores=scores, n_samples_used=calib.n,
        wall_time=time.perf_counter() - t0,
        forward_passes=f1 - f0, backward_passes=b1 - b0,
        excluded_tokens=excluded,
    )


def _mean_loss(model: TransformerModel, calib: CalibrationSet,
               threads: int) -> float:
    def one_sample(pair):
        x, y = pair
        logits, _ = forward(model, x)
        return cross_entropy(logits, y).item()

    losses = ordered_map(one_sample, calib.pairs(), threads)
    return sum(losses) / calib.n


def score_loss_delta(model: TransformerModel, calib: CalibrationSet,
                     threads: int = 1) -> ImportanceScores:
    """Mask-and-measure baseline: loss increase when each layer is bypassed.

    Costs (L_retained + 1) * N forward passes per call. Negative deltas are
    reported as-is; bypassing a layer may reduce the loss.
    """
    _check_inputs(model, calib)
    t0 = time.perf_counter()
    f0, b0 = md.PASS_COUNTERS.snapshot()
    base = _mean_loss(model, calib, threads)
    scores = {}
    for i in model.retained_indices:
        scores[i] = _mean_loss(remove_layer(model, i), calib, threads) - base
    f1, b1 = md.PASS_COUNTERS.snapshot()
    return ImportanceScores(
        metric=LOSS_DELTA, scores=scores, n_samples_used=calib.n,
        wall_time=time.perf_counter() - t0,
        forward_passes=f1 - f0, backward_passes=b1 - b0,
    )


def score_random(model: TransformerModel, calib: CalibrationSet,
                 seed: int = 0, threads: int = 1) -> ImportanceScores:
    """Seeded uniform scores; the control arm of the comparison grid."""
    _check_inputs(model, calib)
    rng = np.random.default_rng(seed)
    values = rng.random(len(model.retained_indices))
    return ImportanceScores(
        metric=RANDOM,
        scores={i: float(v) for i, v in zip(model.retained_indices, values)},
        n_samples_used=calib.n, wall_time=0.0,
    )


def get_metric(name: str, seed: int = 0, threads: int = 1):
    """Resolve a metric name to a (model, calib) -> ImportanceScores callable."""
    if name == GRAD_NORM:
        return lambda m, c: score_grad_norm(m, c, threads)
    if name == BLOCK_INFLUENCE:
        return lambda m, c: score_block_influence(m, c, threads)
    if name == LOSS_DELTA:
        return lambda m, c: score_loss_delta(m, c, threads)
    if name == RANDOM:
        return lambda m, c: score_random(m, c, seed, threads)
    raise InputError(f"unknown importance metric {name!r}; choose from {METRICS}")
