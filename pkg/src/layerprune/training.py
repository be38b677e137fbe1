"""Adam pre-training of the toy transformer on a byte corpus.

Pruning on random weights is meaningless, so the toolkit trains its own
small model first. Per-sample gradients within a batch may be computed in
parallel but are always reduced in sample-index order; given equal
(seed, corpus, config) the final checkpoint is byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError
from .model import TransformerModel, cross_entropy, forward, run_backward
from .runtime import ordered_map
from .tensor import Tape


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch: int = 8
    seq_len: int = 48
    lr: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InputError("steps must be >= 0")
        if self.batch < 1 or self.seq_len < 2:
            raise InputError("batch must be >= 1 and seq_len >= 2")
        if not self.lr > 0:
            raise InputError("learning rate must be positive")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise InputError("Adam betas must lie in (0, 1)")


def train(model: TransformerModel, corpus: np.ndarray, cfg: TrainConfig,
          threads: int = 1) -> tuple[TransformerModel, list[tuple[int, float]]]:
    """Minimize next-token cross-entropy; returns the model and loss curve."""
    if corpus.shape[0] < cfg.seq_len + 1:
        raise InputError(
            f"corpus has {corpus.shape[0]} tokens, need at least seq_len+1 = "
            f"{cfg.seq_len + 1}")
    if cfg.seq_len > model.config.max_seq:
        raise InputError(
            f"seq_len {cfg.seq_len} exceeds model max_seq {model.config.max_seq}")
    if cfg.steps == 0:
        return model, []

    rng = np.random.default_rng(cfg.seed)
    params = {name: arr.copy() for name, arr in model.parameters().items()}
    names = list(params)
    adam_m = {n: np.zeros_like(params[n]) for n in names}
    adam_v = {n: np.zeros_like(params[n]) for n in names}
    b1, b2 = cfg.adam_betas
    work = model.with_parameters(params)
    curve: list[tuple[int, float]] = []
    n_starts = corpus.shape[0] - cfg.seq_len

    for step in range(1, cfg.steps + 1):
        starts = rng.integers(0, n_starts, size=cfg.batch)
        windows = [corpus[s:s + cfg.seq_len + 1] for s in starts]

        def one_sample(window):
            tape = Tape()
            logits, _ = forward(work, window[:-1], tape=tape)
            loss = cross_entropy(logits, window[1:])
            return loss.item(), run_backward(tape, loss)

        results = ordered_map(one_sample, windows, threads)

        mean_loss = 0.0
        grads = {n: np.zeros_like(params[n]) for n in names}
        for loss_val, sample_grads in results:   # fixed sample-index order
            mean_loss += loss_val
            for n in names:
                grads[n] += sample_grads[n]
        mean_loss /= cfg.batch
        if not np.isfinite(mean_loss):
            raise NumericError(f"non-finite training loss at step {step}")
        curve.append((step, mean_loss))

        sq_sum = 0.0
        for n in names:
            grads[n] /= cfg.batch
            sq_sum += float(np.sum(grads[n] * grads[n]))
        gnorm = np.sqrt(sq_sum)
        if gnorm > cfg.clip_norm:
            factor = cfg.clip_norm / gnorm
            for n in names:
                grads[n] *= factor

        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        for n in names:
            g = grads[n]
            adam_m[n] = b1 * adam_m[n] + (1 - b1) * g
            adam_v[n] = b2 * adam_v[n] + (1 - b2) * g * g
            params[n] = params[n] - cfg.lr * (adam_m[n] / c1) / (
                np.sqrt(adam_v[n] / c2) + cfg.adam_eps)
        work = work.with_parameters(params)

    return work, curve
