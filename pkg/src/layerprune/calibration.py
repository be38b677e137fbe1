"""Calibration set construction.

N disjoint windows of T+1 tokens are drawn uniformly at random from the
corpus (shuffled stride positions, so windows never overlap). Window j
yields the input sequence x = window[0:T] and the target sequence
y = window[1:T+1], i.e. the input shifted left by one token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import corpus_sha256
from .errors import InputError


@dataclass(frozen=True)
class CalibrationSet:
    samples: tuple[np.ndarray, ...]   # N input sequences, T tokens each
    targets: tuple[np.ndarray, ...]   # matching shifted target sequences
    n: int
    t: int
    seed: int
    source: str

    def __post_init__(self):
        if len(self.samples) != self.n or len(self.targets) != self.n:
            raise InputError("calibration sample count does not match N")
        for x, y in zip(self.samples, self.targets):
            if x.shape != (self.t,) or y.shape != (self.t,):
                raise InputError("calibration sample length does not match T")

    def pairs(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        return tuple(zip(self.samples, self.targets))


def build_calibration(corpus: np.ndarray, n: int, t: int, seed: int,
                      source: str = "") -> CalibrationSet:
    if n < 1 or t < 2:
        raise InputError("calibration requires N >= 1 and T >= 2")
    window = t + 1
    required = n * window
    if corpus.shape[0] < required:
        raise InputError(
            f"corpus has {corpus.shape[0]} tokens but N={n}, T={t} "
            f"requires at least {required}")
    n_slots = corpus.shape[0] // window
    rng = np.random.default_rng(seed)
    starts = rng.permutation(n_slots)[:n] * window
    samples = []
    targets = []
    for s in starts:
        w = corpus[s:s + window]
        samples.append(_readonly(w[:t]))
        targets.append(_readonly(w[1:]))
    return CalibrationSet(
        samples=tuple(samples), targets=tuple(targets),
        n=n, t=t, seed=seed,
        source=source or f"sha256:{corpus_sha256(corpus)[:16]}",
    )


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr)
    out.setflags(write=False)
    return out
