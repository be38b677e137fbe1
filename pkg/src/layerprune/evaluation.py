"""Held-out perplexity, forward-pass micro-benchmarks, and the comparison grid."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import build_calibration
from .compensation import (apply_solution, capture_problem, solve_closed_form,
                           solve_iterative)
from .corpus import corpus_sha256
from .drift import MAX_DRIFT, compute_drift, select_compensation_targets
from .errors import InputError
from .importance import GRAD_NORM, METRICS
from .model import TransformerModel, cross_entropy, forward
from .pruning import ITERATIVE, ONE_SHOT, compute_K, prune_iterative, prune_one_shot
from .runtime import ordered_map


@dataclass(frozen=True)
class EvalResult:
    perplexity: float
    tokens_evaluated: int
    segment_length: int
    corpus: str

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "tokens_evaluated": self.tokens_evaluated,
            "segment_length": self.segment_length,
            "corpus": self.corpus,
        }


def eval_perplexity(model: TransformerModel, corpus: np.ndarray, t_eval: int,
                    threads: int = 1, max_segments: int | None = None,
                    corpus_id: str = "") -> EvalResult:
    """exp of the token-weighted mean NLL over non-overlapping segments.

    Segments tile the corpus at stride t_eval; each consumes one extra
    lookahead token for its final target, and scores t_eval - 1 positions.
    """
    if t_eval < 2:
        raise InputError("segment length must be at least 2")
    if t_eval > model.config.max_seq:
        raise InputError(
            f"segment length {t_eval} exceeds model max_seq {model.config.max_seq}")
    n_seg = (corpus.shape[0] - 1) // t_eval
    if n_seg < 1:
        raise InputError(
            f"corpus has {corpus.shape[0]} tokens, need at least {t_eval + 1}")
    if max_segments is not None:
        n_seg = min(n_seg, max_segments)
    windows = [corpus[s * t_eval: s * t_eval + t_eval + 1] for s in range(n_seg)]

    def one_segment(w):
        logits, _ = forward(model, w[:-1])
        return cross_entropy(logits, w[1:]).item()

    losses = ordered_map(one_segment, windows, threads)
    mean_nll = sum(losses) / n_seg    # every segment scores t_eval - 1 tokens
    return EvalResult(
        perplexity=float(np.exp(mean_nll)),
        tokens_evaluated=n_seg * (t_eval - 1),
        segment_length=t_eval,
        corpus=corpus_id or f"sha256:{corpus_sha256(corpus)[:16]}",
    )


@dataclass(frozen=True)
class BenchResult:
    tokens_per_second: float
    latency_ms: float
    layers_present: int
    repetitions: int
    warmup: int
    batch: int
    seq: int

    def to_dict(self) -> dict:
        return {
            "tokens_per_second": self.tokens_per_second,
            "latency_ms": self.latency_ms,
            "layers_present": self.layers_present,
            "repetitions": self.repetitions,
            "warmup": self.warmup,
            "batch": self.batch,
            "seq": self.seq,
        }


def bench_forward(model: TransformerModel, batch: int = 4, seq: int = 64,
                  reps: int = 5, warmup: int = 2, seed: int = 0) -> BenchResult:
    """Median wall time of a fixed batch of forwards, single-threaded.

    Affinity is pinned to one CPU for the duration when the platform
    supports it, then restored.
    """
    if reps < 3:
        raise InputError("benchmarking requires at least 3 repetitions")
    seq = min(seq, model.config.max_seq)
    rng = np.random.default_rng(seed)
    sequences = [rng.integers(0, model.config.vocab_size, size=seq)
                 for _ in range(batch)]

    def one_rep() -> float:
        t0 = time.perf_counter()
        for tokens in sequences:
            forward(model, tokens)
        return time.perf_counter() - t0

    old_affinity = None
    if hasattr(os, "sched_getaffinity"):
        old_affinity = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(old_affinity)})
    try:
        for _ in range(warmup):
            one_rep()
        times = sorted(one_rep() for _ in range(reps))
    finally:
        if old_affinity is not None:
            os.sched_setaffinity(0, old_affinity)
    median = times[len(times) // 2] if reps % 2 else (
        times[reps // 2 - 1] + times[reps // 2]) / 2
    return BenchResult(
        tokens_per_second=batch * seq / median,
        latency_ms=median * 1e3,
        layers_present=len(model.layers),
        repetitions=reps, warmup=warmup, batch=batch, seq=seq,
    )


@dataclass(frozen=True)
class CellSpec:
    metric: str
    mode: str
    compensate: bool

    @property
    def cell_id(self) -> str:
        comp = "comp" if self.compensate else "plain"
        return f"{self.metric}/{self.mode}/{comp}"


@dataclass(frozen=True)
class CompareConfig:
    cells: tuple[CellSpec, ...]
    seeds: tuple[int, ...]
    calib_n: int = 16
    calib_t: int = 48
    ratio: float = 0.25
    lam: float = 1e-3
    z: int = 1
    side: str = "left"
    target: str = "W_down"
    solver: str = "closed-form"
    solver_lr: float = 1e-3
    solver_steps: int = 20_000
    eval_seq: int = 48
    max_eval_segments: int | None = 200


def default_grid() -> tuple[CellSpec, ...]:
    cells = []
    for metric in ("grad_norm", "block_influence", "loss_delta"):
        for mode in (ITERATIVE, ONE_SHOT):
            for compensate in (False, True):
                cells.append(CellSpec(metric, mode, compensate))
    return tuple(cells)


def minimal_grid() -> tuple[CellSpec, ...]:
    return (CellSpec(GRAD_NORM, ITERATIVE, False),
            CellSpec(GRAD_NORM, ITERATIVE, True))


GRIDS = {"default": default_grid, "minimal": minimal_grid}


@dataclass
class CompareReport:
    rows: list[dict]
    summary: list[dict]
    tallies: dict
    manifest: dict
    errors: list[dict] = field(default_factory=list)


def run_cell(model: TransformerModel, calib_corpus: np.ndarray,
             heldout: np.ndarray, cell: CellSpec, seed: int,
             cfg: CompareConfig, threads: int = 1) -> dict:
    """Prune (optionally compensate) and evaluate one grid cell for one seed."""
    if cell.metric not in METRICS:
        raise InputError(f"unknown metric {cell.metric!r}")
    calib = build_calibration(calib_corpus, cfg.calib_n, cfg.calib_t, seed)
    k = compute_K(len(model.layers), cfg.ratio)
    prune_fn = prune_iterative if cell.mode == ITERATIVE else prune_one_shot
    pruned, run = prune_fn(model, calib, k, cell.metric, seed=seed,
                           threads=threads)
    row = {
        "cell": cell.cell_id, "metric": cell.metric, "mode": cell.mode,
        "compensated": cell.compensate, "seed": seed,
        "removed_layers": run.removed_joined(),
        "forward_passes": run.forward_passes,
        "backward_passes": run.backward_passes,
    }
    final = pruned
    if cell.compensate:
        drift = compute_drift(model, pruned, calib, threads=threads)
        targets = select_compensation_targets(drift, MAX_DRIFT, cfg.z)
        for layer in targets:
            problem = capture_problem(model, final, calib, layer,
                                      side=cfg.side, target=cfg.target,
                                      lam=cfg.lam, threads=threads)
            if cfg.solver == "closed-form":
                sol = solve_closed_form(problem)
            else:
                sol = solve_iterative(problem, lr=cfg.solver_lr,
                                      steps=cfg.solver_steps, seed=seed)
            final = apply_solution(final, sol)
        row["compensated_layers"] = ",".join(str(i) for i in targets)
    result = eval_perplexity(final, heldout, cfg.eval_seq, threads=threads,
                             max_segments=cfg.max_eval_segments)
    row["perplexity"] = result.perplexity
    row["tokens_evaluated"] = result.tokens_evaluated
    return row


def compare_runs(model: TransformerModel, calib_corpus: np.ndarray,
                 heldout: np.ndarray, cfg: CompareConfig,
                 threads: int = 1) -> CompareReport:
    """Full grid sweep; cell failures are recorded and the grid continues."""
    rows: list[dict] = []
    errors: list[dict] = []
    for cell in cfg.cells:
        for seed in cfg.seeds:
            try:
                rows.append(run_cell(model, calib_corpus, heldout, cell,
                                     seed, cfg, threads))
            except Exception as exc:  # noqa: BLE001 - grid must continue
                errors.append({"cell": cell.cell_id, "seed": seed,
                               "error": f"{type(exc).__name__}: {exc}"})
    summary = _summarize(cfg, rows)
    tallies = _tally(cfg, rows)
    manifest = {
        "cells": [c.cell_id for c in cfg.cells],
        "seeds": list(cfg.seeds),
        "calib_n": cfg.calib_n, "calib_t": cfg.calib_t,
        "ratio": cfg.ratio, "lambda": cfg.lam, "z": cfg.z,
        "side": cfg.side, "target": cfg.target, "solver": cfg.solver,
        "eval_seq": cfg.eval_seq,
        "calib_corpus_sha256": corpus_sha256(calib_corpus),
        "heldout_corpus_sha256": corpus_sha256(heldout),
    }
    return CompareReport(rows=rows, summary=summary, tallies=tallies,
                         manifest=manifest, errors=errors)


def _median(values: list[float]) -> float:
    vals = sorted(values)
    n = len(vals)
    return vals[n // 2] if n % 2 else (vals[n // 2 - 1] + vals[n // 2]) / 2


def _summarize(cfg: CompareConfig, rows: list[dict]) -> list[dict]:
    out = []
    for cell in cfg.cells:
        cell_rows = [r for r in rows if r["cell"] == cell.cell_id]
        if not cell_rows:
            continue
        out.append({
            "cell": cell.cell_id,
            "median_perplexity": _median([r["perplexity"] for r in cell_rows]),
            "mean_forward_passes": sum(r["forward_passes"] for r in cell_rows)
            / len(cell_rows),
            "mean_backward_passes": sum(r["backward_passes"] for r in cell_rows)
            / len(cell_rows),
            "seeds": len(cell_rows),
        })
    return out


def _tally(cfg: CompareConfig, rows: list[dict]) -> dict:
    """Win/loss/tie counts for each directional claim the grid can answer."""
    by_key = {(r["cell"], r["seed"]): r for r in rows}

    def pair_tally(id_a, id_b, seeds):
        wins = losses = ties = 0
        for s in seeds:
            a, b = by_key.get((id_a, s)), by_key.get((id_b, s))
            if a is None or b is None:
                continue
            if a["perplexity"] < b["perplexity"]:
                wins += 1
            elif a["perplexity"] > b["perplexity"]:
                losses += 1
            else:
                ties += 1
        return {"wins": wins, "losses": losses, "ties": ties}

    tallies: dict = {"compensation_helps": {}, "iterative_beats_one_shot": {},
                     "grad_norm_cheaper_than_loss_delta": {}}
    cell_ids = {c.cell_id for c in cfg.cells}
    for metric in {c.metric for c in cfg.cells}:
        for mode in {c.mode for c in cfg.cells if c.metric == metric}:
            plain = f"{metric}/{mode}/plain"
            comp = f"{metric}/{mode}/comp"
            if plain in cell_ids and comp in cell_ids:
                tallies["compensation_helps"][f"{metric}/{mode}"] = pair_tally(
                    comp, plain, cfg.seeds)
        for comp in ("plain", "comp"):
            it_id = f"{metric}/{ITERATIVE}/{comp}"
            os_id = f"{metric}/{ONE_SHOT}/{comp}"
            if it_id in cell_ids and os_id in cell_ids:
                tallies["iterative_beats_one_shot"][f"{metric}/{comp}"] = (
                    pair_tally(it_id, os_id, cfg.seeds))
    gn_rows = [r for r in rows if r["metric"] == GRAD_NORM]
    ld_rows = [r for r in rows if r["metric"] == "loss_delta"]
    if gn_rows and ld_rows:
        gn_cost = sum(r["forward_passes"] + r["backward_passes"]
                      for r in gn_rows) / len(gn_rows)
        ld_cost = sum(r["forward_passes"] + r["backward_passes"]
                      for r in ld_rows) / len(ld_rows)
        tallies["grad_norm_cheaper_than_loss_delta"] = {
            "grad_norm_mean_passes": gn_cost,
            "loss_delta_mean_passes": ld_cost,
            "holds": gn_cost < ld_cost,
        }
    return tallies
