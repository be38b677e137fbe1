"""Command-line pipeline: train-toy, prune, compensate, eval, bench, compare.

One binary with subcommands; every artifact is addressed by an explicit
path and all randomness flows from --seed, so any command rerun with
identical flags reproduces its outputs byte for byte. Exit codes: 0 on
success, 2 on user or input errors, 3 on numeric or solver failures.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps tiny-matrix timings stable and reruns
# bit-identical; must be set before numpy loads
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from .calibration import build_calibration  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .compensation import (SIDES, TARGETS, apply_solution,  # noqa: E402
                           capture_problem, solve_closed_form, solve_iterative)
from .corpus import corpus_sha256, load_corpus  # noqa: E402
from .drift import (MAX_DRIFT, STRATEGIES, compute_drift,  # noqa: E402
                    select_compensation_targets, write_drift_csv)
from .errors import InputError, NumericError  # noqa: E402
from .evaluation import (GRIDS, CompareConfig, bench_forward,  # noqa: E402
                         compare_runs, eval_perplexity)
from .model import init_model, ModelConfig  # noqa: E402
from .pruning import (ITERATIVE, ONE_SHOT, compute_K,  # noqa: E402
                      prune_iterative, prune_one_shot)
from .reports import (write_comparison_csv, write_loss_csv,  # noqa: E402
                      write_objective_csv, write_report, write_timings)
from .runtime import resolve_threads  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

_METRIC_FLAGS = {"grad-norm": "grad_norm", "block-influence": "block_influence",
                 "loss-delta": "loss_delta", "random": "random"}
_TARGET_FLAGS = {t.lower().replace("_", "-"): t for t in TARGETS}
_MODE_FLAGS = {"iterative": ITERATIVE, "one-shot": ONE_SHOT}


def _log(stage: str, message: str) -> None:
    print(f"[{stage}] {message}", file=sys.stderr)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: GRADMAP_THREADS or all cores)")
    p.add_argument("--no-figures", action="store_true",
                   help="skip rendering PNG figures next to reports")


def _add_calibration_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--calib-corpus", required=True, help="calibration text file")
    p.add_argument("--calib-n", type=int, default=128,
                   help="calibration samples (default 128)")
    p.add_argument("--calib-t", type=int, default=128,
                   help="tokens per calibration sample (default 128)")
    p.add_argument("--seed", type=int, default=42, help="random seed (default 42)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerprune",
        description="Layer pruning toolkit for decoder-only transformers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="pre-train the toy model on a byte corpus")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--dmodel", type=int, default=32)
    p.add_argument("--dffn", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--vocab", type=int, default=257)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--corpus", required=True, help="training text file")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=48)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--loss-csv", default=None,
                   help="loss curve CSV (default: <out>_loss.csv)")
    _add_common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("prune", help="remove the least important layers")
    p.add_argument("--model", required=True)
    p.add_argument("--ratio", type=float, default=0.25,
                   help="fraction of layers to remove (default 0.25)")
    p.add_argument("--metric", choices=sorted(_METRIC_FLAGS), default="grad-norm")
    p.add_argument("--mode", choices=sorted(_MODE_FLAGS), default="iterative")
    _add_calibration_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None,
                   help="run report JSON (default: <out>_report.json)")
    _add_common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compensate",
                       help="fit and fold a drift-compensation matrix")
    p.add_argument("--original", required=True, help="unpruned checkpoint")
    p.add_argument("--pruned", required=True, help="pruned checkpoint")
    p.add_argument("--solver", choices=("closed-form", "iterative"),
                   default="closed-form")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3,
                   help="identity-anchor weight (default 1e-3)")
    p.add_argument("--side", choices=SIDES, default="left")
    p.add_argument("--target", choices=sorted(_TARGET_FLAGS), default="w-down")
    p.add_argument("--strategy", choices=STRATEGIES, default=MAX_DRIFT)
    p.add_argument("--z", type=int, default=1,
                   help="number of layers to compensate under max drift")
    p.add_argument("--lr", type=float, default=1e-3, help="iterative solver lr")
    p.add_argument("--steps", type=int, default=20_000,
                   help="iterative solver steps")
    _add_calibration_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_compensate)

    p = sub.add_parser("eval", help="held-out perplexity")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="held-out text file")
    p.add_argument("--seq", type=int, default=128, help="segment length")
    p.add_argument("--max-segments", type=int, default=None)
    p.add_argument("--json", dest="json_out", default=None,
                   help="write the result JSON here instead of stdout")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="forward-pass throughput and latency")
    p.add_argument("--model", required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seq", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--json", dest="json_out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare",
                       help="grid sweep: metrics x modes x compensation")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", choices=sorted(GRIDS), default="default")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--held-out", required=True, help="evaluation text file")
    p.add_argument("--ratio", type=float, default=0.25)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--eval-seq", type=int, default=48)
    p.add_argument("--max-eval-segments", type=int, default=200)
    _add_calibration_flags(p)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_compare)

    return parser


def _load_model(path, flag="model"):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"--{flag}: no such file: {p}")
    return load_checkpoint(p)


def cmd_train_toy(args) -> int:
    threads = resolve_threads(args.threads)
    corpus = load_corpus(args.corpus, "corpus")
    config = ModelConfig(n_layers=args.layers, d_model=args.dmodel,
                         n_heads=args.heads, d_ffn=args.dffn,
                         vocab_size=args.vocab, max_seq=args.max_seq,
                         precision=args.precision)
    cfg = TrainConfig(steps=args.steps, batch=args.batch, seq_len=args.seq_len,
                      lr=args.lr, seed=args.seed)
    _log("train", f"{args.layers} layers, d={args.dmodel}, {args.steps} steps")
    t0 = time.perf_counter()
    model = init_model(config, seed=args.seed)
    model, curve = train(model, corpus, cfg, threads=threads)
    train_s = time.perf_counter() - t0
    model = replace(model, provenance=f"train-toy seed={args.seed} steps={args.steps}")
    save_checkpoint(model, args.out)
    loss_csv = args.loss_csv or f"{Path(args.out).with_suffix('')}_loss.csv"
    write_loss_csv(loss_csv, curve)
    if not args.no_figures and curve:
        from . import plots
        plots.plot_loss_curve(curve, f"{Path(loss_csv).with_suffix('')}.png")
    write_timings(loss_csv, {"train": train_s})
    final = curve[-1][1] if curve else float("nan")
    _log("train", f"done, final loss {final:.4f}, checkpoint {args.out}")
    return 0


def cmd_prune(args) -> int:
    threads = resolve_threads(args.threads)
    model = _load_model(args.model)
    corpus = load_corpus(args.calib_corpus, "calib-corpus")
    calib = build_calibration(corpus, args.calib_n, args.calib_t, args.seed)
    k = compute_K(len(model.layers), args.ratio)
    metric = _METRIC_FLAGS[args.metric]
    mode = _MODE_FLAGS[args.mode]
    _log("prune", f"K={k} of {len(model.layers)} layers, metric {metric}, {mode}")
    t0 = time.perf_counter()
    prune_fn = prune_iterative if mode == ITERATIVE else prune_one_shot
    pruned, run = prune_fn(model, calib, k, metric, seed=args.seed,
                           threads=threads)
    prune_s = time.perf_counter() - t0
    pruned = replace(pruned, provenance=(
        f"prune metric={metric} mode={mode} ratio={args.ratio} seed={args.seed}"))
    save_checkpoint(pruned, args.out)
    report_path = args.report or f"{Path(args.out).with_suffix('')}_report.json"
    write_report(report_path, "prune", {
        "flags": {
            "model": str(args.model), "ratio": args.ratio,
            "metric": args.metric, "mode": args.mode,
            "calib_n": args.calib_n, "calib_t": args.calib_t,
            "seed": args.seed,
        },
        "corpus_hashes": {"calibration": corpus_sha256(corpus)},
        "prune": run.to_dict(),
        "output_checkpoint": str(args.out),
    })
    write_timings(report_path, {"prune": prune_s})
    if not args.no_figures:
        from . import plots
        plots.plot_scores(run.history,
                          f"{Path(report_path).with_suffix('')}_scores.png")
    _log("prune", f"removed [{run.removed_joined()}], report {report_path}")
    return 0


def cmd_compensate(args) -> int:
    threads = resolve_threads(args.threads)
    original = _load_model(args.original, "original")
    pruned = _load_model(args.pruned, "pruned")
    corpus = load_corpus(args.calib_corpus, "calib-corpus")
    calib = build_calibration(corpus, args.calib_n, args.calib_t, args.seed)
    target = _TARGET_FLAGS[args.target]
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    drift = compute_drift(original, pruned, calib, threads=threads)
    timings["drift"] = time.perf_counter() - t0
    layers = select_compensation_targets(drift, args.strategy, args.z)
    _log("drift", f"targets {layers} under {args.strategy}")

    solutions = []
    model = pruned
    t0 = time.perf_counter()
    curves = {}
    for layer in layers:
        problem = capture_problem(original, model, calib, layer,
                                  side=args.side, target=target,
                                  lam=args.lam, threads=threads)
        if args.solver == "closed-form":
            sol = solve_closed_form(problem)
        else:
            sol = solve_iterative(problem, lr=args.lr, steps=args.steps,
                                  seed=args.seed)
            curves[layer] = sol.objective_curve
        model = apply_solution(model, sol)
        solutions.append(sol)
        _log("solve", f"layer {layer}: objective "
             f"{sol.objective_initial:.6g} -> {sol.objective_final:.6g}")
    timings["solve"] = time.perf_counter() - t0

    model = replace(model, provenance=(
        f"compensate layers={layers} side={args.side} target={target} "
        f"lambda={args.lam} solver={args.solver}"))
    save_checkpoint(model, args.out)
    report_path = args.report or f"{Path(args.out).with_suffix('')}_report.json"
    base = Path(report_path).with_suffix("")
    write_drift_csv(drift, f"{base}_drift.csv")
    for layer, curve in curves.items():
        write_objective_csv(f"{base}_objective_layer{layer}.csv", curve)
    write_report(report_path, "compensate", {
        "flags": {
            "original": str(args.original), "pruned": str(args.pruned),
            "solver": args.solver, "lambda": args.lam, "side": args.side,
            "target": args.target, "strategy": args.strategy, "z": args.z,
            "calib_n": args.calib_n, "calib_t": args.calib_t,
            "seed": args.seed,
        },
        "corpus_hashes": {"calibration": corpus_sha256(corpus)},
        "drift": drift.to_dict(),
        "selected_layers": layers,
        "solutions": [s.to_dict() for s in solutions],
        "output_checkpoint": str(args.out),
    })
    write_timings(report_path, timings)
    if not args.no_figures:
        from . import plots
        plots.plot_drift(drift, f"{base}_drift.png", selected=layers)
        for layer, curve in curves.items():
            if curve:
                plots.plot_objective_curve(
                    curve, f"{base}_objective_layer{layer}.png")
    _log("compensate", f"folded {len(solutions)} solution(s), wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    threads = resolve_threads(args.threads)
    model = _load_model(args.model)
    corpus = load_corpus(args.corpus, "corpus")
    t0 = time.perf_counter()
    result = eval_perplexity(model, corpus, args.seq, threads=threads,
                             max_segments=args.max_segments)
    eval_s = time.perf_counter() - t0
    print(f"PPL {result.perplexity!r}")
    doc = json.dumps(result.to_dict(), sort_keys=True)
    if args.json_out:
        Path(args.json_out).write_text(doc + "\n", encoding="utf-8")
        write_timings(args.json_out, {"eval": eval_s})
    else:
        print(doc)
    return 0


def cmd_bench(args) -> int:
    model = _load_model(args.model)
    result = bench_forward(model, batch=args.batch, seq=args.seq,
                           reps=args.reps, warmup=args.warmup, seed=args.seed)
    doc = json.dumps(result.to_dict(), sort_keys=True)
    print(doc)
    if args.json_out:
        Path(args.json_out).write_text(doc + "\n", encoding="utf-8")
    return 0


def cmd_compare(args) -> int:
    threads = resolve_threads(args.threads)
    model = _load_model(args.model)
    calib_corpus = load_corpus(args.calib_corpus, "calib-corpus")
    heldout = load_corpus(args.held_out, "held-out")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = CompareConfig(
        cells=GRIDS[args.grid](),
        seeds=tuple(args.seed + i for i in range(args.seeds)),
        calib_n=args.calib_n, calib_t=args.calib_t, ratio=args.ratio,
        lam=args.lam, eval_seq=args.eval_seq,
        max_eval_segments=args.max_eval_segments)
    _log("compare", f"{len(cfg.cells)} cells x {args.seeds} seeds")
    t0 = time.perf_counter()
    report = compare_runs(model, calib_corpus, heldout, cfg, threads=threads)
    compare_s = time.perf_counter() - t0
    write_comparison_csv(out_dir / "comparison.csv", report.rows)
    write_report(out_dir / "manifest.json", "compare", {"manifest": report.manifest})
    report_path = out_dir / "comparison.json"
    write_report(report_path, "compare", {
        "manifest": report.manifest,
        "summary": report.summary,
        "tallies": report.tallies,
        "errors": report.errors,
        "rows": report.rows,
    })
    write_timings(report_path, {"compare": compare_s})
    if not args.no_figures and report.summary:
        from . import plots
        plots.plot_comparison(report.summary, out_dir / "comparison.png")
    for line in report.summary:
        _log("compare", f"{line['cell']}: median PPL "
             f"{line['median_perplexity']:.4f}")
    if report.errors:
        _log("compare", f"{len(report.errors)} cell(s) failed; see report")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
