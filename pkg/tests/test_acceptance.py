"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. Full-scale numbers are not
reproducible at desk scale; these checks are property-based and directional,
pinned to the session-trained 8-layer toy model where a trained model is
required.
"""

import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from layerprune import model as md
from layerprune import tensor as tc
from layerprune.calibration import build_calibration
from layerprune.compensation import (LEFT, RIGHT, CompensationProblem,
                                     apply_solution, capture_problem,
                                     solve_closed_form, solve_iterative)
from layerprune.drift import MAX_DRIFT, compute_drift, select_compensation_targets
from layerprune.evaluation import bench_forward, eval_perplexity
from layerprune.model import (ModelConfig, cross_entropy, forward, init_model,
                              remove_layer)
from layerprune.pruning import prune_iterative, prune_one_shot
from layerprune.tensor import Tape, ridge_solve

SEEDS = tuple(range(10))
CALIB_N, CALIB_T = 16, 48
EVAL_SEQ, EVAL_SEGMENTS = 48, 150
LAMBDA = 1e-3


def report(criterion: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {criterion:2d} {status}: {detail}",
          file=sys.stderr)
    assert ok, f"criterion {criterion}: {detail}"


def zero_projections(model, original_index):
    layer = model.layer(original_index)
    for name in ("W_Q", "W_K", "W_V", "W_O", "W_gate", "W_up", "W_down"):
        layer = layer.with_weight(name, np.zeros_like(getattr(layer, name)))
    return replace(model, layers=tuple(
        (i, layer if i == original_index else l) for i, l in model.layers))


def median(values):
    vals = sorted(values)
    n = len(vals)
    return vals[n // 2] if n % 2 else (vals[n // 2 - 1] + vals[n // 2]) / 2


@pytest.fixture(scope="module")
def seed_runs(trained_toy8, corpus_split):
    """Per-seed prune + drift + target, shared by criteria 7, 8, 10 and 11."""
    train_tokens, _ = corpus_split
    runs = []
    for seed in SEEDS:
        calib = build_calibration(train_tokens, CALIB_N, CALIB_T, seed)
        pruned, run = prune_iterative(trained_toy8, calib, 2, "grad_norm")
        drift = compute_drift(trained_toy8, pruned, calib)
        target = select_compensation_targets(drift, MAX_DRIFT, 1)[0]
        runs.append((seed, calib, pruned, run, target))
    return runs


@pytest.fixture(scope="module")
def heldout_ppl(corpus_split):
    _, heldout = corpus_split

    def compute(model):
        return eval_perplexity(model, heldout, EVAL_SEQ,
                               max_segments=EVAL_SEGMENTS).perplexity

    return compute


class TestCriterion01GradientCorrectness:
    def test_backward_matches_finite_differences(self):
        cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ffn=96,
                          vocab_size=41, max_seq=16)
        model = init_model(cfg, seed=11)
        rng = np.random.default_rng(123)
        tokens = rng.integers(0, 41, size=12)
        targets = np.concatenate([tokens[1:], rng.integers(0, 41, size=1)])

        tape = Tape()
        logits, _ = forward(model, tokens, tape=tape)
        grads = tc.backward(tape, cross_entropy(logits, targets))

        base = {k: v.copy() for k, v in model.parameters().items()}

        def loss_at(params):
            m = model.with_parameters(params)
            lg, _ = forward(m, tokens)
            return cross_entropy(lg, targets).item()

        h = 1e-5
        worst = 0.0
        checked = 0
        for name, arr in base.items():
            flat_coords = rng.choice(arr.size, size=min(100, arr.size),
                                     replace=False)
            for flat in flat_coords:
                idx = np.unravel_index(flat, arr.shape)
                pert = arr.copy()
                pert[idx] += h
                up = loss_at({**base, name: pert})
                pert[idx] -= 2 * h
                down = loss_at({**base, name: pert})
                fd = (up - down) / (2 * h)
                an = grads[name][idx]
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                worst = max(worst, rel)
                checked += 1
                assert rel < 1e-4, (name, idx, fd, an)
        report(1, worst < 1e-4,
               f"{checked} coordinates over {len(base)} tensors, "
               f"worst relative error {worst:.2e} < 1e-4")


class TestCriterion02FisherIdentity:
    def test_ce_gradient_equals_negated_score_function(self):
        rng = np.random.default_rng(321)
        worst = 0.0
        for trial in range(20):
            cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ffn=24,
                              vocab_size=13, max_seq=12)
            model = init_model(cfg, seed=trial)
            t = 7
            x = rng.integers(0, 13, size=t)
            y = np.concatenate([x[1:], rng.integers(0, 13, size=1)])

            tape_a = Tape()
            logits_a, _ = forward(model, x, tape=tape_a)
            loss_sum = tc.scale(cross_entropy(logits_a, y), float(t - 1))
            grads_a = tc.backward(tape_a, loss_sum)

            tape_b = Tape()
            logits_b, _ = forward(model, x, tape=tape_b)
            log_probs = tc.log_softmax_cols(tc.cols(logits_b, 0, t - 1))
            neg_log_lik = tc.scale(
                tc.sum_all(tc.pick_rows(log_probs, y[:t - 1])), -1.0)
            grads_b = tc.backward(tape_b, neg_log_lik)

            for name in grads_a:
                diff = float(np.max(np.abs(grads_a[name] - grads_b[name])))
                worst = max(worst, diff)
        report(2, worst < 1e-12,
               f"20 instances, max gradient deviation {worst:.2e} < 1e-12")


class TestCriterion03PlantedRedundancy:
    def test_zeroed_layer_removed_every_seed(self, trained_toy8, corpus_split):
        train_tokens, _ = corpus_split
        planted = zero_projections(trained_toy8, 3)
        hits = 0
        for seed in range(10):
            calib = build_calibration(train_tokens, 8, CALIB_T, 100 + seed)
            _, run = prune_iterative(planted, calib, 1, "grad_norm")
            hits += run.removed_order == (3,)
        report(3, hits == 10,
               f"grad_norm iterative K=1 removed the zeroed layer in {hits}/10 seeds")


class TestCriterion04DecisionCost:
    def test_pass_counters(self, trained_toy8, corpus_split):
        train_tokens, _ = corpus_split
        n = 6
        calib = build_calibration(train_tokens, n, CALIB_T, 5)
        _, run_g = prune_iterative(trained_toy8, calib, 2, "grad_norm")
        grad_ok = (run_g.forward_passes == 2 * n
                   and run_g.backward_passes == 2 * n)
        _, run_l = prune_iterative(trained_toy8, calib, 2, "loss_delta")
        # first decision scores 8 retained layers, second scores 7
        expected = (8 + 1) * n + (7 + 1) * n
        loss_ok = (run_l.forward_passes == expected
                   and run_l.backward_passes == 0)
        report(4, grad_ok and loss_ok,
               f"grad_norm used exactly N={n} forward-backward per decision; "
               f"loss_delta used (L_retained+1)*N = {expected} forwards total")


class TestCriterion05ClosedFormOptimality:
    def test_ridge_beats_iterative_and_is_stationary(self):
        rng = np.random.default_rng(99)
        d, k, n = 8, 32, 64
        worst_gap = -np.inf
        worst_resid = 0.0
        for _ in range(50):
            w_down = rng.standard_normal((d, k)) / np.sqrt(k)
            x_down = rng.standard_normal((k, n))
            x_f = rng.standard_normal((d, n))
            x_o = x_f + w_down @ x_down + 0.3 * rng.standard_normal((d, n))
            p = CompensationProblem(
                layer=0, side=LEFT, target="W_down", weight=w_down,
                inputs=x_down, reference=x_o - x_f, lam=LAMBDA,
                x_down=x_down, x_f=x_f, x_o=x_o)
            closed = solve_closed_form(p)
            iterated = solve_iterative(p, lr=1e-3, steps=500)
            worst_gap = max(worst_gap,
                            closed.objective_final - iterated.objective_final)
            # stationarity of the underlying ridge solve at effective lambda
            b = w_down @ x_down
            t_mat = x_o - x_f
            lam_eff = LAMBDA * n
            w = ridge_solve(b, t_mat, lam_eff).array
            resid = (w @ b - t_mat) @ b.T + lam_eff * (w - np.eye(d))
            rel = tc.frobenius_norm(resid) / (1 + tc.frobenius_norm(t_mat))
            worst_resid = max(worst_resid, rel)
        ok = worst_gap <= 1e-8 and worst_resid < 1e-8
        report(5, ok,
               f"50 problems: max objective excess {worst_gap:.2e} <= 1e-8, "
               f"max stationarity residual {worst_resid:.2e} < 1e-8")


class TestCriterion06FoldExactness:
    def test_folded_equals_interposed(self, trained_toy8):
        rng = np.random.default_rng(17)
        d = trained_toy8.config.d_model
        worst = 0.0
        for trial in range(5):
            w_prime = np.eye(d) + 0.2 * rng.standard_normal((d, d))
            layer = trained_toy8.retained_indices[2 + trial % 4]
            folded = md.fold_compensation(trained_toy8, layer, w_prime)
            tokens = rng.integers(0, 257, size=32)
            a, _ = forward(folded, tokens)
            b, _ = forward(trained_toy8, tokens,
                           interpose={(layer, md.FFN_OUT): w_prime})
            worst = max(worst, float(np.max(np.abs(a.array - b.array))))
        report(6, worst < 1e-10,
               f"max abs deviation folded vs interposed {worst:.2e} < 1e-10")


class TestCriterion07CompensationEfficacy:
    def test_stage2_improves_heldout_ppl(self, trained_toy8, seed_runs,
                                         heldout_ppl):
        dense = heldout_ppl(trained_toy8)
        assert 1.0 < dense < trained_toy8.config.vocab_size
        plains, comps, strict_wins = [], [], 0
        for seed, calib, pruned, _, target in seed_runs:
            problem = capture_problem(trained_toy8, pruned, calib, target,
                                      side=LEFT, target="W_down", lam=LAMBDA)
            comp = apply_solution(pruned, solve_closed_form(problem))
            ppl_plain = heldout_ppl(pruned)
            ppl_comp = heldout_ppl(comp)
            plains.append(ppl_plain)
            comps.append(ppl_comp)
            strict_wins += ppl_comp < ppl_plain
        ok = median(comps) <= median(plains) and strict_wins >= 7
        report(7, ok,
               f"median PPL {median(plains):.4f} -> {median(comps):.4f} "
               f"with stage 2; strictly lower in {strict_wins}/10 seeds (need 7)")


class TestCriterion08LossComponentAblation:
    def test_combined_objective_generalizes(self, trained_toy8, seed_runs,
                                            heldout_ppl):
        wins = 0
        for seed, calib, pruned, _, target in seed_runs:
            p_comb = capture_problem(trained_toy8, pruned, calib, target,
                                     lam=LAMBDA)
            p_mse = capture_problem(trained_toy8, pruned, calib, target,
                                    lam=0.0)
            ppl_comb = heldout_ppl(apply_solution(pruned, solve_closed_form(p_comb)))
            ppl_mse = heldout_ppl(apply_solution(pruned, solve_closed_form(p_mse)))
            wins += ppl_comb <= ppl_mse
        report(8, wins >= 6,
               f"combined objective <= reconstruction-only held-out PPL in "
               f"{wins}/10 seeds (need 6)")


class TestCriterion09OneShotVsIterative:
    def test_coupled_redundancy_model(self, trained_toy8, corpus_split,
                                      heldout_ppl):
        # twin half-strength copies of the top layer at positions 6 and 7:
        # each twin alone looks expendable, but they matter jointly, so
        # removing one raises the survivor's score
        train_tokens, _ = corpus_split
        src = trained_toy8.layer(7)
        twin = (src.with_weight("W_O", 0.5 * src.W_O)
                .with_weight("W_down", 0.5 * src.W_down))
        twinned = replace(trained_toy8, layers=tuple(
            (i, twin if i in (6, 7) else l) for i, l in trained_toy8.layers))
        differs = it_wins = 0
        for seed in SEEDS:
            calib = build_calibration(train_tokens, CALIB_N, CALIB_T, seed)
            m_it, run_it = prune_iterative(twinned, calib, 2, "grad_norm")
            m_os, run_os = prune_one_shot(twinned, calib, 2, "grad_norm")
            differs += set(run_it.removed_order) != set(run_os.removed_order)
            it_wins += heldout_ppl(m_it) <= heldout_ppl(m_os)
        ok = differs >= 7 and it_wins >= 7
        report(9, ok,
               f"removal sets differ in {differs}/10 seeds; iterative <= "
               f"one-shot PPL in {it_wins}/10 seeds (need 7 and 7)")


class TestCriterion10LeftVsRight:
    def test_speed_and_parity(self, trained_toy8, seed_runs, heldout_ppl):
        time_wins = 0
        gaps = []
        warmed = False
        for seed, calib, pruned, _, target in seed_runs:
            p_left = capture_problem(trained_toy8, pruned, calib, target,
                                     side=LEFT, lam=LAMBDA)
            p_right = capture_problem(trained_toy8, pruned, calib, target,
                                      side=RIGHT, lam=LAMBDA)
            if not warmed:
                solve_closed_form(p_left)
                solve_closed_form(p_right)
                warmed = True

            def best_of(problem, tries=3):
                # min over tries: load transients only inflate a timing
                times = []
                for _ in range(tries):
                    t0 = time.perf_counter()
                    sol = solve_closed_form(problem)
                    times.append(time.perf_counter() - t0)
                return sol, min(times)

            sol_left, t_left = best_of(p_left)
            sol_right, t_right = best_of(p_right)
            time_wins += t_left < t_right
            ppl_left = heldout_ppl(apply_solution(pruned, sol_left))
            ppl_right = heldout_ppl(apply_solution(pruned, sol_right))
            gaps.append(abs(ppl_left - ppl_right) / ppl_right)
        ok = time_wins == 10 and median(gaps) <= 0.05
        report(10, ok,
               f"left solve faster in {time_wins}/10 trials (d=32, k=128); "
               f"median PPL gap {median(gaps) * 100:.2f}% <= 5%")


class TestCriterion11TargetMatrixAblation:
    def test_down_projection_is_best_target(self, trained_toy8, seed_runs,
                                            heldout_ppl):
        medians = {}
        for target_matrix in ("W_down", "W_up", "W_gate", "W_O"):
            ppls = []
            for seed, calib, pruned, _, target in seed_runs:
                p = capture_problem(trained_toy8, pruned, calib, target,
                                    target=target_matrix, lam=LAMBDA)
                ppls.append(heldout_ppl(apply_solution(
                    pruned, solve_closed_form(p))))
            medians[target_matrix] = median(ppls)
        best = min(medians, key=medians.get)
        detail = ", ".join(f"{k}={v:.4f}" for k, v in medians.items())
        report(11, best == "W_down", f"median held-out PPL by target: {detail}")


class TestCriterion12Throughput:
    def test_speedup_and_monotone_latency(self):
        cfg = ModelConfig(n_layers=8, d_model=64, n_heads=4, d_ffn=256,
                          vocab_size=257, max_seq=128)
        dense = init_model(cfg, seed=3)
        removed_1 = remove_layer(dense, 3)               # 12.5 percent
        removed_2 = remove_layer(removed_1, 5)           # 25 percent
        models = (dense, removed_1, removed_2)
        batch, seq = 2, 128
        rng = np.random.default_rng(0)
        sequences = [rng.integers(0, 257, size=seq) for _ in range(batch)]
        for m in models:   # warm caches
            for s in sequences:
                forward(m, s)
        # the cycles interleave the three models and each keeps its fastest
        # pass: external machine load only ever inflates a measurement, so
        # the per-model minimum over many interleaved cycles recovers each
        # model's uncontended latency
        best = [np.inf] * 3
        for _ in range(20):
            for i, m in enumerate(models):
                t0 = time.perf_counter()
                for s in sequences:
                    forward(m, s)
                best[i] = min(best[i], time.perf_counter() - t0)
        lat = [b * 1e3 for b in best]
        speedup = best[0] / best[2]
        monotone = lat[0] >= lat[1] >= lat[2]
        ok = speedup >= 1.125 and monotone
        report(12, ok,
               f"25% removal speedup {speedup:.3f}x (need >= 1.125); "
               f"latency ms {lat[0]:.1f} >= {lat[1]:.1f} >= {lat[2]:.1f}: "
               f"{'monotone' if monotone else 'NOT monotone'}")


class TestCriterion13Determinism:
    def test_cli_pipeline_bitwise_reproducible(self, tmp_path, corpus_split):
        train_tokens, heldout = corpus_split
        corpus_file = tmp_path / "c.txt"
        held_file = tmp_path / "h.txt"
        corpus_file.write_bytes(train_tokens[:20000].astype(np.uint8).tobytes())
        held_file.write_bytes(heldout[:8000].astype(np.uint8).tobytes())
        repo = Path(__file__).resolve().parent.parent
        env = {"PYTHONPATH": str(repo / "src"),
               "PATH": "/usr/bin:/bin:/usr/local/bin"}

        def run(*argv):
            proc = subprocess.run(
                [sys.executable, "-m", "layerprune.cli", *map(str, argv)],
                capture_output=True, text=True, env=env)
            assert proc.returncode == 0, proc.stderr
            return proc

        def pipeline(threads):
            run("train-toy", "--layers", 4, "--dmodel", 16, "--dffn", 48,
                "--heads", 2, "--max-seq", 32, "--corpus", corpus_file,
                "--steps", 20, "--batch", 2, "--seq-len", 16, "--seed", 9,
                "--out", tmp_path / "b.gmap", "--no-figures",
                "--threads", threads)
            run("prune", "--model", tmp_path / "b.gmap", "--ratio", 0.25,
                "--calib-corpus", corpus_file, "--calib-n", 4, "--calib-t", 16,
                "--seed", 9, "--out", tmp_path / "p.gmap",
                "--report", tmp_path / "p.json", "--no-figures",
                "--threads", threads)
            run("compensate", "--original", tmp_path / "b.gmap",
                "--pruned", tmp_path / "p.gmap", "--calib-corpus", corpus_file,
                "--calib-n", 4, "--calib-t", 16, "--seed", 9,
                "--out", tmp_path / "k.gmap", "--report", tmp_path / "k.json",
                "--no-figures", "--threads", threads)
            run("eval", "--model", tmp_path / "k.gmap", "--corpus", held_file,
                "--seq", 16, "--json", tmp_path / "e.json",
                "--threads", threads)
            names = ("b.gmap", "b_loss.csv", "p.gmap", "p.json", "k.gmap",
                     "k.json", "e.json")
            return {n: (tmp_path / n).read_bytes() for n in names}

        first = pipeline(1)
        rerun = pipeline(1)
        threaded = pipeline(2)
        mismatch = [n for n in first
                    if first[n] != rerun[n] or first[n] != threaded[n]]
        report(13, not mismatch,
               f"checkpoints and reports byte-identical over reruns and "
               f"thread counts ({len(first)} artifacts)"
               + (f"; mismatches: {mismatch}" if mismatch else ""))


class TestCriterion14DriftOracle:
    def test_matches_token_loop_and_zero_when_unpruned(self, corpus_split):
        train_tokens, _ = corpus_split
        cfg = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ffn=48,
                          vocab_size=257, max_seq=32)
        worst = 0.0
        for trial in range(3):
            model = init_model(cfg, seed=40 + trial)
            pruned = remove_layer(model, 1)
            calib = build_calibration(train_tokens, 3, 12, trial)
            rep = compute_drift(model, pruned, calib)
            cap = {i: frozenset({md.H_OUT}) for i in pruned.retained_indices}
            for i in pruned.retained_indices:
                acc_o = np.zeros(16)
                acc_p = np.zeros(16)
                count = 0
                for x, _ in calib.pairs():
                    _, tr_o = forward(model, x, capture=cap)
                    _, tr_p = forward(pruned, x, capture=cap)
                    for c in range(x.shape[0]):
                        acc_o += tr_o.get(i, md.H_OUT)[:, c]
                        acc_p += tr_p.get(i, md.H_OUT)[:, c]
                        count += 1
                oracle = float(np.linalg.norm(acc_o / count - acc_p / count))
                worst = max(worst, abs(rep.deltas[i] - oracle))
            unpruned = compute_drift(model, model, calib)
            assert all(d == 0.0 for d in unpruned.deltas.values())
        report(14, worst < 1e-10,
               f"drift matches explicit token-loop mean oracle, max deviation "
               f"{worst:.2e} < 1e-10; all deltas zero when nothing is pruned")
