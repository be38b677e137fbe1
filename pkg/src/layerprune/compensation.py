"""Projection compensation: fit a square matrix that realigns a drifted layer.

For the down-projection the fit is exact in form: the layer output
decomposes as X_F + W_down X_down, so aligning it with the original model's
output X_O means solving

    min over W'  (1/n) ||W' (W_down X_down) - (X_O - X_F)||_F^2
               + lambda ||W' - I||_F^2

whose closed form is a ridge solve. The learned W' folds permanently into
the weight (W' @ W_down), adding zero inference cost. A right-side variant
(W_down @ W') and targets other than the down-projection are supported for
ablations; targets that sit inside nonlinearities are aligned at the matrix
output against the original model's activation at the same point, accepting
that the surrounding nonlinearity makes the fit approximate.

Both solvers (closed form and full-batch Adam) minimize the same token-count
normalized objective; lambda requests of zero are floored at 1e-12 to keep
the normal equations nonsingular.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import model as md
from .calibration import CalibrationSet
from .errors import InputError, ShapeError, SolverError
from .model import TransformerModel, fold_compensation, forward
from .runtime import ordered_map
from .tensor import ridge_solve

LEFT = "left"
RIGHT = "right"
SIDES = (LEFT, RIGHT)
TARGETS = ("W_down", "W_up", "W_gate", "W_Q", "W_K", "W_V", "W_O")
LAMBDA_FLOOR = 1e-12

# pruned-model capture point feeding each target matrix, and the original
# model's point its output is aligned against (None marks the W_down case,
# which aligns the whole layer output)
_TARGET_POINTS = {
    "W_down": (md.X_DOWN, None),
    "W_up": (md.FFN_NORMED, md.UP),
    "W_gate": (md.FFN_NORMED, md.GATE_PRE),
    "W_Q": (md.ATTN_NORMED, md.Q),
    "W_K": (md.ATTN_NORMED, md.K),
    "W_V": (md.ATTN_NORMED, md.V),
    "W_O": (md.ATTN_CONCAT, md.ATTN_OUT),
}
# interposition point equivalent to folding W' on the left of each target
_FOLD_POINTS = {
    "W_down": md.FFN_OUT, "W_up": md.UP, "W_gate": md.GATE_PRE,
    "W_Q": md.Q, "W_K": md.K, "W_V": md.V, "W_O": md.ATTN_OUT,
}


@dataclass(frozen=True)
class CompensationProblem:
    layer: int
    side: str
    target: str
    weight: np.ndarray        # target matrix snapshot from the pruned model
    inputs: np.ndarray        # pruned-model input to the matrix, (q, n)
    reference: np.ndarray     # activation the matrix output must match, (p, n)
    lam: float
    x_down: np.ndarray | None = None  # populated for the W_down target
    x_f: np.ndarray | None = None
    x_o: np.ndarray | None = None

    def __post_init__(self):
        if self.side not in SIDES:
            raise InputError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.target not in TARGETS:
            raise InputError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.inputs.shape[1] != self.reference.shape[1]:
            raise InputError("activation blocks must share their token count")
        for block in (self.x_down, self.x_f, self.x_o):
            if block is not None and block.shape[1] != self.n_tokens:
                raise InputError("activation blocks must share their token count")

    @property
    def n_tokens(self) -> int:
        return self.inputs.shape[1]

    @property
    def w_dim(self) -> int:
        return (self.weight.shape[0] if self.side == LEFT
                else self.weight.shape[1])


@dataclass(frozen=True)
class CompensationSolution:
    layer: int
    side: str
    target: str
    lam: float
    w_prime: np.ndarray
    objective_initial: float
    objective_final: float
    mse_final: float
    reg_final: float
    frobenius_distance_to_identity: float
    solver: str
    solver_steps: int = 0
    solver_lr: float = 0.0
    objective_curve: tuple[tuple[int, float, float, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "layer": self.layer, "side": self.side, "target": self.target,
            "lambda": self.lam,
            "objective_initial": self.objective_initial,
            "objective_final": self.objective_final,
            "mse_final": self.mse_final, "reg_final": self.reg_final,
            "frobenius_distance_to_identity": self.frobenius_distance_to_identity,
            "solver": self.solver, "solver_steps": self.solver_steps,
            "solver_lr": self.solver_lr,
        }


def capture_problem(original: TransformerModel, pruned: TransformerModel,
                    calib: CalibrationSet, layer: int, side: str = LEFT,
                    target: str = "W_down", lam: float = 1e-3,
                    threads: int = 1) -> CompensationProblem:
    """Collect the activation blocks for one layer over all calibration tokens."""
    if layer not in pruned.retained_indices:
        raise InputError(f"layer {layer} is not retained in the pruned model")
    if target not in TARGETS:
        raise InputError(f"target must be one of {TARGETS}, got {target!r}")
    in_point, ref_point = _TARGET_POINTS[target]
    if target == "W_down":
        cap_p = {layer: frozenset({md.X_DOWN, md.X_F})}
        cap_o = {layer: frozenset({md.H_OUT})}
    else:
        cap_p = {layer: frozenset({in_point})}
        cap_o = {layer: frozenset({ref_point})}

    def one_sample(pair):
        x, _ = pair
        _, tr_p = forward(pruned, x, capture=cap_p)
        _, tr_o = forward(original, x, capture=cap_o)
        return tr_p, tr_o

    results = ordered_map(one_sample, calib.pairs(), threads)
    if target == "W_down":
        x_down = np.concatenate([t.get(layer, md.X_DOWN) for t, _ in results], axis=1)
        x_f = np.concatenate([t.get(layer, md.X_F) for t, _ in results], axis=1)
        x_o = np.concatenate([t.get(layer, md.H_OUT) for _, t in results], axis=1)
        return CompensationProblem(
            layer=layer, side=side, target=target,
            weight=pruned.layer(layer).W_down,
            inputs=x_down, reference=x_o - x_f, lam=lam,
            x_down=x_down, x_f=x_f, x_o=x_o)
    inputs = np.concatenate([t.get(layer, in_point) for t, _ in results], axis=1)
    reference = np.concatenate([t.get(layer, ref_point) for _, t in results], axis=1)
    return CompensationProblem(
        layer=layer, side=side, target=target,
        weight=getattr(pruned.layer(layer), target),
        inputs=inputs, reference=reference, lam=lam)


def objective_value(p: CompensationProblem, w_prime: np.ndarray,
                    ) -> tuple[float, float, float]:
    """(total, mse term, regularization term) of the normalized objective."""
    w_prime = np.asarray(w_prime, dtype=np.float64)
    dim = p.w_dim
    if w_prime.shape != (dim, dim):
        raise ShapeError(f"expected a ({dim}, {dim}) matrix, got {w_prime.shape}")
    if p.side == LEFT:
        residual = w_prime @ (p.weight @ p.inputs) - p.reference
    else:
        residual = p.weight @ (w_prime @ p.inputs) - p.reference
    mse = float(np.sum(residual * residual)) / p.n_tokens
    diff = w_prime - np.eye(dim)
    reg = p.lam * float(np.sum(diff * diff))
    return mse + reg, mse, reg


def _finish(p: CompensationProblem, w: np.ndarray, solver: str,
            steps: int = 0, lr: float = 0.0,
            curve: tuple = ()) -> CompensationSolution:
    dim = p.w_dim
    obj0 = objective_value(p, np.eye(dim))[0]
    total, mse, reg = objective_value(p, w)
    return CompensationSolution(
        layer=p.layer, side=p.side, target=p.target, lam=p.lam,
        w_prime=w, objective_initial=obj0, objective_final=total,
        mse_final=mse, reg_final=reg,
        frobenius_distance_to_identity=float(np.linalg.norm(w - np.eye(dim))),
        solver=solver, solver_steps=steps, solver_lr=lr,
        objective_curve=curve)


def solve_closed_form(p: CompensationProblem) -> CompensationSolution:
    """Exact minimizer of the normalized objective.

    Left side reduces to a ridge solve with effective regularizer n * lambda.
    The right side couples the weight on both flanks of W', so it is solved
    through two symmetric eigendecompositions instead.
    """
    lam = max(p.lam, LAMBDA_FLOOR)
    if p.side == LEFT:
        b = p.weight @ p.inputs
        w = ridge_solve(b, p.reference, lam * p.n_tokens).array
        return _finish(p, w, "closed_form")
    # right side: minimize (1/n)||M W' A - Y||^2 + lam||W' - I||^2 with
    # stationarity  (M^T M) W' (A A^T / n) + lam W' = M^T Y A^T / n + lam I
    m, a, y = p.weight, p.inputs, p.reference
    n = p.n_tokens
    try:
        pl, pu = np.linalg.eigh(m.T @ m)
        ql, qu = np.linalg.eigh((a @ a.T) / n)
        c = pu.T @ (m.T @ y @ a.T / n + lam * np.eye(p.w_dim)) @ qu
        w_tilde = c / (pl[:, None] * ql[None, :] + lam)
        w = pu @ w_tilde @ qu.T
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"right-side eigendecomposition failed: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise SolverError("right-side solve produced non-finite values")
    return _finish(p, w, "closed_form")


def solve_iterative(p: CompensationProblem, lr: float = 1e-3,
                    steps: int = 20_000, seed: int = 0,
                    record_every: int | None = None) -> CompensationSolution:
    """Full-batch Adam on the same objective, starting from the identity.

    The gradient is deterministic, so `seed` has no effect on the result;
    it is accepted for interface stability. The objective curve is recorded
    at evenly spaced checkpoints for reporting.
    """
    if steps < 0:
        raise InputError("steps must be >= 0")
    del seed  # full-batch gradients are deterministic
    lam = max(p.lam, LAMBDA_FLOOR)
    dim = p.w_dim
    n = p.n_tokens
    eye = np.eye(dim)
    if p.side == LEFT:
        b = p.weight @ p.inputs
        g1 = b @ b.T / n
        g2 = p.reference @ b.T / n

        def gradient(w):
            return 2.0 * (w @ g1 - g2) + 2.0 * lam * (w - eye)
    else:
        ptp = p.weight.T @ p.weight
        q = p.inputs @ p.inputs.T / n
        c = p.weight.T @ p.reference @ p.inputs.T / n

        def gradient(w):
            return 2.0 * (ptp @ w @ q - c) + 2.0 * lam * (w - eye)

    w = eye.copy()
    if steps == 0:
        return _finish(p, w, "iterative", steps=0, lr=lr)
    every = record_every or max(1, steps // 200)
    adam_m = np.zeros_like(w)
    adam_v = np.zeros_like(w)
    b1, b2, eps = 0.9, 0.999, 1e-8
    curve = []
    for step in range(1, steps + 1):
        g = gradient(w)
        adam_m = b1 * adam_m + (1 - b1) * g
        adam_v = b2 * adam_v + (1 - b2) * g * g
        w = w - lr * (adam_m / (1 - b1 ** step)) / (
            np.sqrt(adam_v / (1 - b2 ** step)) + eps)
        if step % every == 0 or step == steps:
            total, mse, reg = objective_value(p, w)
            if not np.isfinite(total):
                raise SolverError(f"objective became non-finite at step {step}")
            curve.append((step, total, mse, reg))
    return _finish(p, w, "iterative", steps=steps, lr=lr, curve=tuple(curve))


def apply_solution(pruned: TransformerModel,
                   sol: CompensationSolution) -> TransformerModel:
    """Fold W' into the target matrix of the solved layer."""
    if sol.layer not in pruned.retained_indices:
        raise InputError(f"layer {sol.layer} is not retained in this model")
    layer = pruned.layer(sol.layer)
    weight = getattr(layer, sol.target)
    w = sol.w_prime
    if sol.side == LEFT:
        if w.shape != (weight.shape[0], weight.shape[0]):
            raise ShapeError(
                f"left compensation dims {w.shape} do not match {sol.target}")
        folded = w @ weight
    else:
        if w.shape != (weight.shape[1], weight.shape[1]):
            raise ShapeError(
                f"right compensation dims {w.shape} do not match {sol.target}")
        folded = weight @ w
    if sol.target == "W_down" and sol.side == LEFT:
        return fold_compensation(pruned, sol.layer, w)
    new_layer = layer.with_weight(sol.target, folded)
    return dc_replace(pruned, layers=tuple(
        (i, new_layer if i == sol.layer else l) for i, l in pruned.layers))


def fold_point(target: str) -> str:
    """Forward-interposition point equivalent to a left-side fold."""
    return _FOLD_POINTS[target]
