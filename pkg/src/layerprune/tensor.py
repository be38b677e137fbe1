"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The primitive set is deliberately small: exactly what a pre-norm decoder
transformer needs (matrix product, addition, elementwise product, RMS
normalization, causal softmax, SiLU, embedding gather, cross-entropy) plus
structural helpers (transpose, row/column slicing and concatenation, scalar
scaling) and a ridge-regression solver used by the compensation stage.

Gradients are accumulated in fixed tape-record order, so repeated runs over
identical inputs are bit-identical. Tensors are immutable value carriers and
may be shared freely between threads; a Tape is single-owner and must not be
used concurrently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import ContractError, InputError, NumericError, ShapeError

GradientMap = dict[str, np.ndarray]

_RMS_EPS = 1e-6

# When enabled, every op result is scanned for NaN/Inf. Off by default:
# inputs are validated at ingestion and release builds stay assert-free.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """Immutable dense array, optionally attached to a Tape node."""

    __slots__ = ("array", "tape", "nid")

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor construction rejected non-finite values")
        arr.setflags(write=False)
        self.array = arr
        self.tape: Tape | None = None
        self.nid: int | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray, tape: Tape | None, nid: int | None) -> Tensor:
        t = object.__new__(cls)
        t.array = array
        t.tape = tape
        t.nid = nid
        return t

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    def item(self) -> float:
        if self.array.shape != ():
            raise ContractError(f"item() requires a scalar, got dims {self.dims}")
        return float(self.array)

    def __repr__(self) -> str:
        taped = "" if self.tape is None else ", taped"
        return f"Tensor(dims={self.dims}{taped})"


class Tape:
    """Ordered record of primitive ops for one reverse sweep.

    Parameters are registered by name; backward() returns their gradients,
    accumulating contributions in reverse record order for determinism.
    """

    __slots__ = ("_records", "_params", "_param_order", "_n_nodes")

    def __init__(self) -> None:
        # each record: (out_nid, in_nids, vjp) where vjp(g) yields one
        # gradient per input (None for inputs that need no gradient)
        self._records: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._params: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._param_order: list[str] = []
        self._n_nodes = 0

    def _node(self, array: np.ndarray) -> Tensor:
        nid = self._n_nodes
        self._n_nodes += 1
        return Tensor._wrap(array, self, nid)

    def parameter(self, name: str, array: np.ndarray) -> Tensor:
        """Register a named leaf whose gradient backward() will report."""
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        arr = np.asarray(array, dtype=np.float64)
        t = self._node(arr)
        self._params[name] = (t.nid, arr.shape)
        self._param_order.append(name)
        return t

    def _record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._records.append((out.nid, tuple(t.nid for t in inputs), vjp))


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Gradient of a scalar loss w.r.t. every parameter registered on `tape`.

    Non-parameter intermediates are discarded as soon as their single
    producing record has been processed. Parameters the loss does not
    depend on receive exact zero gradients.
    """
    if loss.tape is not tape:
        raise ContractError("backward root was not produced on this tape")
    if loss.array.shape != ():
        raise ContractError(f"backward root must be a scalar, got dims {loss.dims}")
    grads: dict[int, np.ndarray] = {loss.nid: np.asarray(1.0)}
    for out_nid, in_nids, vjp in reversed(tape._records):
        g = grads.pop(out_nid, None)
        if g is None:
            continue
        for nid, contrib in zip(in_nids, vjp(g)):
            if nid is None or contrib is None:
                continue
            acc = grads.get(nid)
            grads[nid] = contrib if acc is None else acc + contrib
    out: GradientMap = {}
    for name in tape._param_order:
        nid, shape = tape._params[name]
        g = grads.get(nid)
        out[name] = np.zeros(shape) if g is None else np.asarray(g)
    return out


def _common_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands were recorded on different tapes")
    return tape


def _emit(op: str, arr: np.ndarray, tape: Tape | None,
          inputs: Sequence[Tensor], vjp: Callable | None) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    if tape is None:
        return Tensor._wrap(arr, None, None)
    out = tape._node(arr)
    tape._record(out, inputs, vjp)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    aa, ba = a.array, b.array
    if aa.ndim != 2 or ba.ndim != 2:
        raise ShapeError(f"matmul requires rank-2 operands, got {a.dims} and {b.dims}")
    if aa.shape[1] != ba.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.dims} vs {b.dims}")
    tape = _common_tape(a, b)
    need_a = a.nid is not None
    need_b = b.nid is not None

    def vjp(g):
        return (g @ ba.T if need_a else None,
                aa.T @ g if need_b else None)

    return _emit("matmul", aa @ ba, tape, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"add requires equal dims, got {a.dims} and {b.dims}")
    tape = _common_tape(a, b)
    return _emit("add", a.array + b.array, tape, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    if a.dims != b.dims:
        raise ShapeError(f"mul requires equal dims, got {a.dims} and {b.dims}")
    tape = _common_tape(a, b)
    aa, ba = a.array, b.array
    return _emit("mul", aa * ba, tape, (a, b), lambda g: (g * ba, g * aa))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.array * c, a.tape, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    if a.array.ndim != 2:
        raise ShapeError(f"transpose requires rank 2, got {a.dims}")
    return _emit("transpose", a.array.T, a.tape, (a,), lambda g: (g.T,))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.array.ndim != 2 or not (0 <= start < stop <= a.array.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] invalid for dims {a.dims}")
    shape = a.array.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit("rows", a.array[start:stop], a.tape, (a,), vjp)


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.array.ndim != 2 or not (0 <= start < stop <= a.array.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] invalid for dims {a.dims}")
    shape = a.array.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("cols", a.array[:, start:stop], a.tape, (a,), vjp)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows requires at least one part")
    width = parts[0].array.shape[1] if parts[0].array.ndim == 2 else None
    for p in parts:
        if p.array.ndim != 2 or p.array.shape[1] != width:
            raise ShapeError("concat_rows requires rank-2 parts with equal column counts")
    tape = _common_tape(*parts)
    sizes = [p.array.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _emit("concat_rows", np.concatenate([p.array for p in parts], axis=0),
                 tape, parts, vjp)


def silu(a: Tensor) -> Tensor:
    x = a.array
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def vjp(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return _emit("silu", out, a.tape, (a,), vjp)


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """RMS-normalize each column of a (d, T) stream, scaled by a (d,) gain."""
    xa = x.array
    if xa.ndim != 2:
        raise ShapeError(f"rms_norm requires a rank-2 stream, got {x.dims}")
    d = xa.shape[0]
    if gain.dims != (d,):
        raise ShapeError(f"rms_norm gain dims {gain.dims} do not match stream rows {d}")
    ga = gain.array
    r = np.sqrt(np.mean(xa * xa, axis=0, keepdims=True) + _RMS_EPS)  # (1, T)
    u = xa / r
    out = ga[:, None] * u
    tape = _common_tape(x, gain)
    need_x = x.nid is not None
    need_g = gain.nid is not None

    def vjp(g):
        gx = None
        if need_x:
            h = g * ga[:, None]
            gx = h / r - xa * np.sum(h * xa, axis=0, keepdims=True) / (d * r ** 3)
        gg = np.sum(g * u, axis=1) if need_g else None
        return (gx, gg)

    return _emit("rms_norm", out, tape, (x, gain), vjp)


def causal_softmax(s: Tensor) -> Tensor:
    """Row softmax of a (T, T) score matrix, masking entries above the diagonal.

    Row t holds the attention of query position t over key positions <= t;
    each row sums to 1 over the allowed region.
    """
    sa = s.array
    if sa.ndim != 2 or sa.shape[0] != sa.shape[1]:
        raise ShapeError(f"causal_softmax requires a square matrix, got {s.dims}")
    t = sa.shape[0]
    masked = np.where(np.tril(np.ones((t, t), dtype=bool)), sa, -np.inf)
    m = np.max(masked, axis=1, keepdims=True)
    e = np.exp(masked - m)
    p = e / np.sum(e, axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _emit("causal_softmax", p, s.tape, (s,), vjp)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather embedding rows for a token sequence, returned as a (d, T) stream."""
    ta = table.array
    if ta.ndim != 2:
        raise ShapeError(f"embed requires a rank-2 table, got {table.dims}")
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise InputError("embed requires a flat token sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= ta.shape[0]):
        raise InputError(
            f"token id out of range [0, {ta.shape[0]}) in embedding lookup")
    vocab = ta.shape
    ids = ids.astype(np.intp)

    def vjp(g):
        gt = np.zeros(vocab)
        np.add.at(gt, ids, g.T)
        return (gt,)

    return _emit("embed", ta[ids].T, table.tape, (table,), vjp)


def log_softmax_cols(a: Tensor) -> Tensor:
    """Log-softmax over the rows of each column (distribution per column)."""
    x = a.array
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_cols requires rank 2, got {a.dims}")
    m = np.max(x, axis=0, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=0, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * np.sum(g, axis=0, keepdims=True),)

    return _emit("log_softmax_cols", out, a.tape, (a,), vjp)


def pick_rows(a: Tensor, row_ids: np.ndarray) -> Tensor:
    """Select one entry per column: out[c] = a[row_ids[c], c]."""
    x = a.array
    row_ids = np.asarray(row_ids, dtype=np.intp)
    if x.ndim != 2 or row_ids.shape != (x.shape[1],):
        raise ShapeError(f"pick_rows index shape {row_ids.shape} invalid for {a.dims}")
    if row_ids.size and (row_ids.min() < 0 or row_ids.max() >= x.shape[0]):
        raise InputError("pick_rows index out of range")
    cix = np.arange(x.shape[1])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (row_ids, cix), g)
        return (full,)

    return _emit("pick_rows", x[row_ids, cix], a.tape, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.array.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy() if shape else np.asarray(g),)

    return _emit("sum_all", np.asarray(np.sum(a.array)), a.tape, (a,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood of a (vocab, T) logit stream.

    `targets` is the input sequence shifted left by one (length T). Columns
    0..T-2 are scored against targets[0..T-2]; the final column has no
    successor inside the window and is not scored.
    """
    x = logits.array
    targets = np.asarray(targets)
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy requires rank-2 logits, got {logits.dims}")
    if targets.shape != (x.shape[1],):
        raise InputError(
            f"targets length {targets.shape} does not match {x.shape[1]} logit columns")
    t = x.shape[1]
    if t < 2:
        raise InputError("cross_entropy requires at least 2 positions")
    n_scored = t - 1
    tgt = targets[:n_scored].astype(np.intp)
    if tgt.min() < 0 or tgt.max() >= x.shape[0]:
        raise InputError("target id out of vocabulary range")
    scored = x[:, :n_scored]
    m = np.max(scored, axis=0, keepdims=True)
    z = scored - m
    lse = np.log(np.sum(np.exp(z), axis=0))  # (n_scored,)
    nll = lse - z[tgt, np.arange(n_scored)]
    out = np.asarray(np.sum(nll) / n_scored)
    p = np.exp(z - lse[None, :])
    shape = x.shape

    def vjp(g):
        gl = np.zeros(shape)
        gl[:, :n_scored] = p
        gl[tgt, np.arange(n_scored)] -= 1.0
        gl *= float(g) / n_scored
        return (gl,)

    return _emit("cross_entropy", out, logits.tape, (logits,), vjp)


def frobenius_norm(t) -> float:
    """Square root of the sum of squared entries (any rank)."""
    arr = t.array if isinstance(t, Tensor) else np.asarray(t)
    return float(np.sqrt(np.sum(arr * arr)))


def ridge_solve(a, target, lam: float) -> Tensor:
    """Unique minimizer W of ||W a - target||_F^2 + lam ||W - I||_F^2.

    Solved through the normal equations W (a a^T + lam I) = target a^T + lam I
    using a symmetric positive-definite (Cholesky) factorization; lam > 0
    guarantees invertibility. Never forms an explicit inverse.
    """
    aa = a.array if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    ta = target.array if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if aa.ndim != 2 or ta.ndim != 2:
        raise ShapeError("ridge_solve requires rank-2 operands")
    if aa.shape != ta.shape:
        raise ShapeError(f"ridge_solve operand dims disagree: {aa.shape} vs {ta.shape}")
    if not lam > 0:
        raise InputError(f"ridge regularizer must be positive, got {lam}")
    d = aa.shape[0]
    eye = np.eye(d)
    gram = aa @ aa.T + lam * eye
    rhs = ta @ aa.T + lam * eye
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True)
        w = scipy.linalg.cho_solve(factor, rhs.T).T
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"ridge factorization failed: {exc}") from exc
    return Tensor(w)
