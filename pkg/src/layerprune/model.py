"""Decoder-only transformer with removable layers and activation capture.

Architecture per layer (pre-norm, no biases):

    a  = h + W_O @ heads(W_Q n, W_K n, W_V n)     with n = rmsnorm(h) * attn_gain
    out = a + W_down @ (silu(W_gate m) * (W_up m)) with m = rmsnorm(a) * ffn_gain

so a layer's output decomposes exactly as `ffn_residual + W_down @ down_input`,
which is what the compensation solver relies on. Positions use a learned
absolute embedding table; attention is scaled dot-product with a causal mask.

Models are immutable: removal and weight folding return new model values.
All in-memory arithmetic runs in float64; the config's `precision` field only
selects the checkpoint storage width.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tc
from .errors import InputError, ShapeError
from .tensor import Tape, Tensor

LAYER_TENSOR_NAMES = (
    "attn_norm", "W_Q", "W_K", "W_V", "W_O",
    "ffn_norm", "W_gate", "W_up", "W_down",
)

# capture / interposition points inside one layer
H_IN = "h_in"                  # residual stream entering the layer
ATTN_NORMED = "attn_normed"    # rmsnorm input to the attention projections
Q, K, V = "q", "k", "v"        # per-stream projection outputs (d, T)
ATTN_PROBS = "attn_probs"      # stacked per-head attention rows (heads, T, T)
ATTN_CONCAT = "attn_concat"    # concatenated head mix, input to W_O
ATTN_OUT = "attn_out"          # W_O output, pre-residual
X_F = "x_f"                    # residual stream entering the FFN sub-layer
FFN_NORMED = "ffn_normed"      # rmsnorm input to gate/up
GATE_PRE = "gate_pre"          # W_gate output, pre-activation
UP = "up"                      # W_up output
X_DOWN = "x_down"              # silu(gate) * up, input to W_down
FFN_OUT = "ffn_out"            # W_down output, pre-residual
H_OUT = "h_out"                # layer output

CAPTURE_POINTS = frozenset({
    H_IN, ATTN_NORMED, Q, K, V, ATTN_PROBS, ATTN_CONCAT, ATTN_OUT,
    X_F, FFN_NORMED, GATE_PRE, UP, X_DOWN, FFN_OUT, H_OUT,
})
INTERPOSE_POINTS = frozenset({
    Q, K, V, ATTN_CONCAT, ATTN_OUT, GATE_PRE, UP, X_DOWN, FFN_OUT,
})


class PassCounters:
    """Thread-safe forward/backward pass counters for cost instrumentation."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.forward = 0
        self.backward = 0

    def reset(self) -> None:
        with self._lock:
            self.forward = 0
            self.backward = 0

    def count_forward(self) -> None:
        with self._lock:
            self.forward += 1

    def count_backward(self) -> None:
        with self._lock:
            self.backward += 1

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return (self.forward, self.backward)


PASS_COUNTERS = PassCounters()


def _frozen(array, dtype=np.float64) -> np.ndarray:
    arr = np.array(array, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise InputError("model weights must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ffn: int
    vocab_size: int
    max_seq: int
    precision: str = "f64"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise InputError(f"config {name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise InputError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_ffn <= self.d_model:
            raise InputError(f"d_ffn {self.d_ffn} must exceed d_model {self.d_model}")
        if self.precision not in ("f32", "f64"):
            raise InputError(f"precision must be f32 or f64, got {self.precision!r}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ffn": self.d_ffn,
            "vocab_size": self.vocab_size, "max_seq": self.max_seq,
            "precision": self.precision,
        }


@dataclass(frozen=True)
class DecoderLayer:
    attn_norm: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    ffn_norm: np.ndarray
    W_gate: np.ndarray
    W_up: np.ndarray
    W_down: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LAYER_TENSOR_NAMES}

    def validate(self, cfg: ModelConfig) -> None:
        d, k = cfg.d_model, cfg.d_ffn
        expected = {
            "attn_norm": (d,), "ffn_norm": (d,),
            "W_Q": (d, d), "W_K": (d, d), "W_V": (d, d), "W_O": (d, d),
            "W_gate": (k, d), "W_up": (k, d), "W_down": (d, k),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(
                    f"layer tensor {name} has dims {getattr(self, name).shape}, "
                    f"expected {shape}")

    def with_weight(self, name: str, array: np.ndarray) -> DecoderLayer:
        if name not in LAYER_TENSOR_NAMES:
            raise InputError(f"unknown layer tensor {name!r}")
        if array.shape != getattr(self, name).shape:
            raise ShapeError(
                f"replacement for {name} has dims {array.shape}, "
                f"expected {getattr(self, name).shape}")
        return replace(self, **{name: _frozen(array)})


@dataclass(frozen=True)
class TransformerModel:
    config: ModelConfig
    embedding: np.ndarray      # (vocab, d)
    pos_embedding: np.ndarray  # (max_seq, d)
    final_norm: np.ndarray     # (d,)
    lm_head: np.ndarray        # (vocab, d), untied
    layers: tuple[tuple[int, DecoderLayer], ...]
    removed: frozenset[int] = frozenset()
    provenance: str = ""

    def __post_init__(self):
        cfg = self.config
        if self.embedding.shape != (cfg.vocab_size, cfg.d_model):
            raise ShapeError(f"embedding dims {self.embedding.shape} invalid")
        if self.pos_embedding.shape != (cfg.max_seq, cfg.d_model):
            raise ShapeError(f"pos_embedding dims {self.pos_embedding.shape} invalid")
        if self.final_norm.shape != (cfg.d_model,):
            raise ShapeError(f"final_norm dims {self.final_norm.shape} invalid")
        if self.lm_head.shape != (cfg.vocab_size, cfg.d_model):
            raise ShapeError(f"lm_head dims {self.lm_head.shape} invalid")
        indices = [i for i, _ in self.layers]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise InputError("retained original indices must be strictly increasing")
        if len(self.layers) + len(self.removed) != cfg.n_layers:
            raise InputError("retained plus removed layer counts must equal n_layers")
        present = set(indices)
        if present & self.removed:
            raise InputError("a layer cannot be both retained and removed")
        if any(i < 0 or i >= cfg.n_layers for i in present | self.removed):
            raise InputError("layer index outside configured range")
        for _, layer in self.layers:
            layer.validate(cfg)

    @property
    def retained_indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.layers)

    def layer(self, original_index: int) -> DecoderLayer:
        for i, layer in self.layers:
            if i == original_index:
                return layer
        raise InputError(f"layer {original_index} is not retained")

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable tensors in fixed order, keyed by checkpoint names."""
        params = {
            "embedding": self.embedding,
            "pos_embedding": self.pos_embedding,
            "lm_head": self.lm_head,
            "final_norm": self.final_norm,
        }
        for i, layer in self.layers:
            for name, arr in layer.tensors().items():
                params[f"layers.{i}.{name}"] = arr
        return params

    def with_parameters(self, params: dict[str, np.ndarray],
                        provenance: str | None = None) -> TransformerModel:
        layers = []
        for i, layer in self.layers:
            fields = {name: _frozen(params[f"layers.{i}.{name}"])
                      for name in LAYER_TENSOR_NAMES}
            layers.append((i, DecoderLayer(**fields)))
        return TransformerModel(
            config=self.config,
            embedding=_frozen(params["embedding"]),
            pos_embedding=_frozen(params["pos_embedding"]),
            final_norm=_frozen(params["final_norm"]),
            lm_head=_frozen(params["lm_head"]),
            layers=tuple(layers),
            removed=self.removed,
            provenance=self.provenance if provenance is None else provenance,
        )


def init_model(config: ModelConfig, seed: int) -> TransformerModel:
    """GPT-style initialization: N(0, 0.02) projections, unit norm gains."""
    rng = np.random.default_rng(seed)
    std = 0.02
    d, k, v = config.d_model, config.d_ffn, config.vocab_size

    def draw(*shape):
        return _frozen(rng.normal(0.0, std, size=shape))

    embedding = draw(v, d)
    pos = draw(config.max_seq, d)
    lm_head = draw(v, d)
    final_norm = _frozen(np.ones(d))
    layers = []
    for i in range(config.n_layers):
        layers.append((i, DecoderLayer(
            attn_norm=_frozen(np.ones(d)),
            W_Q=draw(d, d), W_K=draw(d, d), W_V=draw(d, d), W_O=draw(d, d),
            ffn_norm=_frozen(np.ones(d)),
            W_gate=draw(k, d), W_up=draw(k, d), W_down=draw(d, k),
        )))
    return TransformerModel(config, embedding, pos, final_norm, lm_head,
                            tuple(layers))


class ActivationTrace:
    """Captured activations keyed by (original layer index, point name)."""

    def __init__(self) -> None:
        self._data: dict[int, dict[str, np.ndarray]] = {}

    def _put(self, layer: int, point: str, value: np.ndarray) -> None:
        self._data.setdefault(layer, {})[point] = value

    def get(self, layer: int, point: str) -> np.ndarray:
        try:
            return self._data[layer][point]
        except KeyError:
            raise InputError(f"point {point!r} of layer {layer} was not captured") from None

    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self._data))

    def __contains__(self, key) -> bool:
        layer, point = key
        return layer in self._data and point in self._data[layer]


def capture_all(model: TransformerModel, *points: str) -> dict[int, frozenset[str]]:
    """CaptureSpec asking for the given points at every retained layer."""
    spec = frozenset(points)
    bad = spec - CAPTURE_POINTS
    if bad:
        raise InputError(f"unknown capture points: {sorted(bad)}")
    return {i: spec for i in model.retained_indices}


def forward(model: TransformerModel, tokens: np.ndarray,
            capture: dict[int, frozenset[str]] | None = None,
            tape: Tape | None = None,
            interpose: dict[tuple[int, str], np.ndarray] | None = None,
            ) -> tuple[Tensor, ActivationTrace]:
    """Causal-masked logits (vocab, T) for one token sequence.

    When `tape` is given every op is recorded and all retained parameters are
    registered on it. `interpose` maps (original_index, point) to a square
    matrix multiplied into that activation stream; folding a compensation
    matrix into a weight is numerically equivalent to interposing it at the
    corresponding point.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise InputError("forward expects a flat token sequence")
    t_len = tokens.shape[0]
    if t_len < 1 or t_len > cfg.max_seq:
        raise InputError(f"sequence length {t_len} outside [1, {cfg.max_seq}]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError("token id out of vocabulary range")
    capture = capture or {}
    interpose = interpose or {}
    for (li, point) in interpose:
        if point not in INTERPOSE_POINTS:
            raise InputError(f"cannot interpose at point {point!r}")
        if li not in {i for i, _ in model.layers}:
            raise InputError(f"cannot interpose at removed layer {li}")
    PASS_COUNTERS.count_forward()

    if tape is None:
        def param(name, arr):
            return Tensor._wrap(arr, None, None)
    else:
        def param(name, arr):
            return tape.parameter(name, arr)

    trace = ActivationTrace()

    def grab(layer_idx, point, tensor):
        if point in capture.get(layer_idx, ()):
            value = np.array(tensor.array if isinstance(tensor, Tensor) else tensor)
            value.setflags(write=False)
            trace._put(layer_idx, point, value)

    def interposed(layer_idx, point, stream):
        mat = interpose.get((layer_idx, point))
        if mat is None:
            return stream
        if mat.shape != (stream.dims[0], stream.dims[0]):
            raise ShapeError(
                f"interpose matrix at {point!r} has dims {mat.shape}, "
                f"expected ({stream.dims[0]}, {stream.dims[0]})")
        return tc.matmul(Tensor(mat), stream)

    emb = param("embedding", model.embedding)
    pos = param("pos_embedding", model.pos_embedding)
    h = tc.add(tc.embed(emb, tokens),
               tc.transpose(tc.rows(pos, 0, t_len)))

    n_heads = cfg.n_heads
    d_head = cfg.d_model // n_heads
    inv_sqrt = 1.0 / np.sqrt(d_head)

    for orig_idx, layer in model.layers:
        p = {name: param(f"layers.{orig_idx}.{name}", arr)
             for name, arr in layer.tensors().items()}
        grab(orig_idx, H_IN, h)

        normed = tc.rms_norm(h, p["attn_norm"])
        grab(orig_idx, ATTN_NORMED, normed)
        q = interposed(orig_idx, Q, tc.matmul(p["W_Q"], normed))
        k = interposed(orig_idx, K, tc.matmul(p["W_K"], normed))
        v = interposed(orig_idx, V, tc.matmul(p["W_V"], normed))
        grab(orig_idx, Q, q)
        grab(orig_idx, K, k)
        grab(orig_idx, V, v)

        head_outs = []
        probs = []
        for hix in range(n_heads):
            lo, hi = hix * d_head, (hix + 1) * d_head
            qh, kh, vh = (tc.rows(s, lo, hi) for s in (q, k, v))
            scores = tc.scale(tc.matmul(tc.transpose(qh), kh), inv_sqrt)
            attn = tc.causal_softmax(scores)
            if ATTN_PROBS in capture.get(orig_idx, ()):
                probs.append(np.array(attn.array))
            head_outs.append(tc.matmul(vh, tc.transpose(attn)))
        if probs:
            trace._put(orig_idx, ATTN_PROBS, np.stack(probs))
        concat = interposed(orig_idx, ATTN_CONCAT, tc.concat_rows(head_outs))
        grab(orig_idx, ATTN_CONCAT, concat)
        attn_out = interposed(orig_idx, ATTN_OUT, tc.matmul(p["W_O"], concat))
        grab(orig_idx, ATTN_OUT, attn_out)

        h = tc.add(h, attn_out)
        grab(orig_idx, X_F, h)

        ffn_normed = tc.rms_norm(h, p["ffn_norm"])
        grab(orig_idx, FFN_NORMED, ffn_normed)
        gate = interposed(orig_idx, GATE_PRE, tc.matmul(p["W_gate"], ffn_normed))
        grab(orig_idx, GATE_PRE, gate)
        up = interposed(orig_idx, UP, tc.matmul(p["W_up"], ffn_normed))
        grab(orig_idx, UP, up)
        x_down = interposed(orig_idx, X_DOWN, tc.mul(tc.silu(gate), up))
        grab(orig_idx, X_DOWN, x_down)
        ffn_out = interposed(orig_idx, FFN_OUT, tc.matmul(p["W_down"], x_down))
        grab(orig_idx, FFN_OUT, ffn_out)

        h = tc.add(h, ffn_out)
        grab(orig_idx, H_OUT, h)

    final = tc.rms_norm(h, param("final_norm", model.final_norm))
    logits = tc.matmul(param("lm_head", model.lm_head), final)
    return logits, trace


def run_backward(tape: Tape, loss: Tensor) -> tc.GradientMap:
    """backward() with the pass counter bumped; use for instrumented flows."""
    PASS_COUNTERS.count_backward()
    return tc.backward(tape, loss)


# mean next-token NLL over a (vocab, T) logit stream; re-exported here because
# the model and its loss form one contract
cross_entropy = tc.cross_entropy


def remove_layer(model: TransformerModel, original_index: int) -> TransformerModel:
    """Drop one retained layer from the forward path; other weights untouched."""
    if original_index in model.removed:
        raise InputError(f"layer {original_index} was already removed")
    if original_index not in {i for i, _ in model.layers}:
        raise InputError(f"layer index {original_index} out of range")
    return replace(
        model,
        layers=tuple((i, l) for i, l in model.layers if i != original_index),
        removed=frozenset(model.removed | {original_index}),
    )


def fold_compensation(model: TransformerModel, original_index: int,
                      w_prime: np.ndarray) -> TransformerModel:
    """Replace the layer's W_down by w_prime @ W_down; nothing else changes."""
    layer = model.layer(original_index)
    w_prime = np.asarray(w_prime, dtype=np.float64)
    d = model.config.d_model
    if w_prime.shape != (d, d):
        raise ShapeError(f"compensation matrix dims {w_prime.shape}, expected ({d}, {d})")
    folded = layer.with_weight("W_down", w_prime @ layer.W_down)
    return replace(model, layers=tuple(
        (i, folded if i == original_index else l) for i, l in model.layers))
