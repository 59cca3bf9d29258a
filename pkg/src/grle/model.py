"""Decoder-only transformer with switchable attention masking.

One parameter set serves two jobs: bidirectional attention plus pooling
produces text embeddings, and causal attention produces next-token
log-likelihoods for generation-based scoring. Low-rank adapters (LoRA) can
be attached to any projection; with adapters present the effective weight is
W + (alpha/r)·B·A and only A/B receive gradients.

All projection weights are stored (d_out, d_in) and applied as x @ W.T, so
the adapter identity above holds literally on the stored matrices.
"""

import dataclasses
import enum
import math

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID
from .tensor import Tensor

RMS_EPS = 1e-6
INIT_STD = 0.02

POOLING_STRATEGIES = ("first", "last", "mean", "weighted_mean")

_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj", "mlp_fc", "mlp_proj")
_ATTN_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj")


class AttentionMode(enum.Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


def _as_mode(mode):
    if isinstance(mode, AttentionMode):
        return mode
    try:
        return AttentionMode(mode)
    except ValueError:
        raise ValueError(
            f"unknown attention mode {mode!r}; expected 'causal' or 'bidirectional'"
        ) from None


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    pooling: str = "mean"
    encode_mode: str = "bidirectional"
    seed: int = 0

    def validate(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be at least 2, got {self.max_seq_len}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.pooling not in POOLING_STRATEGIES:
            raise ValueError(
                f"pooling must be one of {POOLING_STRATEGIES}, got {self.pooling!r}"
            )
        _as_mode(self.encode_mode)
        return self

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


@dataclasses.dataclass(frozen=True)
class LoraConfig:
    r: int = 16
    alpha: float = 32.0
    dropout: float = 0.2
    targets: tuple = _ATTN_PROJECTIONS

    def validate(self):
        if self.r <= 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        unknown = set(self.targets) - set(_PROJECTIONS)
        if unknown:
            raise ValueError(f"unknown LoRA targets {sorted(unknown)}; known: {_PROJECTIONS}")
        if not self.targets:
            raise ValueError("targets must be non-empty")
        return self

    @property
    def scale(self):
        return self.alpha / self.r


@dataclasses.dataclass
class DropoutContext:
    """Keyed randomness for LoRA-path dropout during a training step.

    Masks depend only on (seed, step, role, per-example id, layer,
    projection), never on how the batch is partitioned into micro-batches,
    so re-running any subset of examples reproduces their masks exactly.
    """

    seed: int
    step: int
    role: int
    example_ids: np.ndarray
    p: float


def _projection_shapes(config):
    d, f = config.d_model, config.d_ff
    return {
        "q_proj": (d, d),
        "k_proj": (d, d),
        "v_proj": (d, d),
        "o_proj": (d, d),
        "mlp_fc": (f, d),
        "mlp_proj": (d, f),
    }


class Model:
    """Parameter container plus inference/training state.

    Parameters live in an insertion-ordered name → Tensor dict; that order
    is the canonical serialization order.
    """

    def __init__(self, config, params, lora=None, dtype=np.float32):
        self.config = config
        self.params = params
        self.lora = lora
        self.dtype = dtype
        self.dropout_ctx = None
        # When False, projections skip their adapter branches, so a model
        # with zero-initialized B matrices scores exactly like its base.
        self.adapters_enabled = True

    def parameters(self):
        return self.params

    def trainable_parameters(self):
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def has_adapter(self, layer, name):
        return (
            self.adapters_enabled
            and self.lora is not None
            and name in self.lora.targets
            and f"layers.{layer}.{name}.lora_A" in self.params
        )

    def num_parameters(self):
        return sum(p.size for p in self.params.values())


def init_model(config, seed=None, dtype=np.float32):
    """Fresh model with scaled-normal weights and unit normalization gains."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.d_model

    def normal(shape):
        return Tensor(
            rng.normal(0.0, INIT_STD, size=shape).astype(dtype), requires_grad=True
        )

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params = {}
    params["tok_emb"] = normal((config.vocab_size, d))
    params["pos_emb"] = normal((config.max_seq_len, d))
    shapes = _projection_shapes(config)
    for i in range(config.n_layers):
        params[f"layers.{i}.attn_norm"] = ones((d,))
        for name in _ATTN_PROJECTIONS:
            params[f"layers.{i}.{name}"] = normal(shapes[name])
        params[f"layers.{i}.mlp_norm"] = ones((d,))
        params[f"layers.{i}.mlp_fc"] = normal(shapes["mlp_fc"])
        params[f"layers.{i}.mlp_proj"] = normal(shapes["mlp_proj"])
    params["final_norm"] = ones((d,))
    return Model(config, params, dtype=dtype)


def apply_lora(model, lora, seed=0):
    """Attach adapter pairs; freezes base weights, adapters become trainable.

    B starts at zero so the adapted model is exactly the base model until
    the first update.
    """
    lora.validate()
    shapes = _projection_shapes(model.config)
    for name in lora.targets:
        d_out, d_in = shapes[name]
        if lora.r > min(d_out, d_in):
            raise ValueError(
                f"LoRA r={lora.r} exceeds min dimension {min(d_out, d_in)} of {name}"
            )
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.requires_grad = False
    for i in range(model.config.n_layers):
        for name in lora.targets:
            d_out, d_in = shapes[name]
            a = rng.normal(0.0, INIT_STD, size=(lora.r, d_in)).astype(model.dtype)
            model.params[f"layers.{i}.{name}.lora_A"] = Tensor(a, requires_grad=True)
            model.params[f"layers.{i}.{name}.lora_B"] = Tensor(
                np.zeros((d_out, lora.r), dtype=model.dtype), requires_grad=True
            )
    model.lora = lora
    return model


def merged_weight(model, layer, name):
    """Dense W + (alpha/r)·B·A for one projection, as a plain array."""
    w = model.params[f"layers.{layer}.{name}"].data
    if not model.has_adapter(layer, name):
        return w.copy()
    a = model.params[f"layers.{layer}.{name}.lora_A"].data
    b = model.params[f"layers.{layer}.{name}.lora_B"].data
    return w + model.lora.scale * (b @ a)


def _dropout_mask(ctx, layer, name, n_rows, length, width, dtype):
    """Inverted-dropout scale mask, one independent stream per example."""
    proj_id = _PROJECTIONS.index(name)
    keep = np.empty((n_rows, length, width), dtype=dtype)
    scale = 1.0 / (1.0 - ctx.p)
    for b in range(n_rows):
        rng = np.random.default_rng(
            (ctx.seed, ctx.step, ctx.role, int(ctx.example_ids[b]), layer, proj_id)
        )
        u = rng.random((length, width))
        keep[b] = (u >= ctx.p) * scale
    return keep


def _project(model, layer, name, x):
    w = model.params[f"layers.{layer}.{name}"]
    y = T.matmul(x, T.transpose(w, (1, 0)))
    if not model.has_adapter(layer, name):
        return y
    a = model.params[f"layers.{layer}.{name}.lora_A"]
    b = model.params[f"layers.{layer}.{name}.lora_B"]
    xin = x
    ctx = model.dropout_ctx
    if ctx is not None and ctx.p > 0.0:
        mask = _dropout_mask(
            ctx, layer, name, x.shape[0], x.shape[1], x.shape[2], x.data.dtype
        )
        xin = x * Tensor(mask)
    low = T.matmul(xin, T.transpose(a, (1, 0)))
    return y + T.matmul(low, T.transpose(b, (1, 0))) * model.lora.scale


def _attention(model, layer, x, keep_mask):
    config = model.config
    b, length, d = x.shape
    h, dh = config.n_heads, config.head_dim

    def split_heads(t):
        return T.transpose(T.reshape(t, (b, length, h, dh)), (0, 2, 1, 3))

    q = split_heads(_project(model, layer, "q_proj", x))
    k = split_heads(_project(model, layer, "k_proj", x))
    v = split_heads(_project(model, layer, "v_proj", x))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    scores = T.masked_fill(scores, ~keep_mask, -np.inf)
    attn = T.softmax(scores, axis=-1)
    ctxv = T.matmul(attn, v)
    merged = T.reshape(T.transpose(ctxv, (0, 2, 1, 3)), (b, length, d))
    return _project(model, layer, "o_proj", merged)


@dataclasses.dataclass
class ForwardResult:
    hidden: Tensor
    logits: Tensor


def forward(model, token_ids, attention_mask, mode, want_logits=True):
    """Run the full stack; returns final hidden states and (optionally) logits.

    ``attention_mask`` marks valid (non-pad) tokens. Pad positions are
    excluded as attention keys in both modes; in causal mode position i
    additionally sees only keys j ≤ i.
    """
    mode = _as_mode(mode)
    config = model.config
    token_ids = np.asarray(token_ids, dtype=np.int64)
    attention_mask = np.asarray(attention_mask)
    if token_ids.ndim != 2:
        raise ValueError(f"token_ids must be 2-D, got shape {token_ids.shape}")
    if attention_mask.shape != token_ids.shape:
        raise ValueError(
            f"attention_mask shape {attention_mask.shape} does not match "
            f"token_ids shape {token_ids.shape}"
        )
    b, length = token_ids.shape
    if length > config.max_seq_len:
        raise ValueError(
            f"sequence length {length} exceeds max_seq_len {config.max_seq_len}"
        )

    key_valid = attention_mask.astype(bool)[:, None, None, :]
    if mode is AttentionMode.CAUSAL:
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
        keep = key_valid & causal
    else:
        keep = np.broadcast_to(key_valid, (b, 1, length, length))

    tok_emb = model.params["tok_emb"]
    pos = T.slice_axis(model.params["pos_emb"], 0, 0, length)
    x = T.embedding(tok_emb, token_ids) + pos
    for i in range(config.n_layers):
        normed = T.rms_norm(x, model.params[f"layers.{i}.attn_norm"], RMS_EPS)
        x = x + _attention(model, i, normed, keep)
        normed = T.rms_norm(x, model.params[f"layers.{i}.mlp_norm"], RMS_EPS)
        up = T.gelu(_project(model, i, "mlp_fc", normed))
        x = x + _project(model, i, "mlp_proj", up)
    hidden = T.rms_norm(x, model.params["final_norm"], RMS_EPS)
    logits = None
    if want_logits:
        logits = T.matmul(hidden, T.transpose(tok_emb, (1, 0)))
    return ForwardResult(hidden=hidden, logits=logits)


def pool(hidden, attention_mask, strategy):
    """Collapse (B, L, d) hidden states to (B, d) per the strategy.

    mean: mask-weighted average. last: final valid token. first: position 0.
    weighted_mean: weights proportional to 1-indexed position over the valid
    prefix, w_i = i / Σ_j j.
    """
    mask = np.asarray(attention_mask)
    if mask.ndim != 2 or mask.shape != hidden.shape[:2]:
        raise ValueError(
            f"attention_mask shape {mask.shape} does not match hidden {hidden.shape}"
        )
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("attention_mask has an all-pad row; nothing to pool")
    b, length, d = hidden.shape
    if strategy == "first":
        return T.reshape(T.slice_axis(hidden, 1, 0, 1), (b, d))
    if strategy == "last":
        idx = np.broadcast_to((lengths - 1)[:, None, None], (b, 1, d))
        return T.reshape(T.gather(hidden, idx, axis=1), (b, d))
    if strategy == "mean":
        w = mask / lengths[:, None]
    elif strategy == "weighted_mean":
        positions = np.cumsum(mask, axis=1) * mask
        w = positions / positions.sum(axis=1, keepdims=True)
    else:
        raise ValueError(
            f"pooling must be one of {POOLING_STRATEGIES}, got {strategy!r}"
        )
    weights = np.broadcast_to(
        w[:, :, None].astype(hidden.data.dtype), hidden.shape
    ).copy()
    return T.tsum(hidden * Tensor(weights), axis=1)


def encode(model, batch, mode=None):
    """Embed a TokenGroup: forward (bidirectional by default) + pooling."""
    if mode is None:
        mode = model.config.encode_mode
    result = forward(
        model, batch.token_ids, batch.attention_mask, mode, want_logits=False
    )
    return pool(result.hidden, batch.attention_mask, model.config.pooling)


def token_log_probs(model, token_ids, attention_mask):
    """Causal next-token log-probabilities, shape (B, L-1).

    Entry [b, t] is log π(token_{t+1} | tokens ≤ t). Callers select scored
    positions with a mask; pad targets produce values that must be masked
    out, not read.
    """
    result = forward(model, token_ids, attention_mask, AttentionMode.CAUSAL)
    lp = T.log_softmax(result.logits, axis=-1)
    length = token_ids.shape[1]
    lp = T.slice_axis(lp, 1, 0, length - 1)
    targets = np.asarray(token_ids)[:, 1:]
    idx = targets[:, :, None]
    return T.reshape(T.gather(lp, idx, axis=2), targets.shape)


def sequence_log_probs(model, query_ids, passage_ids):
    """Per-token log π(passage byte | prefix) under the causal model.

    The sequence template is [BOS, query, EOS, passage, EOS]; only the
    passage bytes are scored. Over-length input raises — truncating would
    silently change what gets scored.
    """
    query_ids = [int(i) for i in query_ids]
    passage_ids = [int(i) for i in passage_ids]
    ids = [BOS_ID] + query_ids + [EOS_ID] + passage_ids + [EOS_ID]
    if len(ids) > model.config.max_seq_len:
        raise ValueError(
            f"framed pair length {len(ids)} exceeds max_seq_len "
            f"{model.config.max_seq_len}; refusing to truncate"
        )
    row = np.asarray([ids], dtype=np.int64)
    mask = np.ones_like(row)
    lp = token_log_probs(model, row, mask)
    start = len(query_ids) + 1  # position predicting the first passage byte
    return T.reshape(T.slice_axis(lp, 1, start, start + len(passage_ids)), (len(passage_ids),))
