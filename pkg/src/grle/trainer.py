"""Training loop with gradient-cached large-batch contrastive updates.

A step runs in three phases. Phase 1 embeds every query/passage without
gradients. Phase 2 computes the contrastive loss on those embeddings alone
and caches its gradient with respect to each embedding. Phase 3 re-encodes
one micro-batch at a time with gradients on, feeding the cached gradients
back through a linear surrogate (sum of embedding·cache dot products) while
the per-example generative and consistency terms are computed directly.

Because every batched operation in the encoder treats rows independently
and dropout masks are keyed per example rather than per forward call, the
accumulated parameter gradients match a single full-batch backward pass up
to floating-point associativity, and exactly when the micro-batch spans the
whole batch.
"""

import contextlib
import dataclasses
import json
import math
import os

import numpy as np

from . import kernels as K
from . import tensor as T
from .tensor import Tensor
from .data import TokenGroup, collate, collate_pair_tokens, uncollate
from .losses import (
    LossWeights,
    contrastive_loss,
    kl_consistency_loss,
    relevance_distributions,
)
from .model import DropoutContext, Model, encode, token_log_probs
from .checkpoint import save_checkpoint

# Roles keying the dropout-mask RNG: the same example id encodes to the
# same mask only within the same role, so query/positive/negative/pair
# forwards of one example stay independently regularized.
ROLE_QUERY = 0
ROLE_POSITIVE = 1
ROLE_NEGATIVE = 2
ROLE_PAIR = 3


@dataclasses.dataclass(frozen=True)
class _StrategyPlan:
    """What a training strategy computes beyond the contrastive term."""

    gen: str  # "" (none), "sft", or "dpo"
    use_kl: bool
    needs_ref: bool
    negatives_in_pairs: bool

    @property
    def needs_pairs(self):
        return bool(self.gen) or self.use_kl


_PLANS = {
    "cl": _StrategyPlan("", False, False, False),
    "cl_sft": _StrategyPlan("sft", False, False, False),
    "cl_dpo": _StrategyPlan("dpo", False, True, True),
    "grl_sft": _StrategyPlan("sft", True, False, True),
    "grl": _StrategyPlan("dpo", True, True, True),
}

STRATEGIES = tuple(_PLANS)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    strategy: str = "grl"
    learning_rate: float = 2e-4
    batch_size: int = 32
    micro_batch_size: int = None  # None trains in one full-batch slab
    epochs: int = 1
    seed: int = 0
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    checkpoint_every: int = 100
    stop_gen_grad: bool = False
    cross_batch_negatives: bool = False
    warmup_steps: int = 0
    lr_decay: str = "constant"  # or "cosine"
    min_lr_fraction: float = 0.0

    def validate(self):
        if self.strategy not in _PLANS:
            raise ValueError(
                f"unknown strategy {self.strategy!r}; expected one of {sorted(_PLANS)}"
            )
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.micro_batch_size is not None and self.micro_batch_size < 1:
            raise ValueError(
                f"micro_batch_size must be at least 1, got {self.micro_batch_size}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.adam_eps <= 0:
            raise ValueError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")
        if self.checkpoint_every < 1:
            raise ValueError(
                f"checkpoint_every must be at least 1, got {self.checkpoint_every}"
            )
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be non-negative, got {self.warmup_steps}")
        if self.lr_decay not in ("constant", "cosine"):
            raise ValueError(
                f"lr_decay must be 'constant' or 'cosine', got {self.lr_decay!r}"
            )
        if not 0.0 <= self.min_lr_fraction <= 1.0:
            raise ValueError(
                f"min_lr_fraction must lie in [0, 1], got {self.min_lr_fraction}"
            )
        self.weights.validate()
        return self


@dataclasses.dataclass
class StepResult:
    """Scalar losses plus the per-query component values behind them."""

    losses: dict  # total / cl / gen / kl -> float
    per_query: dict  # component -> np.ndarray of per-query values


@dataclasses.dataclass
class OptimizerState:
    """AdamW moment estimates, stored flat per parameter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def initialize(cls, params):
        m = {n: np.zeros(p.size, dtype=p.data.dtype) for n, p in params.items()}
        v = {n: np.zeros(p.size, dtype=p.data.dtype) for n, p in params.items()}
        return cls(m=m, v=v, t=0)

    def save(self, path):
        arrays = {f"m::{n}": a for n, a in self.m.items()}
        arrays.update({f"v::{n}": a for n, a in self.v.items()})
        np.savez(path, t=np.int64(self.t), **arrays)

    @classmethod
    def load(cls, path, params):
        with np.load(path) as npz:
            state = cls(
                m={n: npz[f"m::{n}"].copy() for n in params},
                v={n: npz[f"v::{n}"].copy() for n in params},
                t=int(npz["t"]),
            )
        for n, p in params.items():
            if state.m[n].size != p.size:
                raise ValueError(
                    f"optimizer state for {n} has {state.m[n].size} entries, "
                    f"parameter has {p.size}"
                )
        return state


def clip_gradients(params, max_norm):
    """Scale all gradients into a global-norm ball; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def learning_rate_at(step, total_steps, config):
    """Scheduled learning rate for a 1-indexed step: warmup, then decay."""
    peak = config.learning_rate
    if config.warmup_steps and step <= config.warmup_steps:
        return peak * step / config.warmup_steps
    if config.lr_decay == "constant":
        return peak
    span = max(1, total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    floor = peak * config.min_lr_fraction
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params, state, config, lr=None):
    """One decoupled-weight-decay Adam update over every parameter, in place."""
    if lr is None:
        lr = config.learning_rate
    state.t += 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros(p.size, dtype=p.data.dtype)
        else:
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for {name}; aborting the step")
            g = np.ascontiguousarray(g, dtype=p.data.dtype).reshape(-1)
        K.adamw_update(
            p.data.reshape(-1),
            g,
            state.m[name],
            state.v[name],
            state.t,
            lr,
            config.beta1,
            config.beta2,
            config.adam_eps,
            config.weight_decay,
        )


class ReferenceScorer:
    """Frozen-policy log-probability scorer for preference training.

    With adapters present the base weights already are the frozen reference,
    so scoring just bypasses the adapter branches. Otherwise the constructor
    snapshots the parameters; build the scorer before the first update.
    """

    def __init__(self, model):
        self._bypass = model.lora is not None
        if self._bypass:
            self._model = model
        else:
            params = {
                n: Tensor(p.data.copy(), requires_grad=False)
                for n, p in model.params.items()
            }
            self._model = Model(model.config, params, lora=None, dtype=model.dtype)

    def token_log_prob_matrix(self, token_ids, attention_mask):
        """Next-token log-probabilities as a plain (B, L-1) array."""
        m = self._model
        prev_adapters, prev_ctx = m.adapters_enabled, m.dropout_ctx
        m.adapters_enabled = not self._bypass and prev_adapters
        m.dropout_ctx = None
        try:
            with T.no_grad():
                lp = token_log_probs(m, token_ids, attention_mask)
        finally:
            m.adapters_enabled = prev_adapters
            m.dropout_ctx = prev_ctx
        return lp.data


def make_reference_scorer(model):
    return ReferenceScorer(model)


@contextlib.contextmanager
def _dropout_scope(model, config, step, role, example_ids):
    if model.lora is None or model.lora.dropout <= 0.0:
        yield
        return
    prev = model.dropout_ctx
    model.dropout_ctx = DropoutContext(
        seed=config.seed,
        step=step,
        role=role,
        example_ids=np.asarray(example_ids),
        p=model.lora.dropout,
    )
    try:
        yield
    finally:
        model.dropout_ctx = prev


def _uniform_negative_count(batch):
    counts = np.diff(batch.neg_offsets)
    if counts.size == 0:
        return 0
    first = int(counts[0])
    if np.any(counts != first):
        raise ValueError(
            "hard-negative counts must be uniform within a batch, got "
            f"{sorted(set(int(c) for c in counts))}"
        )
    return first


def _slice_group(group, lo, hi):
    return TokenGroup(
        token_ids=group.token_ids[lo:hi],
        attention_mask=group.attention_mask[lo:hi],
    )


def _encode_slab(model, config, step, batch, lo, hi, h):
    """Encode queries, positives, and negatives for example rows [lo, hi)."""
    with _dropout_scope(model, config, step, ROLE_QUERY, np.arange(lo, hi)):
        q = encode(model, _slice_group(batch.query, lo, hi))
    with _dropout_scope(model, config, step, ROLE_POSITIVE, np.arange(lo, hi)):
        p = encode(model, _slice_group(batch.positive, lo, hi))
    n = None
    if h:
        with _dropout_scope(
            model, config, step, ROLE_NEGATIVE, np.arange(lo * h, hi * h)
        ):
            n_flat = encode(model, _slice_group(batch.negatives, lo * h, hi * h))
        n = T.reshape(n_flat, (hi - lo, h, n_flat.shape[1]))
    return q, p, n


def _cl_loss(q_emb, p_emb, n_emb, config):
    w = config.weights
    if n_emb is None:
        b, d = q_emb.shape
        n_emb = Tensor(np.zeros((b, 0, d), dtype=q_emb.data.dtype))
    elif config.cross_batch_negatives:
        b = q_emb.shape[0]
        h = n_emb.shape[1]
        d = n_emb.shape[2]
        flat = T.reshape(n_emb, (b * h, d))
        # Every query scores every example's negatives, not just its own.
        n_emb = T.stack([flat] * b, axis=0)
    return contrastive_loss(q_emb, p_emb, n_emb, w.tau)


def _pair_batch(batch, max_len, include_negatives, h):
    """Frame (query, passage) rows for scoring: positive first, then negatives."""
    q_tokens = uncollate(batch.query)
    p_tokens = uncollate(batch.positive)
    n_tokens = uncollate(batch.negatives) if include_negatives else []
    pair_q, pair_p = [], []
    for i in range(len(q_tokens)):
        pair_q.append(q_tokens[i])
        pair_p.append(p_tokens[i])
        if include_negatives:
            lo, hi = batch.negatives_of(i)
            for j in range(lo, hi):
                pair_q.append(q_tokens[i])
                pair_p.append(n_tokens[j])
    return collate_pair_tokens(pair_q, pair_p, max_len, label="pair")


def _masked_means(lp, score_mask, dtype):
    """Per-row sum and mean of log-probs over scored positions."""
    counts = score_mask.sum(axis=1).astype(dtype)
    if np.any(counts == 0):
        raise ValueError("pair row has no scored tokens (empty passage)")
    w = Tensor(score_mask.astype(dtype))
    sums = T.tsum(lp * w, axis=1)
    means = sums * Tensor(1.0 / counts)
    return sums, means


def _reference_sums(ref_scorer, pairs, n_rows, m_per):
    lp = ref_scorer.token_log_prob_matrix(pairs.token_ids, pairs.attention_mask)
    sums = (lp * pairs.score_mask.astype(lp.dtype)).sum(axis=1)
    return sums.reshape(n_rows, m_per)


def _gen_and_kl(model, plan, config, pairs, lo, hi, h, q_emb, p_emb, n_emb, ref_sums, step):
    """Per-query generative and consistency loss vectors for rows [lo, hi)."""
    w = config.weights
    bm = hi - lo
    m_per = 1 + (h if plan.negatives_in_pairs else 0)
    r0, r1 = lo * m_per, hi * m_per
    with _dropout_scope(model, config, step, ROLE_PAIR, np.arange(r0, r1)):
        lp = token_log_probs(
            model, pairs.token_ids[r0:r1], pairs.attention_mask[r0:r1]
        )
    sums_flat, means_flat = _masked_means(lp, pairs.score_mask[r0:r1], model.dtype)
    sums = T.reshape(sums_flat, (bm, m_per))
    means = T.reshape(means_flat, (bm, m_per))

    gen_vec = None
    if plan.gen == "sft":
        gen_vec = -T.reshape(T.slice_axis(means, 1, 0, 1), (bm,))
    elif plan.gen == "dpo":
        ref = ref_sums[lo:hi]
        pos_diff = T.reshape(T.slice_axis(sums, 1, 0, 1), (bm,)) - Tensor(ref[:, 0])
        neg_diff = T.slice_axis(sums, 1, 1, m_per) - Tensor(np.ascontiguousarray(ref[:, 1:]))
        gap = (T.stack([pos_diff] * h, axis=1) - neg_diff) * float(w.beta)
        gen_vec = -T.tmean(T.log_sigmoid(gap), axis=1)

    kl_vec = None
    if plan.use_kl:
        d = q_emb.shape[1]
        cand = T.concat([T.reshape(p_emb, (bm, 1, d)), n_emb], axis=1)
        qn = T.l2_normalize(q_emb, axis=-1)
        cn = T.l2_normalize(cand, axis=-1)
        s_rt = T.reshape(
            T.matmul(T.reshape(qn, (bm, 1, d)), T.transpose(cn, (0, 2, 1))),
            (bm, m_per),
        )
        s_gen = means.detach() if config.stop_gen_grad else means
        p_rt, p_gen = relevance_distributions(s_rt, s_gen, w.tau)
        kl_vec = kl_consistency_loss(p_rt, p_gen)
    return gen_vec, kl_vec


def _check_step_inputs(plan, config, h, ref_scorer):
    if (plan.gen == "dpo" or plan.use_kl) and h == 0:
        raise ValueError(
            f"strategy {config.strategy!r} scores hard negatives; "
            "every example needs at least one"
        )
    if plan.needs_ref and ref_scorer is None:
        raise ValueError(
            f"strategy {config.strategy!r} needs a reference scorer; "
            "build one with make_reference_scorer before stepping"
        )


def _report(plan, weights, cl_value, gen_vals, kl_vals):
    gen_mean = float(np.mean(gen_vals)) if gen_vals is not None else 0.0
    kl_mean = float(np.mean(kl_vals)) if kl_vals is not None else 0.0
    lam_gen = weights.lambda_dpo if plan.gen else 0.0
    lam_kl = weights.lambda_kl if plan.use_kl else 0.0
    total = weights.lambda_cl * cl_value + lam_gen * gen_mean + lam_kl * kl_mean
    per_query = {}
    if gen_vals is not None:
        per_query["gen"] = gen_vals
    if kl_vals is not None:
        per_query["kl"] = kl_vals
    return StepResult(
        losses={"total": total, "cl": cl_value, "gen": gen_mean, "kl": kl_mean},
        per_query=per_query,
    )


_COMPONENT_PLANS = {
    "cl": "cl",
    "sft": "cl_sft",
    "dpo": "cl_dpo",
    "kl": "grl_sft",
    "grl": "grl",
}


def component_loss(model, batch, config, component, step=0, ref_scorer=None):
    """Scalar Tensor for one objective term on a full batch.

    component is one of "cl", "sft", "dpo", "kl", or "grl". Ops are built
    on whatever tape the caller has active and no gradients are
    accumulated here, which makes this the entry point for numeric
    gradient verification of each loss in isolation.
    """
    if component not in _COMPONENT_PLANS:
        raise ValueError(
            f"unknown loss component {component!r}; "
            f"expected one of {sorted(_COMPONENT_PLANS)}"
        )
    plan = _PLANS[_COMPONENT_PLANS[component]]
    w = config.weights
    b = batch.size
    h = _uniform_negative_count(batch)
    _check_step_inputs(plan, config, h, ref_scorer)

    pairs = None
    ref_sums = None
    if plan.needs_pairs:
        pairs = _pair_batch(
            batch, model.config.max_seq_len, plan.negatives_in_pairs, h
        )
        if plan.needs_ref:
            m_per = 1 + (h if plan.negatives_in_pairs else 0)
            ref_sums = _reference_sums(ref_scorer, pairs, b, m_per)

    q_emb, p_emb, n_emb = _encode_slab(model, config, step, batch, 0, b, h)
    l_cl = _cl_loss(q_emb, p_emb, n_emb, config)
    if component == "cl":
        return l_cl
    gen_vec, kl_vec = _gen_and_kl(
        model, plan, config, pairs, 0, b, h, q_emb, p_emb, n_emb, ref_sums, step
    )
    if component in ("sft", "dpo"):
        return T.tmean(gen_vec)
    if component == "kl":
        return T.tmean(kl_vec)
    total = l_cl * float(w.lambda_cl)
    total = total + T.tmean(gen_vec) * float(w.lambda_dpo)
    total = total + T.tmean(kl_vec) * float(w.lambda_kl)
    return total


def naive_step(model, batch, config, step=0, ref_scorer=None):
    """Full-batch forward/backward on one tape; the gradient-cache oracle.

    Accumulates parameter gradients without applying an update.
    """
    config.validate()
    plan = _PLANS[config.strategy]
    w = config.weights
    b = batch.size
    h = _uniform_negative_count(batch)
    _check_step_inputs(plan, config, h, ref_scorer)

    pairs = None
    ref_sums = None
    if plan.needs_pairs:
        pairs = _pair_batch(
            batch, model.config.max_seq_len, plan.negatives_in_pairs, h
        )
        if plan.needs_ref:
            m_per = 1 + (h if plan.negatives_in_pairs else 0)
            ref_sums = _reference_sums(ref_scorer, pairs, b, m_per)

    with T.use_tape(T.Tape()):
        q_emb, p_emb, n_emb = _encode_slab(model, config, step, batch, 0, b, h)
        l_cl = _cl_loss(q_emb, p_emb, n_emb, config)
        gen_vec, kl_vec = (None, None)
        if plan.needs_pairs:
            gen_vec, kl_vec = _gen_and_kl(
                model, plan, config, pairs, 0, b, h, q_emb, p_emb, n_emb, ref_sums, step
            )
        total = l_cl * float(w.lambda_cl)
        if gen_vec is not None:
            total = total + T.tmean(gen_vec) * float(w.lambda_dpo)
        if kl_vec is not None:
            total = total + T.tmean(kl_vec) * float(w.lambda_kl)
        T.backward(total)

    return _report(
        plan,
        w,
        float(l_cl.item()),
        gen_vec.data.copy() if gen_vec is not None else None,
        kl_vec.data.copy() if kl_vec is not None else None,
    )


def gradcache_step(model, batch, config, step=0, ref_scorer=None):
    """Three-phase cached-gradient step; numerically matches naive_step.

    Peak activation memory scales with the micro-batch size while the
    contrastive loss still sees every in-batch candidate. Accumulates
    parameter gradients without applying an update.
    """
    config.validate()
    plan = _PLANS[config.strategy]
    w = config.weights
    b = batch.size
    h = _uniform_negative_count(batch)
    _check_step_inputs(plan, config, h, ref_scorer)
    micro = config.micro_batch_size or b

    pairs = None
    ref_sums = None
    if plan.needs_pairs:
        pairs = _pair_batch(
            batch, model.config.max_seq_len, plan.negatives_in_pairs, h
        )
        if plan.needs_ref:
            m_per = 1 + (h if plan.negatives_in_pairs else 0)
            ref_sums = _reference_sums(ref_scorer, pairs, b, m_per)

    # Phase 1: representation pass, no gradients.
    q_parts, p_parts, n_parts = [], [], []
    with T.no_grad():
        for lo in range(0, b, micro):
            hi = min(lo + micro, b)
            q, p, n = _encode_slab(model, config, step, batch, lo, hi, h)
            q_parts.append(q.data)
            p_parts.append(p.data)
            if n is not None:
                n_parts.append(n.data)
    q_all = np.concatenate(q_parts, axis=0)
    p_all = np.concatenate(p_parts, axis=0)
    n_all = np.concatenate(n_parts, axis=0) if n_parts else None

    # Phase 2: contrastive loss over embeddings only; cache its gradients.
    q_leaf = Tensor(q_all, requires_grad=True)
    p_leaf = Tensor(p_all, requires_grad=True)
    n_leaf = Tensor(n_all, requires_grad=True) if n_all is not None else None
    with T.use_tape(T.Tape()):
        l_cl = _cl_loss(q_leaf, p_leaf, n_leaf, config)
        T.backward(l_cl * float(w.lambda_cl))
    q_cache, p_cache = q_leaf.grad, p_leaf.grad
    n_cache = n_leaf.grad if n_leaf is not None else None

    # Phase 3: re-encode each micro-batch with gradients; the surrogate
    # replays the cached contrastive gradients, the generative/consistency
    # terms are computed directly at batch-mean scale.
    gen_parts, kl_parts = [], []
    for lo in range(0, b, micro):
        hi = min(lo + micro, b)
        bm = hi - lo
        with T.use_tape(T.Tape()):
            q_emb, p_emb, n_emb = _encode_slab(model, config, step, batch, lo, hi, h)
            total = T.tsum(q_emb * Tensor(q_cache[lo:hi]))
            total = total + T.tsum(p_emb * Tensor(p_cache[lo:hi]))
            if n_emb is not None and n_cache is not None:
                total = total + T.tsum(n_emb * Tensor(n_cache[lo:hi]))
            if plan.needs_pairs:
                gen_vec, kl_vec = _gen_and_kl(
                    model, plan, config, pairs, lo, hi, h,
                    q_emb, p_emb, n_emb, ref_sums, step,
                )
                if gen_vec is not None:
                    total = total + T.tmean(gen_vec) * float(w.lambda_dpo * (bm / b))
                    gen_parts.append(gen_vec.data.copy())
                if kl_vec is not None:
                    total = total + T.tmean(kl_vec) * float(w.lambda_kl * (bm / b))
                    kl_parts.append(kl_vec.data.copy())
            T.backward(total)

    return _report(
        plan,
        w,
        float(l_cl.item()),
        np.concatenate(gen_parts) if gen_parts else None,
        np.concatenate(kl_parts) if kl_parts else None,
    )


def fit(model, examples, config, out_dir=None):
    """Train over the example list; returns the per-step metrics records.

    With ``out_dir`` set, appends one JSON line per step to metrics.jsonl
    and writes checkpoints every ``checkpoint_every`` steps plus a final
    one (with optimizer state) at the end.
    """
    config.validate()
    if not examples:
        raise ValueError("no training examples")
    plan = _PLANS[config.strategy]
    trainable = model.trainable_parameters()
    if not trainable:
        raise ValueError("model has no trainable parameters")
    ref_scorer = make_reference_scorer(model) if plan.needs_ref else None
    state = OptimizerState.initialize(trainable)

    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")

    steps_per_epoch = -(-len(examples) // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    metrics = []
    step = 0
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng((config.seed, epoch)).permutation(len(examples))
            for start in range(0, len(examples), config.batch_size):
                chunk = [examples[int(i)] for i in order[start : start + config.batch_size]]
                batch = collate(chunk, model.config.max_seq_len)
                step += 1
                result = gradcache_step(
                    model, batch, config, step=step, ref_scorer=ref_scorer
                )
                grad_norm = clip_gradients(trainable, config.clip_norm)
                lr = learning_rate_at(step, total_steps, config)
                adamw_step(trainable, state, config, lr=lr)
                model.zero_grads()
                entry = {
                    "step": step,
                    "epoch": epoch,
                    "examples": len(chunk),
                    "loss_total": result.losses["total"],
                    "loss_cl": result.losses["cl"],
                    "loss_gen": result.losses["gen"],
                    "loss_kl": result.losses["kl"],
                    "grad_norm": grad_norm,
                    "lr": lr,
                }
                metrics.append(entry)
                if writer is not None:
                    writer.write(json.dumps(entry) + "\n")
                    writer.flush()
                if out_dir is not None and step % config.checkpoint_every == 0:
                    save_checkpoint(
                        model, os.path.join(out_dir, f"checkpoint-step{step}")
                    )
    finally:
        if writer is not None:
            writer.close()

    if out_dir is not None:
        final_dir = os.path.join(out_dir, "checkpoint")
        save_checkpoint(model, final_dir, extra={"step": step})
        state.save(os.path.join(final_dir, "optimizer.npz"))
    return metrics
