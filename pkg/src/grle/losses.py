"""Fine-tuning objectives for embedding training.

Contrastive loss over in-batch plus hard negatives, sequence-likelihood SFT,
preference optimization (DPO) against a frozen reference, and the combined
objective that aligns the cosine-based relevance distribution with the
generation-based one through a KL term.

Length conventions differ deliberately: DPO compares SUM log-likelihoods per
sequence, while the generation relevance score s_gen is the per-token MEAN.
"""

import dataclasses

import numpy as np

from . import tensor as T
from .tensor import Tensor

KL_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class LossWeights:
    lambda_cl: float = 1.0
    lambda_dpo: float = 0.5
    lambda_kl: float = 1.0
    tau: float = 0.05
    beta: float = 0.1

    def validate(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        for name in ("lambda_cl", "lambda_dpo", "lambda_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        return self


@dataclasses.dataclass
class CandidateSet:
    """One query with its m scored candidates (positive first).

    ``gen_scores`` holds each candidate's s_gen (mean per-token causal
    log-probability of the passage given the query).
    """

    query_emb: Tensor
    cand_embs: Tensor
    gen_scores: Tensor
    positive_index: int = 0

    def __post_init__(self):
        m = self.cand_embs.shape[0]
        if m < 2:
            raise ValueError(f"candidate set needs at least 2 entries, got {m}")
        if self.gen_scores.shape != (m,):
            raise ValueError(
                f"gen_scores shape {self.gen_scores.shape} does not match {m} candidates"
            )
        if not 0 <= self.positive_index < m:
            raise ValueError(f"positive_index {self.positive_index} outside [0, {m})")

    def rep_scores(self):
        """Cosine of the query against every candidate, shape (m,)."""
        qn = T.l2_normalize(T.reshape(self.query_emb, (1, -1)), axis=-1)
        cn = T.l2_normalize(self.cand_embs, axis=-1)
        return T.reshape(T.matmul(qn, T.transpose(cn, (1, 0))), (self.cand_embs.shape[0],))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def cosine_score(u, v):
    """u·v / (‖u‖‖v‖); raises on a zero vector."""
    u, v = _as_tensor(u), _as_tensor(v)
    un = T.l2_normalize(T.reshape(u, (1, -1)), axis=-1)
    vn = T.l2_normalize(T.reshape(v, (1, -1)), axis=-1)
    return T.tsum(un * vn)


def contrastive_loss(query_embs, pos_embs, hard_neg_embs, tau):
    """InfoNCE over {own positive} ∪ {own hard negatives} ∪ {other positives}.

    ``hard_neg_embs`` has shape (B, H, d); H may be 0. Cosine similarities
    are scaled by 1/tau and the loss is the mean cross-entropy at each
    query's own positive, computed through log-sum-exp.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    b, d = query_embs.shape
    if pos_embs.shape != (b, d):
        raise ValueError(
            f"pos_embs shape {pos_embs.shape} does not match queries {query_embs.shape}"
        )
    if hard_neg_embs.ndim != 3 or hard_neg_embs.shape[0] != b or hard_neg_embs.shape[2] != d:
        raise ValueError(
            f"hard_neg_embs shape {hard_neg_embs.shape} incompatible with (B={b}, H, d={d})"
        )
    qn = T.l2_normalize(query_embs, axis=-1)
    pn = T.l2_normalize(pos_embs, axis=-1)
    sim_pos = T.matmul(qn, T.transpose(pn, (1, 0)))  # (B, B); diagonal = own positive
    if hard_neg_embs.shape[1]:
        nn = T.l2_normalize(hard_neg_embs, axis=-1)
        sim_neg = T.reshape(
            T.matmul(T.reshape(qn, (b, 1, d)), T.transpose(nn, (0, 2, 1))),
            (b, hard_neg_embs.shape[1]),
        )
        logits = T.concat([sim_pos, sim_neg], axis=1) * (1.0 / tau)
    else:
        logits = sim_pos * (1.0 / tau)
    lp = T.log_softmax(logits, axis=1)
    own = T.gather(lp, np.arange(b)[:, None], axis=1)
    return -T.tmean(own)


def sft_loss(per_token_logps):
    """Mean negative log-likelihood over the positive passage's tokens."""
    lp = _as_tensor(per_token_logps)
    if lp.size == 0:
        raise ValueError("sft_loss needs at least one scored token")
    return -T.tmean(T.reshape(lp, (lp.size,)))


def generation_score(per_token_logps):
    """s_gen: length-normalized sequence log-likelihood (arithmetic mean)."""
    lp = _as_tensor(per_token_logps)
    if lp.size == 0:
        raise ValueError("generation_score needs at least one scored token")
    return T.tmean(T.reshape(lp, (lp.size,)))


def dpo_loss(policy_logp_pos, ref_logp_pos, policy_logp_negs, ref_logp_negs, beta):
    """Preference loss: −log σ(β·[(πp − rp) − (πn − rn)]), averaged over negatives.

    All log-probabilities are sequence SUMS. The reference values are
    constants; pass them detached.
    """
    pp, rp = _as_tensor(policy_logp_pos), _as_tensor(ref_logp_pos)
    pn, rn = _as_tensor(policy_logp_negs), _as_tensor(ref_logp_negs)
    if pn.size == 0:
        raise ValueError("dpo_loss needs at least one negative")
    if pn.shape != rn.shape:
        raise ValueError(
            f"policy/reference negative shapes differ: {pn.shape} vs {rn.shape}"
        )
    pn = T.reshape(pn, (pn.size,))
    rn = T.reshape(rn, (rn.size,))
    gap = ((pp - rp) - (pn - rn)) * float(beta)
    return -T.tmean(T.log_sigmoid(gap))


def relevance_distributions(s_rt, s_gen, tau):
    """Softmax both score lists over the candidate set.

    The representation scores are cosines and get sharpened by 1/tau;
    generation scores are already log-scale and are normalized as-is.
    """
    rt, gen = _as_tensor(s_rt), _as_tensor(s_gen)
    if rt.shape != gen.shape:
        raise ValueError(f"score shapes differ: {rt.shape} vs {gen.shape}")
    if rt.shape[-1] < 2:
        raise ValueError("relevance distributions need at least 2 candidates")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return T.softmax(rt * (1.0 / tau), axis=-1), T.softmax(gen, axis=-1)


def kl_consistency_loss(p_rt, p_gen):
    """KL(P_rt ‖ P_gen) over the last axis.

    Zero-probability P_rt entries contribute exactly 0; P_gen is floored at
    1e-12 inside the log. Inputs must each sum to 1 within 1e-6.
    """
    p, q = _as_tensor(p_rt), _as_tensor(p_gen)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    for name, dist in (("P_rt", p), ("P_gen", q)):
        sums = dist.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError(f"{name} rows must sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.3g})")
    log_ratio = T.log(T.clamp_min(p, KL_FLOOR)) - T.log(T.clamp_min(q, KL_FLOOR))
    return T.tsum(p * log_ratio, axis=-1)


def grl_total_loss(l_cl, l_dpo, l_kl, weights):
    """λ_CL·L_CL + λ_DPO·L_DPO + λ_KL·L_KL; a zero-weight branch may be None."""
    weights.validate()
    total = None
    for name, value, lam in (
        ("l_cl", l_cl, weights.lambda_cl),
        ("l_dpo", l_dpo, weights.lambda_dpo),
        ("l_kl", l_kl, weights.lambda_kl),
    ):
        if value is None:
            if lam != 0.0:
                raise ValueError(f"{name} is required when its weight is {lam}")
            continue
        value = _as_tensor(value)
        if not np.all(np.isfinite(value.data)):
            raise ValueError(f"{name} is not finite: {value.data}")
        term = value * lam
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all loss components disabled")
    return total
