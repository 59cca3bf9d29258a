"""Retrieval and similarity evaluation: embed, rank, and score corpora.

Scoring is exact and exhaustive — every query is compared against every
document by cosine similarity, then ranked with a deterministic tie rule
(descending score, ascending document id). Metrics follow the standard
formulations: graded nDCG with gain 2^rel − 1, average precision over
relevant ranks, and Spearman correlation with tie-averaged ranks.
"""

import dataclasses
import datetime
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .data import collate_texts, tokenize
from .model import encode


@dataclasses.dataclass(frozen=True)
class RankedList:
    """One query's documents ordered by descending score, ties by id."""

    query_id: str
    doc_ids: tuple
    scores: tuple

    def __post_init__(self):
        if len(self.doc_ids) != len(self.scores):
            raise ValueError("doc_ids and scores differ in length")
        for a, b in zip(self.scores, self.scores[1:]):
            if b > a:
                raise ValueError("scores must be non-increasing")


@dataclasses.dataclass
class EvalReport:
    """Aggregate and per-query metric values for one corpus run."""

    dataset: str
    metrics: dict  # metric name -> aggregate value
    per_query: dict  # metric name -> {query_id: value}
    checkpoint: str
    timestamp: str
    main_metric: str

    def validate(self):
        for name, value in self.metrics.items():
            per = self.per_query.get(name)
            if not per:
                raise ValueError(f"metric {name} has no per-query breakdown")
            mean = sum(per.values()) / len(per)
            if abs(mean - value) > 1e-9:
                raise ValueError(
                    f"aggregate {name}={value} deviates from per-query mean {mean}"
                )
        return self

    @property
    def main_score(self):
        return self.metrics[self.main_metric]

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Embedding

def _check_embeddable(texts, ids, max_len, label):
    for text_id, text in zip(ids, texts):
        framed = len(tokenize(text)) + 2
        if framed > max_len:
            raise ValueError(
                f"cannot embed {label} {text_id!r}: framed length {framed} "
                f"exceeds max_seq_len {max_len}"
            )


def _worker_count():
    raw = os.environ.get("GRLE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"GRLE_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def embed_texts(model, texts, ids=None, label="text", batch_size=64):
    """Embed a list of strings into an (N, d) array, in order.

    Batches are independent, so the result does not depend on worker
    count; ``GRLE_THREADS`` only sets how many run concurrently.
    """
    if not texts:
        raise ValueError(f"no {label}s to embed")
    if ids is None:
        ids = [str(i) for i in range(len(texts))]
    _check_embeddable(texts, ids, model.config.max_seq_len, label)

    slabs = [
        list(texts[lo : lo + batch_size]) for lo in range(0, len(texts), batch_size)
    ]

    def run(slab):
        group = collate_texts(slab, model.config.max_seq_len, label)
        return encode(model, group).data

    with T.no_grad():
        workers = _worker_count()
        if workers > 1 and len(slabs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(run, slabs))
        else:
            parts = [run(s) for s in slabs]
    return np.concatenate(parts, axis=0)


def _unit_rows(embs, ids, label):
    norms = np.linalg.norm(embs, axis=1, keepdims=True)
    bad = np.where(norms[:, 0] == 0.0)[0]
    if bad.size:
        raise ValueError(f"cannot rank {label} {ids[int(bad[0])]!r}: zero-norm embedding")
    return embs / norms


def _rank_from_embeddings(query_ids, query_embs, doc_ids, doc_embs):
    qn = _unit_rows(query_embs, query_ids, "query")
    dn = _unit_rows(doc_embs, doc_ids, "document")
    id_key = np.array(doc_ids)
    ranked = []
    for qi, q in zip(query_ids, qn):
        scores = dn @ q
        # lexsort's last key is primary: descending score, then ascending id.
        order = np.lexsort((id_key, -scores))
        ranked.append(
            RankedList(
                query_id=qi,
                doc_ids=tuple(doc_ids[int(i)] for i in order),
                scores=tuple(float(scores[int(i)]) for i in order),
            )
        )
    return ranked


def rank_corpus(model, queries, documents, batch_size=64):
    """Rank every document for every query; returns one RankedList per query."""
    if not documents:
        raise ValueError("corpus has no documents")
    if not queries:
        raise ValueError("corpus has no queries")
    doc_ids = [d for d, _ in documents]
    query_ids = [q for q, _ in queries]
    doc_embs = embed_texts(
        model, [t for _, t in documents], doc_ids, "document", batch_size
    )
    query_embs = embed_texts(
        model, [t for _, t in queries], query_ids, "query", batch_size
    )
    return _rank_from_embeddings(query_ids, query_embs, doc_ids, doc_embs)


# ---------------------------------------------------------------------------
# Metrics

def ndcg_at_k(ranked, qrels, k=10):
    """Graded nDCG: gain 2^rel − 1, discount log2(rank + 1), rank from 1.

    The cutoff applies to the ranking only; the normalizer is the query's
    full ideal DCG. That keeps nDCG@k monotone non-decreasing in k (a
    truncated ideal would not be), and the two readings coincide whenever
    a query has at most k relevant documents — e.g. single-relevant qrels.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    rels = qrels.get(ranked.query_id, {})
    ideal = sorted((r for r in rels.values() if r > 0), reverse=True)
    if not ideal:
        return 0.0
    dcg = 0.0
    for i, doc_id in enumerate(ranked.doc_ids[:k]):
        rel = rels.get(doc_id, 0)
        if rel > 0:
            dcg += (2.0**rel - 1.0) / math.log2(i + 2)
    idcg = sum((2.0**r - 1.0) / math.log2(i + 2) for i, r in enumerate(ideal))
    return dcg / idcg


def average_precision(ranked, qrels):
    """Mean of precision-at-rank over relevant ranks, over total relevant."""
    rels = qrels.get(ranked.query_id, {})
    total = sum(1 for r in rels.values() if r > 0)
    if total == 0:
        return 0.0
    hits = 0
    acc = 0.0
    for i, doc_id in enumerate(ranked.doc_ids, start=1):
        if rels.get(doc_id, 0) > 0:
            hits += 1
            acc += hits / i
    return acc / total


def mean_average_precision(ranked_lists, qrels):
    if not ranked_lists:
        raise ValueError("mean_average_precision needs at least one query")
    return sum(average_precision(r, qrels) for r in ranked_lists) / len(ranked_lists)


def _average_ranks(values):
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # mean of 1-based ranks
        i = j + 1
    return ranks


def spearman(pred_scores, gold_scores):
    """Rank correlation: Pearson over tie-averaged ranks."""
    p = np.asarray(pred_scores, dtype=np.float64)
    g = np.asarray(gold_scores, dtype=np.float64)
    if p.ndim != 1 or p.shape != g.shape:
        raise ValueError(f"score lists differ in shape: {p.shape} vs {g.shape}")
    if p.size < 2:
        raise ValueError("spearman needs at least 2 observations")
    for name, arr in (("pred", p), ("gold", g)):
        if np.all(arr == arr[0]):
            raise ValueError(f"spearman undefined: {name} scores have zero variance")
    rp = _average_ranks(p)
    rg = _average_ranks(g)
    a = rp - rp.mean()
    b = rg - rg.mean()
    return float(np.sum(a * b) / math.sqrt(np.sum(a * a) * np.sum(b * b)))


# ---------------------------------------------------------------------------
# Corpus evaluation

def parse_metric(name):
    if name == "map" or name == "spearman":
        return name, None
    if name.startswith("ndcg@"):
        try:
            k = int(name.split("@", 1)[1])
        except ValueError:
            k = 0
        if k >= 1:
            return "ndcg", k
    raise ValueError(f"unknown metric {name!r}; expected ndcg@K, map, or spearman")


def _corpus_digest(corpus):
    h = hashlib.sha256()
    for doc_id, text in corpus.documents:
        h.update(doc_id.encode())
        h.update(b"\x1e")
        h.update(text.encode())
        h.update(b"\x1f")
    return h.hexdigest()


def _cached_doc_embeddings(model, corpus, cache_dir, checkpoint_id, batch_size):
    doc_ids = [d for d, _ in corpus.documents]
    texts = [t for _, t in corpus.documents]
    if not cache_dir or not checkpoint_id:
        return embed_texts(model, texts, doc_ids, "document", batch_size)
    key = hashlib.sha256(
        f"{checkpoint_id}\n{_corpus_digest(corpus)}\n{batch_size}".encode()
    ).hexdigest()[:16]
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"docembs-{key}.npz")
    if os.path.exists(path):
        with np.load(path) as npz:
            return npz["embeddings"].copy()
    embs = embed_texts(model, texts, doc_ids, "document", batch_size)
    np.savez(path, embeddings=embs)
    return embs


def evaluate(
    model,
    corpus,
    metrics=("ndcg@10", "map"),
    dataset="corpus",
    checkpoint_id="",
    cache_dir=None,
    batch_size=64,
):
    """Run the requested metrics over a corpus; first metric is the main score."""
    if not metrics:
        raise ValueError("no metrics requested")
    parsed = [(name, parse_metric(name)) for name in metrics]
    if not corpus.documents:
        raise ValueError("corpus has no documents")
    if not corpus.queries:
        raise ValueError("corpus has no queries")

    doc_embs = _cached_doc_embeddings(model, corpus, cache_dir, checkpoint_id, batch_size)
    doc_ids = [d for d, _ in corpus.documents]
    query_ids = [q for q, _ in corpus.queries]
    query_embs = embed_texts(
        model, [t for _, t in corpus.queries], query_ids, "query", batch_size
    )
    ranked_lists = _rank_from_embeddings(query_ids, query_embs, doc_ids, doc_embs)

    per_query = {name: {} for name in metrics}
    for ranked in ranked_lists:
        for name, (kind, k) in parsed:
            if kind == "ndcg":
                value = ndcg_at_k(ranked, corpus.qrels, k)
            elif kind == "map":
                value = average_precision(ranked, corpus.qrels)
            else:
                rels = corpus.qrels.get(ranked.query_id, {})
                gold = [rels.get(d, 0) for d in ranked.doc_ids]
                value = spearman(list(ranked.scores), gold)
            per_query[name][ranked.query_id] = value

    aggregates = {
        name: sum(vals.values()) / len(vals) for name, vals in per_query.items()
    }
    report = EvalReport(
        dataset=dataset,
        metrics=aggregates,
        per_query=per_query,
        checkpoint=checkpoint_id,
        timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        main_metric=metrics[0],
    )
    return report.validate()
