"""Byte-level tokenization, dataset loading, collation, and a synthetic
retrieval task.

The vocabulary is the 256 byte values plus three specials, so any UTF-8
string round-trips without a trained tokenizer. BOS/EOS framing happens at
collation time, never inside tokenize().
"""

import collections
import dataclasses
import json
import os

import numpy as np

BYTE_VOCAB = 256
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

_KEY_MULTISET = "aaabbbccc"
_NOISE_LETTERS = "uvwxyz"


def tokenize(text):
    """UTF-8 bytes of ``text`` as a list of ids in [0, 255]."""
    return list(text.encode("utf-8"))


def detokenize(ids):
    """Inverse of tokenize; special tokens (BOS/EOS/PAD) are dropped."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise ValueError(f"token id {i} outside [0, {VOCAB_SIZE})")
        if i < BYTE_VOCAB:
            out.append(i)
    return out.decode("utf-8")


@dataclasses.dataclass(frozen=True)
class TrainExample:
    query: str
    positive: str
    negatives: tuple = ()

    def __post_init__(self):
        if not self.query:
            raise ValueError("query must be non-empty")
        if not self.positive:
            raise ValueError("positive must be non-empty")
        object.__setattr__(self, "negatives", tuple(self.negatives))


def load_examples(path):
    """Read one JSON object per line: {"query", "positive", "negatives"}."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                examples.append(
                    TrainExample(
                        query=obj["query"],
                        positive=obj["positive"],
                        negatives=tuple(obj.get("negatives", ())),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return examples


# ---------------------------------------------------------------------------
# Collation

@dataclasses.dataclass(frozen=True)
class TokenGroup:
    """Right-padded token matrix with its 0/1 mask.

    Every row is [BOS, bytes..., EOS, PAD...]; mask is 1 exactly on the
    non-pad prefix.
    """

    token_ids: np.ndarray
    attention_mask: np.ndarray

    @property
    def batch_size(self):
        return self.token_ids.shape[0]

    @property
    def max_len(self):
        return self.token_ids.shape[1]

    def lengths(self):
        return self.attention_mask.sum(axis=1)


@dataclasses.dataclass(frozen=True)
class Batch:
    """One contrastive training batch.

    Negatives from all examples are flattened into a single group;
    ``neg_offsets[i]:neg_offsets[i+1]`` addresses example i's rows.
    """

    query: TokenGroup
    positive: TokenGroup
    negatives: TokenGroup
    neg_offsets: np.ndarray

    @property
    def size(self):
        return self.query.batch_size

    def negatives_of(self, i):
        return int(self.neg_offsets[i]), int(self.neg_offsets[i + 1])


def _frame(text, max_len, label):
    ids = tokenize(text)
    if len(ids) + 2 > max_len:
        raise ValueError(
            f"{label}: framed length {len(ids) + 2} exceeds max_len {max_len}"
        )
    return [BOS_ID] + ids + [EOS_ID]


def pack_rows(rows):
    """Right-pad framed rows with PAD into (ids, mask) int64 matrices."""
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1
    return ids, mask


def collate_texts(texts, max_len, label="text"):
    """Frame and pad a list of strings into one TokenGroup."""
    if not texts:
        raise ValueError("cannot collate an empty list")
    rows = [_frame(t, max_len, f"{label} {i}") for i, t in enumerate(texts)]
    ids, mask = pack_rows(rows)
    return TokenGroup(token_ids=ids, attention_mask=mask)


def collate(examples, max_len):
    """Build a Batch from TrainExamples; padding is per group."""
    if not examples:
        raise ValueError("cannot collate an empty example list")
    queries = collate_texts([e.query for e in examples], max_len, "query")
    positives = collate_texts([e.positive for e in examples], max_len, "positive")
    neg_texts = []
    counts = []
    for e in examples:
        neg_texts.extend(e.negatives)
        counts.append(len(e.negatives))
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    if neg_texts:
        negatives = collate_texts(neg_texts, max_len, "negative")
    else:
        negatives = TokenGroup(
            token_ids=np.zeros((0, 2), dtype=np.int64),
            attention_mask=np.zeros((0, 2), dtype=np.int64),
        )
    return Batch(query=queries, positive=positives, negatives=negatives, neg_offsets=offsets)


def uncollate(group):
    """Recover the exact byte-token lists (specials stripped) from a group."""
    out = []
    for row, mask in zip(group.token_ids, group.attention_mask):
        valid = row[mask.astype(bool)]
        out.append([int(t) for t in valid if t < BYTE_VOCAB])
    return out


@dataclasses.dataclass(frozen=True)
class PairBatch:
    """Query/passage pairs framed for likelihood scoring.

    Rows follow [BOS, query, EOS, passage, EOS, PAD...]. ``score_mask`` has
    width L-1 and marks next-token positions whose target is a passage byte;
    the trailing EOS is context, never scored.
    """

    token_ids: np.ndarray
    attention_mask: np.ndarray
    score_mask: np.ndarray

    @property
    def batch_size(self):
        return self.token_ids.shape[0]

    def scored_counts(self):
        return self.score_mask.sum(axis=1)


def collate_pair_tokens(query_ids_list, passage_ids_list, max_len, label="pair"):
    if len(query_ids_list) != len(passage_ids_list):
        raise ValueError("query/passage lists differ in length")
    rows = []
    spans = []
    for i, (q_ids, p_ids) in enumerate(zip(query_ids_list, passage_ids_list)):
        total = len(q_ids) + len(p_ids) + 3
        if total > max_len:
            raise ValueError(
                f"{label} {i}: framed length {total} exceeds max_len {max_len}"
            )
        rows.append([BOS_ID] + list(q_ids) + [EOS_ID] + list(p_ids) + [EOS_ID])
        spans.append((len(q_ids) + 2, len(p_ids)))
    ids, mask = pack_rows(rows)
    score = np.zeros((len(rows), ids.shape[1] - 1), dtype=np.int64)
    for i, (start, n) in enumerate(spans):
        score[i, start - 1 : start - 1 + n] = 1
    return PairBatch(token_ids=ids, attention_mask=mask, score_mask=score)


def collate_pairs(query_texts, passage_texts, max_len, label="pair"):
    return collate_pair_tokens(
        [tokenize(q) for q in query_texts],
        [tokenize(p) for p in passage_texts],
        max_len,
        label=label,
    )


# ---------------------------------------------------------------------------
# Retrieval corpus files

@dataclasses.dataclass(frozen=True)
class RetrievalCorpus:
    """Documents, queries, and graded relevance judgments."""

    documents: tuple  # ((doc_id, text), ...)
    queries: tuple  # ((query_id, text), ...)
    qrels: dict  # query_id -> {doc_id: relevance}


def load_corpus(directory):
    docs = []
    with open(os.path.join(directory, "documents.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                docs.append((obj["id"], obj["text"]))
    queries = []
    with open(os.path.join(directory, "queries.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                queries.append((obj["id"], obj["text"]))
    qrels = {}
    with open(os.path.join(directory, "qrels.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                rel = int(obj["relevance"])
                if rel < 0:
                    raise ValueError(f"negative relevance for {obj['query_id']}")
                qrels.setdefault(obj["query_id"], {})[obj["doc_id"]] = rel
    return RetrievalCorpus(documents=tuple(docs), queries=tuple(queries), qrels=qrels)


def write_corpus(corpus, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "documents.jsonl"), "w", encoding="utf-8") as fh:
        for doc_id, text in corpus.documents:
            fh.write(json.dumps({"id": doc_id, "text": text}) + "\n")
    with open(os.path.join(directory, "queries.jsonl"), "w", encoding="utf-8") as fh:
        for query_id, text in corpus.queries:
            fh.write(json.dumps({"id": query_id, "text": text}) + "\n")
    with open(os.path.join(directory, "qrels.jsonl"), "w", encoding="utf-8") as fh:
        for query_id, judged in corpus.qrels.items():
            for doc_id, rel in judged.items():
                fh.write(
                    json.dumps(
                        {"query_id": query_id, "doc_id": doc_id, "relevance": rel}
                    )
                    + "\n"
                )


def write_examples(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(
                json.dumps(
                    {
                        "query": e.query,
                        "positive": e.positive,
                        "negatives": list(e.negatives),
                    }
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Synthetic retrieval task

def _permutation_keys(rng, n_keys, multiset=None):
    """Distinct keys that are permutations of one letter multiset.

    Sharing a single byte multiset across all keys means byte histograms
    carry no signal; only token order identifies a key. An untrained
    bag-of-bytes ranker therefore sits at chance while the task stays
    solvable by order-aware attention. Repeated letters keep the bigram
    statistics of each key dense, so partial order features already
    separate many key pairs.
    """
    letters = list(multiset if multiset is not None else _KEY_MULTISET)
    counts = collections.Counter(letters)
    limit = int(np.prod(range(1, len(letters) + 1)))
    for c in counts.values():
        limit //= int(np.prod(range(1, c + 1)))
    if n_keys > limit:
        raise ValueError(f"n_keys={n_keys} exceeds the {limit} representable keys")
    seen = set()
    keys = []
    while len(keys) < n_keys:
        key = "".join(rng.permutation(letters))
        if key not in seen:
            seen.add(key)
            keys.append(key)
    return keys


def _noise_word(rng, lo=2, hi=5):
    n = int(rng.integers(lo, hi))
    return "".join(_NOISE_LETTERS[int(c)] for c in rng.integers(0, len(_NOISE_LETTERS), n))


def _passage(key, rng, lo=2, hi=5):
    return f"p {key} {_noise_word(rng, lo, hi)}"


def make_synthetic_task(seed, n_train, n_eval, n_keys, n_negatives=8):
    """Seeded key-lookup retrieval task.

    Queries ask for a key ("find <key>"); passages state it
    ("record <key> <noise>"). Train and eval share the key set but never a
    passage string: eval documents draw noise from a separate stream. The
    eval split has one document per key and exactly one relevant document
    per query.
    """
    if n_keys < 2:
        raise ValueError("n_keys must be at least 2")
    if n_eval > n_keys:
        raise ValueError(f"n_eval={n_eval} exceeds n_keys={n_keys}")
    rng = np.random.default_rng((seed, 0))
    keys = _permutation_keys(rng, n_keys)

    # Eval documents come first so training passages can be rejection-
    # sampled against them: both splits share one noise distribution (no
    # length or alphabet shift), yet no eval document text ever appears as
    # a training passage.
    eval_rng = np.random.default_rng((seed, 2))
    documents = tuple(
        (f"d{i:04d}", _passage(k, eval_rng)) for i, k in enumerate(keys)
    )
    held_out = {text for _, text in documents}

    train_rng = np.random.default_rng((seed, 1))

    def fresh_passage(key):
        while True:
            text = _passage(key, train_rng)
            if text not in held_out:
                return text

    examples = []
    for i in range(n_train):
        key = keys[i % n_keys]
        others = [k for k in keys if k != key]
        idx = train_rng.choice(len(others), size=min(n_negatives, len(others)), replace=False)
        negatives = tuple(fresh_passage(others[int(j)]) for j in idx)
        examples.append(
            TrainExample(
                query=f"q {key}",
                positive=fresh_passage(key),
                negatives=negatives,
            )
        )

    queries = tuple((f"q{i:04d}", f"q {keys[i]}") for i in range(n_eval))
    qrels = {f"q{i:04d}": {f"d{i:04d}": 1} for i in range(n_eval)}
    return examples, RetrievalCorpus(documents=documents, queries=queries, qrels=qrels)
