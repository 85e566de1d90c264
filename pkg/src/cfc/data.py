"""Dataset ingestion, tokenization, vocabulary, masking and batching."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmbeddingParseError, IngestionError
from .layers import PAD_ID, UNK_ID, EmbeddingTable
from .mentions import find_all_mentions, find_mentions

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"

_TOKEN = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and break punctuation into its own tokens.

    >>> tokenize("The Troll.")
    ['the', 'troll', '.']
    """
    return _TOKEN.findall(text.lower())


def split_query(raw_query: str) -> list[str]:
    """``"country_of_origin the troll"`` -> ``['country', 'of', 'origin', 'the', 'troll']``."""
    if not raw_query or not raw_query.strip():
        raise IngestionError("empty query")
    return tokenize(raw_query.replace("_", " "))


@dataclass
class Example:
    id: str
    query: list[str]
    supports: list[list[str]]
    candidates: list[list[str]]
    answer_index: Optional[int] = None

    def validate(self) -> None:
        problems = []
        if not self.query:
            problems.append("empty query")
        if len(self.supports) < 1:
            problems.append("no support documents")
        if len(self.candidates) < 2:
            problems.append(f"needs >= 2 candidates, has {len(self.candidates)}")
        if any(not s for s in self.supports):
            problems.append("empty support document")
        if any(not c for c in self.candidates):
            problems.append("empty candidate")
        if self.answer_index is not None and not 0 <= self.answer_index < len(self.candidates):
            problems.append(f"answer index {self.answer_index} out of range")
        if problems:
            raise IngestionError(f"{self.id}: " + "; ".join(problems), {self.id: "; ".join(problems)})

    @property
    def n_supports(self) -> int:
        return len(self.supports)

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)


def example_from_record(rec: dict) -> Example:
    rid = rec.get("id")
    if not isinstance(rid, str) or not rid:
        raise IngestionError("record without an id", {"?": "missing id"})
    for key in ("query", "supports", "candidates"):
        if key not in rec:
            raise IngestionError(f"{rid}: missing field {key!r}", {rid: f"missing field {key!r}"})
    if not isinstance(rec["supports"], list) or not isinstance(rec["candidates"], list):
        raise IngestionError(f"{rid}: supports/candidates must be arrays", {rid: "bad field type"})
    answer_index = None
    if rec.get("answer") is not None:
        try:
            answer_index = rec["candidates"].index(rec["answer"])
        except ValueError:
            raise IngestionError(f"{rid}: answer not among candidates",
                                 {rid: "answer not among candidates"}) from None
    ex = Example(
        id=rid,
        query=split_query(rec["query"]) if str(rec["query"]).strip() else [],
        supports=[tokenize(s) for s in rec["supports"]],
        candidates=[tokenize(c) for c in rec["candidates"]],
        answer_index=answer_index,
    )
    ex.validate()
    return ex


def read_records(path) -> tuple[list[Example], dict[str, str]]:
    """Parse a WikiHop-layout JSON file; return valid examples and ``{id: reason}`` rejects."""
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise IngestionError(f"{path}: expected a JSON array of records")
    examples, rejected = [], {}
    for pos, rec in enumerate(records):
        try:
            if not isinstance(rec, dict):
                raise IngestionError("record is not an object", {f"#{pos}": "not an object"})
            examples.append(example_from_record(rec))
        except IngestionError as e:
            for key, why in (e.problems or {f"#{pos}": str(e)}).items():
                rejected[key if key != "?" else f"#{pos}"] = why
    return examples, rejected


def load_dataset(path, strict: bool = True) -> list[Example]:
    """Load examples; with ``strict`` any rejected record raises (listing every reject)."""
    examples, rejected = read_records(path)
    if rejected:
        if strict:
            raise IngestionError(
                f"{path}: {len(rejected)} record(s) rejected: "
                + ", ".join(f"{k} ({v})" for k, v in rejected.items()),
                rejected,
            )
        for rid, why in rejected.items():
            log.warning("skipping record %s: %s", rid, why)
    return examples


def truncate(examples: Sequence[Example], max_query: Optional[int] = None,
             max_doc: Optional[int] = None) -> list[Example]:
    """Clip queries and support documents to at most ``max_*`` tokens (``None``: no limit)."""
    for lim in (max_query, max_doc):
        if lim is not None and lim < 1:
            raise ValueError("truncation limits must be positive")
    return [replace(ex, query=ex.query[:max_query],
                    supports=[s[:max_doc] for s in ex.supports]) for ex in examples]


def example_to_record(ex: Example) -> dict:
    rec = {
        "id": ex.id,
        "query": " ".join(ex.query),
        "supports": [" ".join(s) for s in ex.supports],
        "candidates": [" ".join(c) for c in ex.candidates],
    }
    if ex.answer_index is not None:
        rec["answer"] = rec["candidates"][ex.answer_index]
    return rec


def save_dataset(examples: Iterable[Example], path) -> None:
    recs = [example_to_record(ex) for ex in examples]
    Path(path).write_text(json.dumps(recs, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- vocabulary ---------------------------------------------------------------

class Vocabulary:
    """Frozen token <-> id map; id 0 is padding, id 1 the unknown token."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, datasets: Iterable[Sequence[Example]], min_count: int = 1) -> "Vocabulary":
        counts = Counter()
        for data in datasets:
            for ex in data:
                counts.update(ex.query)
                for seq in ex.supports:
                    counts.update(seq)
                for seq in ex.candidates:
                    counts.update(seq)
        ordered = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(ordered)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


# -- masked mode -------------------------------------------------------------

def mask_candidates(examples: Sequence[Example], rng: np.random.Generator,
                    n_placeholders: int = 100) -> list[Example]:
    """Replace every distinct candidate by a random single-token placeholder.

    Placeholders are unique within an example and substituted in the
    candidate list and at every lexical mention in the support documents.
    Longer candidates are substituted first, so a candidate nested inside a
    longer one loses the mentions it shared with it.
    """
    out = []
    for ex in examples:
        distinct = list(dict.fromkeys(tuple(c) for c in ex.candidates))
        if len(distinct) > n_placeholders:
            raise ValueError(f"{ex.id}: more candidates than placeholders")
        codes = rng.choice(n_placeholders, size=len(distinct), replace=False)
        name = {cand: f"__cand{int(k)}__" for cand, k in zip(distinct, codes)}
        supports = [list(doc) for doc in ex.supports]
        for cand in sorted(distinct, key=len, reverse=True):
            for d, doc in enumerate(supports):
                spans = find_mentions(doc, list(cand))
                for span in reversed(spans):
                    doc[span.start:span.end] = [name[cand]]
                supports[d] = doc
        out.append(replace(
            ex,
            supports=supports,
            candidates=[[name[tuple(c)]] for c in ex.candidates],
        ))
    return out


def mention_counts(example: Example) -> list[int]:
    return [len(spans) for spans in find_all_mentions(example)]


# -- embeddings --------------------------------------------------------------

@dataclass
class EmbeddingCoverage:
    lines: dict = field(default_factory=dict)     # file -> vectors read
    covered: dict = field(default_factory=dict)   # file -> in-vocabulary tokens filled


def _read_vectors(path, vocab: Vocabulary):
    width = None
    hits = {}
    n = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # word2vec-style "count dim" header
            token, raw = parts[0], [p for p in parts[1:] if p]
            if not raw:
                raise EmbeddingParseError(f"{path}:{lineno}: no vector values")
            try:
                vec = np.array([float(v) for v in raw])
            except ValueError:
                raise EmbeddingParseError(f"{path}:{lineno}: non-numeric vector value") from None
            if width is None:
                width = vec.size
            elif vec.size != width:
                raise EmbeddingParseError(f"{path}:{lineno}: expected {width} values, got {vec.size}")
            n += 1
            if token in vocab.stoi and token not in hits:
                hits[token] = vec
    return width, hits, n


def load_embeddings(vocab: Vocabulary, d_emb: int, word_path=None, char_path=None,
                    rng: Optional[np.random.Generator] = None, word_dim: Optional[int] = None):
    """Fixed embedding table from up to two vector files, concatenated word | char.

    Tokens (or segments) a file does not cover are drawn from U[-0.1, 0.1].
    Returns ``(table, coverage)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    matrix = rng.uniform(-0.1, 0.1, size=(len(vocab), d_emb))
    cov = EmbeddingCoverage()
    offset = 0
    for path, fallback_width in ((word_path, word_dim), (char_path, None)):
        if path is None:
            continue
        width, hits, n = _read_vectors(path, vocab)
        width = width or fallback_width or (d_emb - offset)
        if offset + width > d_emb:
            raise EmbeddingParseError(f"{path}: vectors of width {width} overflow d_emb={d_emb}")
        for token, vec in hits.items():
            matrix[vocab.stoi[token], offset:offset + width] = vec
        cov.lines[str(path)] = n
        cov.covered[str(path)] = len(hits)
        offset += width
    matrix[PAD_ID] = 0.0
    return EmbeddingTable(matrix, fixed=True), cov


# -- batching ----------------------------------------------------------------

def _pad(seqs: Sequence[Sequence[int]]):
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _slots(counts: Sequence[int]):
    n = max(counts)
    slots = np.zeros((len(counts), n), dtype=np.int64)
    mask = np.zeros((len(counts), n), dtype=bool)
    start = 0
    for i, c in enumerate(counts):
        slots[i, :c] = np.arange(start, start + c)
        mask[i, :c] = True
        start += c
    return slots, mask


@dataclass
class Batch:
    """Padded id arrays for a list of examples.

    Documents and candidates of all examples are flattened (``D`` and ``C``
    rows); ``*_owner`` maps each row to its example and ``*_slots`` lays the
    rows back out per example. Mentions are expressed as flat row indices
    into the ``[D * T_s]`` stack of document positions.
    """

    ids: list[str]
    query: np.ndarray
    query_mask: np.ndarray
    docs: np.ndarray
    doc_mask: np.ndarray
    doc_owner: np.ndarray
    doc_slots: np.ndarray
    doc_slot_mask: np.ndarray
    cands: np.ndarray
    cand_mask: np.ndarray
    cand_owner: np.ndarray
    cand_slots: np.ndarray
    cand_slot_mask: np.ndarray
    answers: np.ndarray
    mentions: list            # per flat candidate: list of (flat doc, start, end)
    mention_rows: np.ndarray  # [K, L] flat positions in docs
    mention_mask: np.ndarray
    fine_cands: np.ndarray    # flat candidates with >= 1 mention
    fine_slots: np.ndarray    # [len(fine_cands), N_m] indices into the K mentions
    fine_slot_mask: np.ndarray
    fine_lookup: np.ndarray   # [C] index into fine_cands, or len(fine_cands) if none

    @property
    def size(self) -> int:
        return len(self.ids)


def pad_and_mask(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    if not examples:
        raise ValueError("cannot batch an empty list of examples")
    query, query_mask = _pad([vocab.encode(ex.query) for ex in examples])
    docs_tok = [vocab.encode(d) for ex in examples for d in ex.supports]
    cands_tok = [vocab.encode(c) for ex in examples for c in ex.candidates]
    docs, doc_mask = _pad(docs_tok)
    cands, cand_mask = _pad(cands_tok)
    doc_owner = np.repeat(np.arange(len(examples)), [ex.n_supports for ex in examples])
    cand_owner = np.repeat(np.arange(len(examples)), [ex.n_candidates for ex in examples])
    doc_slots, doc_slot_mask = _slots([ex.n_supports for ex in examples])
    cand_slots, cand_slot_mask = _slots([ex.n_candidates for ex in examples])
    answers = np.array([-1 if ex.answer_index is None else ex.answer_index for ex in examples])

    t_s = docs.shape[1]
    mentions, span_rows, per_cand = [], [], []
    doc_base = 0
    for ex in examples:
        for spans in find_all_mentions(ex):
            flat = [(doc_base + s.doc_index, s.start, s.end) for s in spans]
            mentions.append(flat)
            ids = []
            for d, a, b in flat:
                ids.append(len(span_rows))
                span_rows.append(np.arange(a, b) + d * t_s)
            per_cand.append(ids)
        doc_base += ex.n_supports
    if span_rows:
        mention_rows, mention_mask = _pad(span_rows)
    else:
        mention_rows = np.zeros((0, 1), dtype=np.int64)
        mention_mask = np.zeros((0, 1), dtype=bool)
    fine_cands = np.array([c for c, ids in enumerate(per_cand) if ids], dtype=np.int64)
    if fine_cands.size:
        fine_slots, fine_slot_mask = _pad([per_cand[c] for c in fine_cands])
    else:
        fine_slots = np.zeros((0, 1), dtype=np.int64)
        fine_slot_mask = np.zeros((0, 1), dtype=bool)
    fine_lookup = np.full(len(cands_tok), len(fine_cands), dtype=np.int64)
    fine_lookup[fine_cands] = np.arange(len(fine_cands))
    return Batch(
        ids=[ex.id for ex in examples],
        query=query, query_mask=query_mask,
        docs=docs, doc_mask=doc_mask, doc_owner=doc_owner,
        doc_slots=doc_slots, doc_slot_mask=doc_slot_mask,
        cands=cands, cand_mask=cand_mask, cand_owner=cand_owner,
        cand_slots=cand_slots, cand_slot_mask=cand_slot_mask,
        answers=answers, mentions=mentions,
        mention_rows=mention_rows, mention_mask=mention_mask,
        fine_cands=fine_cands, fine_slots=fine_slots, fine_slot_mask=fine_slot_mask,
        fine_lookup=fine_lookup,
    )


def unpad(batch: Batch, vocab: Vocabulary) -> list[dict]:
    """Recover per-example token lists from a batch (inverse of :func:`pad_and_mask`)."""
    def rows(ids, mask, which):
        return [vocab.decode(ids[i][mask[i]]) for i in which]

    out = []
    for b, ex_id in enumerate(batch.ids):
        docs = batch.doc_slots[b][batch.doc_slot_mask[b]]
        cands = batch.cand_slots[b][batch.cand_slot_mask[b]]
        out.append({
            "id": ex_id,
            "query": vocab.decode(batch.query[b][batch.query_mask[b]]),
            "supports": rows(batch.docs, batch.doc_mask, docs),
            "candidates": rows(batch.cands, batch.cand_mask, cands),
        })
    return out
