"""Seeded two-hop multiple-choice data for desk-scale learning checks.

An example asks ``r<k> S``: which candidate is linked to subject ``S``
through ``r<k>`` and also carries ``r<k>`` itself.

* The link document relates ``S`` to every candidate. About half of them,
  the answer included, are linked through ``r<k>``; the rest through other
  relations.
* The property document lists every candidate with one relation. The
  answer and the candidates the link document did not pick carry ``r<k>``.
* Distractor documents state the same kinds of facts about other subjects
  and non-candidate entities, under other relations.

Every candidate is mentioned once in each hop document. Neither hop document
singles out the answer; their intersection does.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .data import Example
from .errors import ConfigError

STOP = "."
N_RELATIONS = 8
RELATIONS = tuple(f"r{k}" for k in range(N_RELATIONS))


def _entities(vocab_size: int) -> list[str]:
    n_ent = vocab_size - 1 - N_RELATIONS
    return [f"e{i}" for i in range(max(n_ent, 0))]


def _link_doc(subject, pairs):
    out = []
    for rel, item in pairs:
        out += [subject, rel, item, STOP]
    return out


def _prop_doc(pairs):
    out = []
    for rel, item in pairs:
        out += [item, rel, STOP]
    return out


def gen_synthetic(n: int, n_docs: int = 4, n_cands: int = 5, vocab_size: int = 200,
                  rng: Optional[np.random.Generator] = None, id_prefix: str = "syn") -> list[Example]:
    """``n`` labelled two-hop examples over at most ``vocab_size`` token types."""
    if n < 0:
        raise ConfigError("n must be non-negative")
    if n_docs < 2:
        raise ConfigError("two-hop examples need at least 2 documents")
    if n_cands < 3:
        # with 2 candidates one hop document would pick out the answer alone
        raise ConfigError("unique two-hop answers need at least 3 candidates")
    entities = _entities(vocab_size)
    n_distract = n_docs - 2
    need = 1 + n_cands + n_distract * (1 + n_cands)
    if len(entities) < need:
        raise ConfigError(f"vocab_size {vocab_size} too small for {n_cands} candidates "
                          f"and {n_docs} documents (needs {need + 1 + N_RELATIONS})")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_link = 1 + n_cands // 2    # candidates linked through the query relation, answer included
    out = []
    for i in range(n):
        ents = [entities[j] for j in rng.choice(len(entities), size=need, replace=False)]
        subject, cands, rest = ents[0], ents[1:n_cands + 1], ents[n_cands + 1:]
        k = int(rng.integers(N_RELATIONS))
        rel = RELATIONS[k]
        others = [r for r in RELATIONS if r != rel]

        def other():
            return others[rng.integers(len(others))]

        answer = int(rng.integers(n_cands))
        wrong = [j for j in range(n_cands) if j != answer]
        wrong = [wrong[j] for j in rng.permutation(len(wrong))]
        linked = {answer, *wrong[: n_link - 1]}
        link_pairs = [(rel if j in linked else other(), cands[j]) for j in range(n_cands)]
        prop_pairs = [(rel if j == answer or j not in linked else other(), cands[j])
                      for j in range(n_cands)]
        docs = [
            _link_doc(subject, [link_pairs[j] for j in rng.permutation(n_cands)]),
            _prop_doc([prop_pairs[j] for j in rng.permutation(n_cands)]),
        ]
        for d in range(n_distract):
            block = rest[d * (1 + n_cands):(d + 1) * (1 + n_cands)]
            pairs = [(other(), e) for e in block[1:]]
            docs.append(_link_doc(block[0], pairs) if d % 2 == 0 else _prop_doc(pairs))
        docs = [docs[j] for j in rng.permutation(len(docs))]
        ex = Example(f"{id_prefix}{i:05d}", [rel, subject], docs, [[c] for c in cands], answer)
        ex.validate()
        out.append(ex)
    return out


# -- reference solvers -------------------------------------------------------

def _facts(doc: Sequence[str]):
    """``("link", subject, relation, item)`` and ``("prop", item, relation)`` facts."""
    facts = []
    sent: list[str] = []
    for tok in doc:
        if tok != STOP:
            sent.append(tok)
            continue
        if len(sent) == 3:
            facts.append(("link", sent[0], sent[1], sent[2]))
        elif len(sent) == 2:
            facts.append(("prop", sent[0], sent[1]))
        sent = []
    return facts


def _hop_sets(example: Example, docs):
    rel, subject = example.query[0], example.query[-1]
    linked, having = set(), set()
    for doc in docs:
        for fact in _facts(doc):
            if fact[0] == "link" and fact[1] == subject and fact[2] == rel:
                linked.add(fact[3])
            elif fact[0] == "prop" and fact[2] == rel:
                having.add(fact[1])
    return linked, having


def solve_symbolic(example: Example) -> Optional[int]:
    """Follow both hops and intersect; ``None`` unless exactly one candidate survives."""
    linked, having = _hop_sets(example, example.supports)
    hits = [j for j, c in enumerate(example.candidates) if c[0] in linked and c[0] in having]
    return hits[0] if len(hits) == 1 else None


def single_document_odds(example: Example, doc_index: int) -> float:
    """Chance that the best solver reading only ``supports[doc_index]`` is right.

    A hop document narrows the answer to the candidates it relates through
    the query relation, and the solver guesses uniformly among them. Other
    documents say nothing about the answer.
    """
    if example.answer_index is None:
        raise ValueError("example has no answer")
    linked, having = _hop_sets(example, [example.supports[doc_index]])
    listed = linked | having
    pool = [j for j, c in enumerate(example.candidates) if c[0] in listed]
    if not pool:
        return 1.0 / example.n_candidates
    return (example.answer_index in pool) / len(pool)


def single_document_accuracy(examples: Sequence[Example]) -> float:
    """Expected accuracy when each example is answered from one uniformly chosen document."""
    per = [np.mean([single_document_odds(ex, d) for d in range(ex.n_supports)]) for ex in examples]
    return float(np.mean(per))


# -- desk-scale recipe -------------------------------------------------------

SYNTHETIC_EMBEDDING_SCALE = 1.0


def synthetic_model_config(d_hid: int = 32, d_emb: int = 50, **kw):
    """Model settings for synthetic runs: light dropout, no word dropout."""
    from .model import ModelConfig
    rates = dict(emb=0.1, enc=0.1, coattn=0.1, selfattn=0.1, word=0.0)
    return ModelConfig(d_emb=d_emb, d_hid=d_hid, dropout=rates, **kw)


def synthetic_train_config(epochs: int = 100, seed: int = 0, model=None, **kw):
    from .training import TrainConfig
    opts = dict(batch_size=10, lr=3e-3)
    opts.update(kw)
    return TrainConfig(epochs=epochs, seed=seed, model=model or synthetic_model_config(), **opts)


def synthetic_splits(n_train: int = 200, n_dev: int = 100, seed: int = 0, **kw):
    """Disjointly seeded train and dev splits."""
    rng = np.random.default_rng(seed)
    return (gen_synthetic(n_train, rng=rng, id_prefix="train", **kw),
            gen_synthetic(n_dev, rng=rng, id_prefix="dev", **kw))


def random_embeddings(vocab, d_emb: int, seed: int = 0, scale: float = SYNTHETIC_EMBEDDING_SCALE):
    """Fixed U[-scale, scale] table (padding row zero)."""
    from .layers import EmbeddingTable
    return EmbeddingTable.random(len(vocab), d_emb, np.random.default_rng(seed), scale=scale)
