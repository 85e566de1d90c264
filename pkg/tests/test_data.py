"""Tokenizer, ingestion, vocabulary, masking, embeddings and batching."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfc.data import (
    Example,
    Vocabulary,
    example_to_record,
    load_dataset,
    load_embeddings,
    mask_candidates,
    mention_counts,
    pad_and_mask,
    read_records,
    save_dataset,
    split_query,
    tokenize,
    truncate,
    unpad,
)
from cfc.errors import EmbeddingParseError, IngestionError
from cfc.layers import PAD_ID, UNK_ID
from cfc.mentions import find_mentions
from cfc.tensor import Tensor, softmax_masked

from conftest import toy_examples

RECORDS = [
    {"id": "r1", "query": "country_of_origin the troll", "answer": "norway",
     "candidates": ["norway", "sweden"], "supports": ["The Troll is from Norway.", "Sweden is near."]},
    {"id": "r2", "query": "instance_of qilakitsoq", "answer": "archaeological site",
     "candidates": ["archaeological site", "town", "river"],
     "supports": ["Qilakitsoq is an archaeological site in Greenland."]},
]


def write(tmp_path, recs, name="d.json"):
    p = tmp_path / name
    p.write_text(json.dumps(recs))
    return p


def test_tokenize():
    assert tokenize("The Troll.") == ["the", "troll", "."]
    assert tokenize("") == []
    assert tokenize("U.S.-based, co-op") == ["u", ".", "s", ".", "-", "based", ",", "co", "-", "op"]


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcXYZ .,;!-'_\t\n", max_size=40))
def test_tokenize_idempotent(s):
    toks = tokenize(s)
    assert tokenize(" ".join(toks)) == toks


def test_split_query():
    assert split_query("country_of_origin the troll") == ["country", "of", "origin", "the", "troll"]
    assert split_query("instance_of qilakitsoq") == ["instance", "of", "qilakitsoq"]
    assert split_query("plain words") == ["plain", "words"]
    with pytest.raises(IngestionError):
        split_query("  ")


def test_load_minimal(tmp_path):
    exs = load_dataset(write(tmp_path, RECORDS))
    assert [e.id for e in exs] == ["r1", "r2"]
    assert exs[0].answer_index == 0 and exs[1].answer_index == 0
    assert exs[1].candidates[0] == ["archaeological", "site"]


def test_recount_oracle(tmp_path):
    """Record count and per-field lengths agree with reading the JSON directly."""
    path = write(tmp_path, RECORDS)
    raw = json.loads(path.read_text())
    exs = load_dataset(path)
    assert len(exs) == len(raw)
    for ex, rec in zip(exs, raw):
        assert ex.n_supports == len(rec["supports"]) and ex.n_candidates == len(rec["candidates"])
        assert ex.candidates[ex.answer_index] == tokenize(rec["answer"])


def test_rejects_are_reported_by_id(tmp_path):
    bad = RECORDS + [
        {"id": "x1", "query": "q_r s", "answer": "nope", "candidates": ["a", "b"], "supports": ["a"]},
        {"id": "x2", "query": "q_r s", "candidates": ["a", "b"], "supports": []},
        {"id": "x3", "candidates": ["a", "b"], "supports": ["a"]},
    ]
    path = write(tmp_path, bad)
    with pytest.raises(IngestionError) as err:
        load_dataset(path)
    assert set(err.value.problems) == {"x1", "x2", "x3"}
    exs, rejected = read_records(path)
    assert len(exs) == 2 and "answer not among candidates" in rejected["x1"]
    assert len(load_dataset(path, strict=False)) == 2


def test_unlabelled_records(tmp_path):
    rec = dict(RECORDS[0])
    del rec["answer"]
    assert load_dataset(write(tmp_path, [rec]))[0].answer_index is None


def test_save_load_round_trip(tmp_path):
    exs = toy_examples()
    save_dataset(exs, tmp_path / "t.json")
    assert load_dataset(tmp_path / "t.json") == exs
    assert "answer" not in example_to_record(Example("u", ["q"], [["a"]], [["a"], ["b"]]))


def test_vocabulary():
    v = Vocabulary.build([toy_examples()])
    assert v.itos[PAD_ID] == "<pad>" and v.itos[UNK_ID] == "<unk>"
    assert v.lookup("never-seen") == UNK_ID
    ids = v.encode(["the", "troll"])
    assert v.decode(ids) == ["the", "troll"] and min(ids) >= 2
    assert len(set(v.itos)) == len(v)
    assert Vocabulary.build([toy_examples()]).itos == v.itos   # deterministic order


def test_mask_candidates_postconditions():
    exs = toy_examples()
    masked = mask_candidates(exs, np.random.default_rng(0))
    for ex, m in zip(exs, masked):
        assert m.answer_index == ex.answer_index and m.n_candidates == ex.n_candidates
        assert len({tuple(c) for c in m.candidates}) == ex.n_candidates
        assert mention_counts(m) == mention_counts(ex)
        for cand in ex.candidates:
            assert not any(find_mentions(doc, cand) for doc in m.supports)
        for cand, before in zip(m.candidates, mention_counts(ex)):
            assert sum(len(find_mentions(d, cand)) for d in m.supports) == before


def test_mask_placeholders_are_single_tokens():
    m = mask_candidates(toy_examples(), np.random.default_rng(3))
    assert all(len(c) == 1 and tokenize(c[0]) == c for ex in m for c in ex.candidates)


def test_embeddings_empty_file_is_seeded_random(tmp_path):
    v = Vocabulary.build([toy_examples()])
    (tmp_path / "e.txt").write_text("")
    a, cov = load_embeddings(v, 5, tmp_path / "e.txt", rng=np.random.default_rng(1), word_dim=3)
    b, _ = load_embeddings(v, 5, None, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert np.all(a.matrix[PAD_ID] == 0) and np.all(np.abs(a.matrix) <= 0.1)
    assert cov.covered[str(tmp_path / "e.txt")] == 0


def test_embeddings_word_and_char_segments(tmp_path):
    v = Vocabulary.build([toy_examples()])
    (tmp_path / "w.txt").write_text("troll 1 2 3\nnot-in-vocab 9 9 9\n")
    (tmp_path / "c.txt").write_text("troll 7 8\nnorway 5 6\n")
    t, cov = load_embeddings(v, 6, tmp_path / "w.txt", tmp_path / "c.txt")
    row = t.matrix[v.lookup("troll")]
    np.testing.assert_array_equal(row[:5], [1, 2, 3, 7, 8])
    np.testing.assert_array_equal(t.matrix[v.lookup("norway")][3:5], [5, 6])
    # coverage agrees with an independent scan of the files
    for name in ("w.txt", "c.txt"):
        lines = (tmp_path / name).read_text().splitlines()
        assert cov.lines[str(tmp_path / name)] == len(lines)
        assert cov.covered[str(tmp_path / name)] == sum(l.split()[0] in v for l in lines)


def test_embeddings_parse_errors(tmp_path):
    v = Vocabulary.build([toy_examples()])
    (tmp_path / "bad.txt").write_text("a 1 2\nb 1\n")
    with pytest.raises(EmbeddingParseError, match=":2:"):
        load_embeddings(v, 4, tmp_path / "bad.txt")
    (tmp_path / "nan.txt").write_text("a 1 x\n")
    with pytest.raises(EmbeddingParseError, match=":1:"):
        load_embeddings(v, 4, tmp_path / "nan.txt")


def test_pad_unpad_round_trip():
    v = Vocabulary.build([toy_examples()])
    exs = toy_examples()
    back = unpad(pad_and_mask(exs, v), v)
    for ex, rec in zip(exs, back):
        assert rec["query"] == ex.query and rec["supports"] == ex.supports
        assert rec["candidates"] == ex.candidates


def test_batch_of_one_has_no_padding():
    v = Vocabulary.build([toy_examples()])
    b = pad_and_mask(toy_examples()[:1], v)
    assert b.query_mask.all() and b.cand_slot_mask.all() and b.doc_slot_mask.all()
    assert b.docs.shape[1] == max(len(d) for d in toy_examples()[0].supports)


def test_padded_softmax_matches_unpadded(rng):
    v = Vocabulary.build([toy_examples()])
    b = pad_and_mask(toy_examples(), v)
    scores = rng.normal(size=b.doc_mask.shape)
    y = softmax_masked(Tensor(scores), axis=1, mask=b.doc_mask).data
    for i, row in enumerate(b.doc_mask):
        n = row.sum()
        e = np.exp(scores[i, :n] - scores[i, :n].max())
        np.testing.assert_allclose(y[i, :n], e / e.sum(), atol=1e-12)


def test_truncate():
    ex = toy_examples()[0]
    (t,) = truncate([ex], max_query=2, max_doc=3)
    assert t.query == ex.query[:2] and all(len(d) == 3 for d in t.supports)
    assert truncate([ex]) == [ex]
    with pytest.raises(ValueError):
        truncate([ex], max_doc=0)
