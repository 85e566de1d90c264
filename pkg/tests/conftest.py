"""Shared fixtures: tiny hand-made examples and small deterministic models."""
import numpy as np
import pytest

from cfc.data import Example, Vocabulary
from cfc.layers import EmbeddingTable
from cfc.model import CFC, AblationConfig, DropoutRates, ModelConfig

NO_DROPOUT = dict(emb=0.0, enc=0.0, coattn=0.0, selfattn=0.0, word=0.0)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def tiny_example(ex_id="ex0", answer=0):
    return Example(
        ex_id,
        ["country", "of", "origin", "the", "troll"],
        [["the", "troll", "is", "a", "film", "from", "norway", "."],
         ["norway", "borders", "sweden", "and", "the", "troll", "lives", "."]],
        [["norway"], ["sweden"]],
        answer,
    )


def toy_examples():
    """A few shapes: multi-token candidates, a candidate without mentions, 3 documents."""
    return [
        tiny_example("a", 0),
        Example("b", ["located", "in", "x"],
                [["x", "is", "in", "new", "york", "city"], ["new", "york", "is", "big"],
                 ["paris", "is", "far"]],
                [["new", "york"], ["paris"], ["tokyo"]], 1),
        Example("c", ["sister", "of", "ann"],
                [["ann", "and", "bea", "are", "sisters", "bea", "."]],
                [["bea"], ["cid"]], 0),
    ]


def make_model(examples, d_hid=8, d_emb=6, seed=0, flags=(), dropout=None, **kw):
    vocab = Vocabulary.build([examples])
    table = EmbeddingTable.random(len(vocab), d_emb, np.random.default_rng(seed + 100), scale=0.5)
    cfg = ModelConfig(d_emb=d_emb, d_hid=d_hid, dropout=DropoutRates(**(dropout or NO_DROPOUT)),
                      ablation=AblationConfig.from_flags(list(flags)), **kw)
    return CFC.initialize(cfg, vocab, table, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
