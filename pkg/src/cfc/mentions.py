"""Lexical-match coreference: candidate occurrences as token spans."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True, order=True)
class MentionSpan:
    doc_index: int
    start: int  # inclusive
    end: int    # exclusive
    candidate_index: int = 0

    def __len__(self) -> int:
        return self.end - self.start


def _fold(tokens: Sequence[str]) -> list[str]:
    return [t.casefold() for t in tokens]


def find_mentions(doc_tokens: Sequence[str], cand_tokens: Sequence[str],
                  doc_index: int = 0, candidate_index: int = 0) -> list[MentionSpan]:
    """Left-to-right, non-overlapping, case-folded exact matches of ``cand_tokens``."""
    if not cand_tokens:
        raise ValueError("candidate must have at least one token")
    doc = _fold(doc_tokens)
    cand = _fold(cand_tokens)
    n, k = len(doc), len(cand)
    spans = []
    i = 0
    while i + k <= n:
        if doc[i:i + k] == cand:
            spans.append(MentionSpan(doc_index, i, i + k, candidate_index))
            i += k
        else:
            i += 1
    return spans


def find_all_mentions(example) -> list[list[MentionSpan]]:
    """Per candidate: mentions over all support documents, ordered by (document, start)."""
    out = []
    for j, cand in enumerate(example.candidates):
        spans = []
        for d, doc in enumerate(example.supports):
            spans.extend(find_mentions(doc, cand, d, j))
        out.append(spans)
    return out
