"""Coattention and MLP self-attention, the two operators of the CFC hierarchy.

Both accept a single sequence ([T, d]) or a padded batch ([B, T, d] with a
[B, T] boolean mask) and hand back the attention weights alongside the result
so callers can build attention traces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .layers import BiGruParams, ParamGroup, bigru, dropout, glorot, zeros
from .tensor import (
    Tensor,
    add,
    concat,
    matmul,
    reshape,
    scale,
    softmax_masked,
    tanh,
    transpose,
)


@dataclass
class CoattnOutput:
    context: Tensor          # U = [C ; S_a], [.., T_a, d_hid + d]
    affinity: Tensor         # A, [.., T_a, T_b]
    weights_over_b: Tensor   # softmax(A) along T_b, [.., T_a, T_b]
    weights_over_a: Tensor   # softmax(A^T) along T_a, [.., T_b, T_a]


@dataclass
class SelfattnOutput:
    summary: Tensor   # [.., d_in]
    weights: Tensor   # normalised scores, [.., T]
    scores: Tensor    # raw scorer outputs, [.., T]


@dataclass
class ScorerParams(ParamGroup):
    """Two-layer tanh MLP mapping a d_in vector to one scalar score."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d_in: int, hidden: int) -> "ScorerParams":
        return cls(glorot(rng, hidden, d_in), zeros(hidden), glorot(rng, 1, hidden), zeros(1))


def _batched(x: Tensor, mask):
    if x.ndim == 2:
        m = np.ones((1, x.shape[0]), dtype=bool) if mask is None else np.asarray(mask, bool)[None]
        return reshape(x, (1,) + x.shape), m, True
    if x.ndim != 3:
        raise DimensionError(f"expected [T, d] or [B, T, d], got {x.shape}")
    m = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, bool)
    if m.shape != x.shape[:2]:
        raise DimensionError(f"mask {m.shape} does not match sequence {x.shape[:2]}")
    return x, m, False


def _unbatch(t: Tensor, squeeze: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if squeeze else t


def affinity(Ea: Tensor, Eb: Tensor) -> Tensor:
    """``A = Ea Eb^T``: dot products between every position pair."""
    if Ea.shape[-1] != Eb.shape[-1]:
        raise DimensionError(f"affinity: feature widths differ, {Ea.shape} vs {Eb.shape}")
    return matmul(Ea, transpose(Eb))


def coattend(Ea: Tensor, Eb: Tensor, gru: BiGruParams, mask_a=None, mask_b=None, *,
             literal_columnwise: bool = False, dropout_rate: float = 0.0,
             training: bool = False, rng=None) -> CoattnOutput:
    """Codependent encoding of sequence ``a`` (e.g. a document) against ``b`` (the query).

    ``S_a = softmax(A) Eb``, ``S_b = softmax(A^T) Ea``,
    ``C_a = BiGRU(softmax(A) S_b)`` and ``U = [C_a ; S_a]``, zero on padded rows.

    Softmax runs along the contracted axis so every row of ``S_a``/``S_b`` is a
    convex combination. ``literal_columnwise=True`` normalises over the other
    axis instead.
    """
    a, ma, squeeze = _batched(Ea, mask_a)
    b, mb, _ = _batched(Eb, mask_b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"coattend batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if not ma.any(axis=1).all() or not mb.any(axis=1).all():
        raise DegenerateInputError("coattention over a fully masked sequence")

    A = affinity(a, b)                                   # [B, Ta, Tb]
    At = transpose(A)                                    # [B, Tb, Ta]
    if literal_columnwise:
        P = softmax_masked(A, axis=1, mask=ma[:, :, None])
        Pt = softmax_masked(At, axis=1, mask=mb[:, :, None])
    else:
        P = softmax_masked(A, axis=2, mask=mb[:, None, :])
        Pt = softmax_masked(At, axis=2, mask=ma[:, None, :])
    S_a = matmul(P, b)                                   # [B, Ta, d]
    S_b = matmul(Pt, a)                                  # [B, Tb, d]
    C_a = bigru(matmul(P, S_b), gru, mask=ma)            # [B, Ta, d_hid]
    U = scale(concat(C_a, S_a, axis=-1), ma[:, :, None])
    U = dropout(U, dropout_rate, training, rng)
    return CoattnOutput(
        context=_unbatch(U, squeeze),
        affinity=_unbatch(A, squeeze),
        weights_over_b=_unbatch(P, squeeze),
        weights_over_a=_unbatch(Pt, squeeze),
    )


def selfattend(X: Tensor, scorer: ScorerParams | None, mask=None) -> SelfattnOutput:
    """Score each position with ``tanh(W2 tanh(W1 x + b1) + b2)``, softmax, weighted sum.

    With ``scorer=None`` the weights are uniform over unmasked positions
    (mean pooling).
    """
    x, m, squeeze = _batched(X, mask)
    B, T, d = x.shape
    if not m.any(axis=1).all():
        raise DegenerateInputError("self-attention over a fully masked sequence")
    if scorer is None:
        raw = Tensor(np.zeros((B, T)))
    else:
        if scorer.W1.shape[1] != d:
            raise DimensionError(f"scorer expects width {scorer.W1.shape[1]}, input has {d}")
        hid = tanh(add(matmul(x, transpose(scorer.W1)), scorer.b1))
        raw = reshape(tanh(add(matmul(hid, transpose(scorer.W2)), scorer.b2)), (B, T))
    w = softmax_masked(raw, axis=1, mask=m)
    summary = reshape(matmul(reshape(w, (B, 1, T)), x), (B, d))
    return SelfattnOutput(
        summary=_unbatch(summary, squeeze),
        weights=_unbatch(w, squeeze),
        scores=_unbatch(raw, squeeze),
    )
