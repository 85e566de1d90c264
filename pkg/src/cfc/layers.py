"""Trainable layers: affine projections, (Bi)GRU encoders, embeddings, dropout."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, VocabularyError
from .tensor import Tensor, add, concat, gather, make_op, matmul, scale, transpose

PAD_ID = 0
UNK_ID = 1


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int, name: str = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_out, fan_in)), requires_grad=True, name=name)


def zeros(n: int, name: str = None) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, name=name)


class ParamGroup:
    """Mixin: walk dataclass fields, yielding ``(dotted_name, Tensor)`` leaves."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            value = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, ParamGroup):
                yield from value.named_tensors(key + ".")


@dataclass
class LinearParams(ParamGroup):
    W: Tensor  # [d_out, d_in]
    b: Tensor  # [d_out]

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "LinearParams":
        return cls(glorot(rng, d_out, d_in), zeros(d_out))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x W^T + b`` applied to the last axis of ``x``."""
    if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
        raise DimensionError(f"linear: weight {W.shape} and bias {b.shape} disagree")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight input width {W.shape[1]}")
    return add(matmul(x, transpose(W)), b)


@dataclass
class GruParams(ParamGroup):
    """One GRU direction. Gate matrices act on ``[x_t ; h_{t-1}]`` and are [h, d_in + h]."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, rng, d_in: int, h: int) -> "GruParams":
        return cls(
            glorot(rng, h, d_in + h), glorot(rng, h, d_in + h), glorot(rng, h, d_in + h),
            zeros(h), zeros(h), zeros(h),
        )

    @property
    def hidden(self) -> int:
        return self.b_z.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_z.shape[1] - self.hidden


@dataclass
class BiGruParams(ParamGroup):
    fwd: GruParams
    bwd: Optional[GruParams] = None  # None => unidirectional (the no_bidir ablation)

    @classmethod
    def init(cls, rng, d_in: int, d_hid: int, bidirectional: bool = True) -> "BiGruParams":
        if not bidirectional:
            return cls(GruParams.init(rng, d_in, d_hid), None)
        if d_hid % 2:
            raise ConfigError(f"BiGRU output width must be even, got {d_hid}")
        return cls(GruParams.init(rng, d_in, d_hid // 2), GruParams.init(rng, d_in, d_hid // 2))

    @property
    def width(self) -> int:
        return self.fwd.hidden + (self.bwd.hidden if self.bwd is not None else 0)


def _sig(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def gru_sequence(x: Tensor, p: GruParams, mask=None, reverse: bool = False) -> Tensor:
    """Run one GRU direction over ``x`` [B, T, d_in] as a single fused tape op.

    Update rule (zero initial state)::

        z = sig(W_z [x; h] + b_z)      r = sig(W_r [x; h] + b_r)
        c = tanh(W_h [x; r*h] + b_h)   h' = z*h + (1 - z)*c

    Positions where ``mask`` is False leave the state untouched and emit zeros,
    so right-padded rows behave exactly like their unpadded versions in both
    directions.
    """
    X = x.data
    if X.ndim != 3:
        raise DimensionError(f"gru_sequence expects [B, T, d_in], got {X.shape}")
    B, T, d_in = X.shape
    h = p.hidden
    if T == 0:
        raise DegenerateInputError("GRU over an empty sequence")
    if d_in != p.d_in:
        raise DimensionError(f"GRU input width {d_in} != parameter width {p.d_in}")
    M = np.ones((B, T), dtype=X.dtype) if mask is None else np.asarray(mask, dtype=X.dtype)
    if M.shape != (B, T):
        raise DimensionError(f"GRU mask {M.shape} != {(B, T)}")

    Wz, Wr, Wh = p.W_z.data, p.W_r.data, p.W_h.data
    Wxz, Whz = Wz[:, :d_in], Wz[:, d_in:]
    Wxr, Whr = Wr[:, :d_in], Wr[:, d_in:]
    Wxh, Whh = Wh[:, :d_in], Wh[:, d_in:]
    pz = X @ Wxz.T + p.b_z.data
    pr = X @ Wxr.T + p.b_r.data
    ph = X @ Wxh.T + p.b_h.data

    order = range(T - 1, -1, -1) if reverse else range(T)
    out = np.zeros((B, T, h), dtype=X.dtype)
    Z = np.zeros_like(out)
    R = np.zeros_like(out)
    C = np.zeros_like(out)
    Hprev = np.zeros_like(out)
    state = np.zeros((B, h), dtype=X.dtype)
    for t in order:
        z = _sig(pz[:, t] + state @ Whz.T)
        r = _sig(pr[:, t] + state @ Whr.T)
        c = np.tanh(ph[:, t] + (r * state) @ Whh.T)
        m = M[:, t, None]
        new = m * (z * state + (1.0 - z) * c) + (1.0 - m) * state
        Z[:, t], R[:, t], C[:, t], Hprev[:, t] = z, r, c, state
        out[:, t] = m * new
        state = new

    def backward(g):
        dpz = np.zeros_like(out)
        dpr = np.zeros_like(out)
        dph = np.zeros_like(out)
        dWhz = np.zeros_like(Whz)
        dWhr = np.zeros_like(Whr)
        dWhh = np.zeros_like(Whh)
        carry = np.zeros((B, h), dtype=X.dtype)
        for t in reversed(order):
            m = M[:, t, None]
            z, r, c, hp = Z[:, t], R[:, t], C[:, t], Hprev[:, t]
            dnew = g[:, t] * m + carry
            dcell = m * dnew
            dprev = (1.0 - m) * dnew + dcell * z
            dz = dcell * (hp - c)
            dc = dcell * (1.0 - z)
            dac = dc * (1.0 - c * c)
            dph[:, t] = dac
            dWhh += dac.T @ (r * hp)
            drh = dac @ Whh
            dprev += drh * r
            dar = drh * hp * r * (1.0 - r)
            dpr[:, t] = dar
            dWhr += dar.T @ hp
            dprev += dar @ Whr
            daz = dz * z * (1.0 - z)
            dpz[:, t] = daz
            dWhz += daz.T @ hp
            dprev += daz @ Whz
            carry = dprev
        dX = dpz @ Wxz + dpr @ Wxr + dph @ Wxh
        flatX = X.reshape(-1, d_in)

        def wgrad(dpre, dWh):
            return np.concatenate([dpre.reshape(-1, h).T @ flatX, dWh], axis=1)

        return (
            dX,
            wgrad(dpz, dWhz), wgrad(dpr, dWhr), wgrad(dph, dWhh),
            dpz.sum(axis=(0, 1)), dpr.sum(axis=(0, 1)), dph.sum(axis=(0, 1)),
        )

    inputs = (x, p.W_z, p.W_r, p.W_h, p.b_z, p.b_r, p.b_h)
    return make_op(out, inputs, backward, "gru")


def _lift(seq: Tensor):
    """Accept [T, d] or [B, T, d]; return a rank-3 view plus an un-lift function."""
    from .tensor import reshape

    if seq.ndim == 2:
        return reshape(seq, (1,) + seq.shape), lambda y: reshape(y, y.shape[1:])
    if seq.ndim == 3:
        return seq, lambda y: y
    raise DimensionError(f"sequence must be [T, d] or [B, T, d], got {seq.shape}")


def gru_forward(seq: Tensor, params: GruParams, direction: str = "forward", mask=None) -> Tensor:
    """Single-direction GRU over ``seq`` ([T, d_in] or [B, T, d_in])."""
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if seq.shape[-2] == 0:
        raise DegenerateInputError("GRU over an empty sequence")
    x, unlift = _lift(seq)
    if mask is not None and seq.ndim == 2:
        mask = np.asarray(mask)[None]
    return unlift(gru_sequence(x, params, mask=mask, reverse=direction == "backward"))


def bigru(seq: Tensor, params: BiGruParams, mask=None) -> Tensor:
    """Per-position ``[forward_t ; backward_t]``; a unidirectional stack returns ``forward_t``."""
    fwd = gru_forward(seq, params.fwd, "forward", mask)
    if params.bwd is None:
        return fwd
    if params.fwd.hidden != params.bwd.hidden:
        raise ConfigError("BiGRU directions must share a hidden width")
    return concat(fwd, gru_forward(seq, params.bwd, "backward", mask), axis=-1)


@dataclass
class EmbeddingTable:
    """Vocabulary-size x d_emb matrix. Row 0 is padding (zeros), row 1 is UNK."""

    matrix: np.ndarray
    fixed: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise DimensionError(f"embedding matrix must be [V>=2, d], got {self.matrix.shape}")
        self.matrix[PAD_ID] = 0.0
        self._tensor = Tensor(self.matrix, requires_grad=not self.fixed)

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def tensor(self) -> Tensor:
        return self._tensor

    @classmethod
    def random(cls, vocab_size: int, dim: int, rng: np.random.Generator, scale: float = 0.1):
        return cls(rng.uniform(-scale, scale, size=(vocab_size, dim)))


def embed(tokens, table: EmbeddingTable) -> Tensor:
    """Row-gather token ids (any int array of rank <= 2) into embeddings."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise VocabularyError(f"token id outside vocabulary of size {table.vocab_size}")
    return gather(table.tensor, ids)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return scale(x, keep / (1.0 - rate))


def word_dropout(tokens, rate: float, training: bool, rng: Optional[np.random.Generator]):
    """Replace each non-padding id by UNK with probability ``rate`` (training only)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"word dropout rate must be in [0, 1), got {rate}")
    ids = np.array(tokens, dtype=np.int64)
    if not training or rate == 0.0:
        return ids if not isinstance(tokens, list) else list(tokens)
    hit = (rng.random(ids.shape) < rate) & (ids != PAD_ID)
    ids[hit] = UNK_ID
    return ids if not isinstance(tokens, list) else ids.tolist()
