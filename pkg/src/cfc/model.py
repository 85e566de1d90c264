"""The coarse-grain / fine-grain coattention network.

The batched path (:meth:`CFC.forward`) is what training and evaluation use.
The per-example methods (:meth:`CFC.encode`, :meth:`CFC.coarse_score`,
:meth:`CFC.fine_score`, :meth:`CFC.score_candidates`) run the same internal
functions on a single example.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import ScorerParams, coattend, selfattend
from .data import Batch, Example, Vocabulary, pad_and_mask
from .errors import ConfigError, DegenerateInputError, LabelError, SpanError
from .layers import (
    BiGruParams,
    EmbeddingTable,
    LinearParams,
    ParamGroup,
    bigru,
    dropout,
    embed,
    linear,
    word_dropout,
)
from .mentions import MentionSpan, find_all_mentions
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    gather,
    mul,
    reshape,
    scale,
    slice_rows,
    stack_padded,
    sum_axis,
    tanh,
)

ABLATIONS = ("no_coarse", "no_fine", "no_selfattn", "no_bidir", "no_encoder")


@dataclass(frozen=True)
class AblationConfig:
    no_coarse: bool = False
    no_fine: bool = False
    no_selfattn: bool = False
    no_bidir: bool = False
    no_encoder: bool = False

    def __post_init__(self):
        if self.no_coarse and self.no_fine:
            raise ConfigError("no_coarse and no_fine cannot both be set")

    @classmethod
    def from_flags(cls, flags: Sequence[str]) -> "AblationConfig":
        """Build from CLI spellings such as ``["no-fine", "no-bidir"]``."""
        kw = {}
        for flag in flags:
            key = flag.replace("-", "_")
            if key not in ABLATIONS:
                raise ConfigError(f"unknown ablation {flag!r}; choose from {', '.join(ABLATIONS)}")
            kw[key] = True
        return cls(**kw)

    def flags(self) -> list[str]:
        return [name.replace("_", "-") for name in ABLATIONS if getattr(self, name)]


@dataclass
class DropoutRates:
    emb: float = 0.3
    enc: float = 0.3
    coattn: float = 0.2
    selfattn: float = 0.2
    word: float = 0.25

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"dropout rate {k}={v} outside [0, 1)")


@dataclass
class ModelConfig:
    d_emb: int = 400
    d_hid: int = 100
    scorer_hidden: Optional[int] = None  # None -> d_hid
    dropout: DropoutRates = field(default_factory=DropoutRates)
    candidate_encoding_dropout: bool = True
    literal_columnwise_softmax: bool = False
    no_mention_bias: bool = False
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if isinstance(self.dropout, dict):
            self.dropout = DropoutRates(**self.dropout)
        if isinstance(self.ablation, dict):
            self.ablation = AblationConfig(**self.ablation)
        if self.d_emb <= 0 or self.d_hid <= 0:
            raise ConfigError("dimensions must be positive")
        if self.d_hid % 2:
            raise ConfigError(f"d_hid must be even, got {self.d_hid}")

    @property
    def hidden(self) -> int:
        return self.scorer_hidden or self.d_hid


@dataclass
class CfcParams(ParamGroup):
    query_proj: LinearParams
    enc_query: Optional[BiGruParams]
    enc_support: ParamGroup          # BiGruParams, or LinearParams under no_encoder
    enc_candidate: ParamGroup
    coattn_coarse: Optional[BiGruParams]
    coattn_fine: Optional[BiGruParams]
    attn_doc: Optional[ScorerParams]
    attn_cand: Optional[ScorerParams]
    attn_summary: Optional[ScorerParams]
    attn_mention: Optional[ScorerParams]
    attn_fine: Optional[ScorerParams]
    coarse_proj: Optional[LinearParams]
    fine_proj: Optional[LinearParams]
    no_mention_bias: Optional[Tensor] = None

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "CfcParams":
        """Glorot-uniform weights, zero biases.

        Every tensor is drawn in a fixed order whatever the ablation, so
        shared parameters start identical across ablated variants; parts an
        ablation removes are dropped afterwards.
        """
        de, dh, hid = config.d_emb, config.d_hid, config.hidden
        ab = config.ablation
        bi = not ab.no_bidir
        p = cls(
            query_proj=LinearParams.init(rng, de, dh),
            enc_query=BiGruParams.init(rng, dh, dh, bi),
            enc_support=BiGruParams.init(rng, de, dh, bi),
            enc_candidate=BiGruParams.init(rng, de, dh, bi),
            coattn_coarse=BiGruParams.init(rng, dh, dh, bi),
            coattn_fine=BiGruParams.init(rng, dh, dh, bi),
            attn_doc=ScorerParams.init(rng, 2 * dh, hid),
            attn_cand=ScorerParams.init(rng, dh, hid),
            attn_summary=ScorerParams.init(rng, 2 * dh, hid),
            attn_mention=ScorerParams.init(rng, dh, hid),
            attn_fine=ScorerParams.init(rng, 2 * dh, hid),
            coarse_proj=LinearParams.init(rng, 2 * dh, dh),
            fine_proj=LinearParams.init(rng, 2 * dh, 1),
        )
        if config.no_mention_bias:
            p.no_mention_bias = Tensor(np.zeros(1), requires_grad=True)
        if ab.no_encoder:
            p.enc_query = None
            p.enc_support = LinearParams.init(rng, de, dh)
            p.enc_candidate = LinearParams.init(rng, de, dh)
        if ab.no_selfattn:
            p.attn_doc = p.attn_cand = p.attn_summary = p.attn_mention = p.attn_fine = None
        if ab.no_coarse:
            p.coattn_coarse = p.attn_doc = p.attn_cand = p.attn_summary = p.coarse_proj = None
        if ab.no_fine:
            p.coattn_fine = p.attn_mention = p.attn_fine = p.fine_proj = None
            p.no_mention_bias = None
        return p

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def count(self) -> int:
        return sum(t.size for t in self.tensors().values())


@dataclass
class Encodings:
    """Per-example encodings (eval or train mode)."""

    query: Tensor                  # [T_q, d_hid]
    supports: list[Tensor]         # each [T_s, d_hid]
    candidates: list[Tensor]       # each [T_c, d_hid]
    query_mask: np.ndarray = None


@dataclass
class AttentionTrace:
    """Attention weights of one example, unpadded.

    ``documents[i]``: ``affinity`` [T_s, T_q], ``over_query`` [T_s, T_q],
    ``over_document`` [T_q, T_s], ``self`` [T_s].
    ``candidates[j]``: ``self`` [T_c], ``mentions`` spans, ``span`` (one weight
    vector per mention), ``over_query`` [N_m, T_q], ``over_mentions`` [N_m
    along T_q rows], ``summary`` [N_m].
    """

    example_id: str
    documents: list[dict]
    summary: Optional[np.ndarray]
    candidates: list[dict]


@dataclass
class ForwardResult:
    scores: Tensor            # [B, N_c max]; padded slots are meaningless
    mask: np.ndarray          # [B, N_c max]
    y_coarse: Optional[Tensor]  # [C] flat over candidates
    y_fine: Optional[Tensor]    # [C]
    aux: dict


def _pick(rows: np.ndarray, idx) -> np.ndarray:
    return rows[np.asarray(idx, dtype=np.int64)]


class CFC:
    def __init__(self, params: CfcParams, embeddings: EmbeddingTable, vocab: Vocabulary,
                 config: ModelConfig):
        if embeddings.dim != config.d_emb:
            raise ConfigError(f"embedding width {embeddings.dim} != d_emb {config.d_emb}")
        if embeddings.vocab_size != len(vocab):
            raise ConfigError(f"embedding rows {embeddings.vocab_size} != vocabulary size {len(vocab)}")
        self.params = params
        self.embeddings = embeddings
        self.vocab = vocab
        self.config = config

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocabulary, embeddings: EmbeddingTable,
                   seed: int = 0) -> "CFC":
        return cls(CfcParams.init(config, np.random.default_rng(seed)), embeddings, vocab, config)

    @property
    def ablation(self) -> AblationConfig:
        return self.config.ablation

    def parameters(self) -> dict[str, Tensor]:
        return self.params.tensors()

    # -- building blocks ------------------------------------------------------

    def _drop(self, x: Tensor, rate: float, training: bool, rng) -> Tensor:
        return dropout(x, rate, training, rng)

    def _embed(self, ids: np.ndarray, training: bool, rng) -> Tensor:
        ids = word_dropout(ids, self.config.dropout.word, training, rng)
        return self._drop(embed(ids, self.embeddings), self.config.dropout.emb, training, rng)

    def _encode_seq(self, L: Tensor, mask: np.ndarray, enc) -> Tensor:
        if isinstance(enc, LinearParams):
            return scale(tanh(linear(L, enc.W, enc.b)), mask[..., None])
        return bigru(L, enc, mask=mask)

    def _encode_ids(self, batch: Batch, training: bool, rng):
        p, rates = self.params, self.config.dropout
        L_q = self._embed(batch.query, training, rng)
        E_q = scale(tanh(linear(L_q, p.query_proj.W, p.query_proj.b)), batch.query_mask[..., None])
        if p.enc_query is not None:
            E_q = bigru(E_q, p.enc_query, mask=batch.query_mask)
        E_q = self._drop(E_q, rates.enc, training, rng)
        E_s = self._encode_seq(self._embed(batch.docs, training, rng), batch.doc_mask, p.enc_support)
        E_s = self._drop(E_s, rates.enc, training, rng)
        E_c = self._encode_seq(self._embed(batch.cands, training, rng), batch.cand_mask, p.enc_candidate)
        if self.config.candidate_encoding_dropout:
            E_c = self._drop(E_c, rates.enc, training, rng)
        return E_q, E_s, E_c

    def _selfattn(self, X: Tensor, scorer, mask, training: bool, rng):
        out = selfattend(X, None if self.ablation.no_selfattn else scorer, mask)
        return self._drop(out.summary, self.config.dropout.selfattn, training, rng), out

    def _coattn(self, Ea, Eb, gru, mask_a, mask_b, training, rng):
        return coattend(Ea, Eb, gru, mask_a, mask_b,
                        literal_columnwise=self.config.literal_columnwise_softmax,
                        dropout_rate=self.config.dropout.coattn, training=training, rng=rng)

    def _coarse(self, E_q, q_mask, E_s, s_mask, doc_owner, doc_slots, doc_slot_mask,
                E_c, c_mask, cand_owner, training, rng, aux):
        """Flat per-candidate coarse scores [C]."""
        p = self.params
        co = self._coattn(E_s, gather(E_q, doc_owner), p.coattn_coarse,
                          s_mask, _pick(q_mask, doc_owner), training, rng)
        G_s, doc_att = self._selfattn(co.context, p.attn_doc, s_mask, training, rng)
        G = gather(G_s, doc_slots)                                    # [B, N_s, 2d]
        G_sum, sum_att = self._selfattn(G, p.attn_summary, doc_slot_mask, training, rng)
        G_c, cand_att = self._selfattn(E_c, p.attn_cand, c_mask, training, rng)
        proj = tanh(linear(G_sum, p.coarse_proj.W, p.coarse_proj.b))  # [B, d]
        y = sum_axis(mul(gather(proj, cand_owner), G_c), -1)
        if aux is not None:
            aux.update(doc_coattn=co, doc_self=doc_att, summary_self=sum_att, cand_self=cand_att)
        return y

    def _fine_core(self, spans, span_mask, slots, slot_mask, E_q_c, q_mask_c, training, rng, aux):
        """Fine scores for candidates that have mentions: [C']."""
        p = self.params
        M, span_att = self._selfattn(spans, p.attn_mention, span_mask, training, rng)  # [K, d]
        Mseq = gather(M, slots)                                                       # [C', N_m, d]
        co = self._coattn(Mseq, E_q_c, p.coattn_fine, slot_mask, q_mask_c, training, rng)
        G_m, fine_att = self._selfattn(co.context, p.attn_fine, slot_mask, training, rng)
        y = reshape(linear(G_m, p.fine_proj.W, p.fine_proj.b), (G_m.shape[0],))
        if aux is not None:
            aux.update(span_self=span_att, mention_coattn=co, mention_self=fine_att)
        return y

    def _no_mention_value(self) -> Tensor:
        if self.params.no_mention_bias is not None:
            return self.params.no_mention_bias
        return Tensor(np.zeros(1))

    def _fine(self, batch: Batch, E_q, E_s, training, rng, aux):
        n_c = len(batch.cand_owner)
        if batch.fine_cands.size == 0:
            return gather(self._no_mention_value(), np.zeros(n_c, dtype=np.int64))
        D, T_s, d = E_s.shape
        spans = gather(reshape(E_s, (D * T_s, d)), batch.mention_rows)
        owners = batch.cand_owner[batch.fine_cands]
        y_sub = self._fine_core(spans, batch.mention_mask, batch.fine_slots, batch.fine_slot_mask,
                                gather(E_q, owners), batch.query_mask[owners], training, rng, aux)
        return gather(concat(y_sub, self._no_mention_value(), axis=0), batch.fine_lookup)

    # -- batched forward --------------------------------------------------------

    def forward(self, batch: Batch, training: bool = False, rng: Optional[np.random.Generator] = None,
                trace: bool = False) -> ForwardResult:
        if training and rng is None:
            raise ConfigError("training mode needs a random generator for dropout")
        aux = {} if trace else None
        E_q, E_s, E_c = self._encode_ids(batch, training, rng)
        y_coarse = y_fine = None
        if not self.ablation.no_coarse:
            y_coarse = self._coarse(E_q, batch.query_mask, E_s, batch.doc_mask, batch.doc_owner,
                                    batch.doc_slots, batch.doc_slot_mask, E_c, batch.cand_mask,
                                    batch.cand_owner, training, rng, aux)
        if not self.ablation.no_fine:
            y_fine = self._fine(batch, E_q, E_s, training, rng, aux)
        if y_coarse is None:
            flat = y_fine
        elif y_fine is None:
            flat = y_coarse
        else:
            flat = y_coarse + y_fine
        scores = gather(flat, batch.cand_slots)
        if aux is not None:
            aux.update(E_q=E_q, E_s=E_s, E_c=E_c)
        return ForwardResult(scores, batch.cand_slot_mask, y_coarse, y_fine, aux or {})

    def batch(self, examples: Sequence[Example]) -> Batch:
        return pad_and_mask(examples, self.vocab)

    def batch_loss(self, result: ForwardResult, answers) -> Tensor:
        """Mean cross-entropy over the batch."""
        answers = np.asarray(answers)
        if np.any(answers < 0) or np.any(~result.mask[np.arange(len(answers)), answers]):
            raise LabelError("every example in a training batch needs a valid answer index")
        per = cross_entropy(result.scores, answers, result.mask)
        return scale(sum_axis(per, 0), 1.0 / len(answers))

    # -- per-example API -------------------------------------------------------

    def encode(self, example: Example, training: bool = False, rng=None) -> Encodings:
        _check_example(example)
        b = self.batch([example])
        E_q, E_s, E_c = self._encode_ids(b, training, rng)
        tq = len(example.query)
        q = slice_rows(gather(E_q, 0), 0, tq)
        sup = [slice_rows(gather(E_s, i), 0, len(s)) for i, s in enumerate(example.supports)]
        cand = [slice_rows(gather(E_c, j), 0, len(c)) for j, c in enumerate(example.candidates)]
        return Encodings(q, sup, cand)

    def _lift_query(self, enc: Encodings):
        q = reshape(enc.query, (1,) + enc.query.shape)
        return q, np.ones((1, enc.query.shape[0]), dtype=bool)

    def coarse_score(self, enc: Encodings, j: int, training: bool = False, rng=None) -> Tensor:
        """Scalar coarse score of candidate ``j`` from precomputed encodings."""
        if self.ablation.no_coarse:
            raise ConfigError("coarse module is ablated")
        q, qm = self._lift_query(enc)
        E_s, s_mask = stack_padded(enc.supports)
        n_s = len(enc.supports)
        E_c, c_mask = stack_padded([enc.candidates[j]])
        y = self._coarse(q, qm, E_s, s_mask, np.zeros(n_s, dtype=np.int64),
                         np.arange(n_s)[None], np.ones((1, n_s), dtype=bool),
                         E_c, c_mask, np.zeros(1, dtype=np.int64), training, rng, None)
        return reshape(y, ())

    def fine_score(self, enc: Encodings, mentions: Sequence[MentionSpan],
                   training: bool = False, rng=None) -> Tensor:
        """Scalar fine score from one candidate's mentions (``0`` when there are none)."""
        if self.ablation.no_fine:
            raise ConfigError("fine module is ablated")
        if not mentions:
            return reshape(self._no_mention_value(), ())
        rows = []
        for m in mentions:
            if not 0 <= m.doc_index < len(enc.supports):
                raise SpanError(f"mention refers to missing document {m.doc_index}")
            rows.append(slice_rows(enc.supports[m.doc_index], m.start, m.end))
        spans, span_mask = stack_padded(rows)
        q, qm = self._lift_query(enc)
        slots = np.arange(len(mentions))[None]
        y = self._fine_core(spans, span_mask, slots, np.ones_like(slots, dtype=bool),
                            q, qm, training, rng, None)
        return reshape(y, ())

    def score_candidates(self, example: Example, training: bool = False, rng=None,
                         trace: bool = False):
        """Score vector ``Y`` [N_c]; with ``trace=True`` also returns an :class:`AttentionTrace`."""
        _check_example(example)
        b = self.batch([example])
        res = self.forward(b, training=training, rng=rng, trace=trace)
        Y = reshape(res.scores, (example.n_candidates,))
        if not trace:
            return Y
        return Y, _build_trace(example, b, res.aux, self.ablation)

    def fine_scores(self, example: Example) -> Tensor:
        """The fine module alone over every candidate (eval mode), [N_c]."""
        b = self.batch([example])
        E_q, E_s, _ = self._encode_ids(b, False, None)
        return self._fine(b, E_q, E_s, False, None, None)

    def coarse_scores(self, example: Example) -> Tensor:
        """The coarse module alone over every candidate (eval mode), [N_c]."""
        b = self.batch([example])
        E_q, E_s, E_c = self._encode_ids(b, False, None)
        return self._coarse(E_q, b.query_mask, E_s, b.doc_mask, b.doc_owner, b.doc_slots,
                            b.doc_slot_mask, E_c, b.cand_mask, b.cand_owner, False, None, None)


def _check_example(ex: Example) -> None:
    if not ex.query:
        raise DegenerateInputError(f"{ex.id}: empty query")
    if not ex.supports or any(not s for s in ex.supports):
        raise DegenerateInputError(f"{ex.id}: empty support document")
    if len(ex.candidates) < 2 or any(not c for c in ex.candidates):
        raise DegenerateInputError(f"{ex.id}: needs >= 2 nonempty candidates")


def loss(Y: Tensor, answer_index: int) -> Tensor:
    """``-log softmax(Y)[answer_index]`` for one score vector."""
    n = Y.shape[0]
    if not 0 <= answer_index < n:
        raise LabelError(f"answer index {answer_index} outside 0..{n - 1}")
    return reshape(cross_entropy(reshape(Y, (1, n)), [answer_index]), ())


def predict(Y) -> int:
    """Index of the maximal score; ties go to the lowest index."""
    y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    if y.size == 0:
        raise ValueError("cannot predict from an empty score vector")
    return int(np.argmax(y))


def predict_batch(result: ForwardResult) -> np.ndarray:
    s = np.where(result.mask, result.scores.data, -np.inf)
    return np.argmax(s, axis=1)


def _arr(t) -> np.ndarray:
    return np.array(t.data if isinstance(t, Tensor) else t)


def _build_trace(ex: Example, b: Batch, aux: dict, ablation: AblationConfig) -> AttentionTrace:
    docs = []
    tq = len(ex.query)
    if "doc_coattn" in aux:
        co = aux["doc_coattn"]
        for i, doc in enumerate(ex.supports):
            ts = len(doc)
            docs.append({
                "tokens": list(doc),
                "affinity": _arr(co.affinity)[i, :ts, :tq],
                "over_query": _arr(co.weights_over_b)[i, :ts, :tq],
                "over_document": _arr(co.weights_over_a)[i, :tq, :ts],
                "self": _arr(aux["doc_self"].weights)[i, :ts],
            })
    summary = _arr(aux["summary_self"].weights)[0, : ex.n_supports] if "summary_self" in aux else None
    cands = []
    for j, cand in enumerate(ex.candidates):
        entry = {"tokens": list(cand), "mentions": [list(m) for m in b.mentions[j]]}
        if "cand_self" in aux:
            entry["self"] = _arr(aux["cand_self"].weights)[j, : len(cand)]
        k = b.fine_lookup[j]
        if "span_self" in aux and k < len(b.fine_cands):
            slots = b.fine_slots[k][b.fine_slot_mask[k]]
            n_m = len(slots)
            span_w = _arr(aux["span_self"].weights)
            entry["span"] = [span_w[s][b.mention_mask[s]] for s in slots]
            co = aux["mention_coattn"]
            entry["over_query"] = _arr(co.weights_over_b)[k, :n_m, :tq]
            entry["over_mentions"] = _arr(co.weights_over_a)[k, :tq, :n_m]
            entry["summary"] = _arr(aux["mention_self"].weights)[k, :n_m]
        cands.append(entry)
    return AttentionTrace(ex.id, docs, summary, cands)
