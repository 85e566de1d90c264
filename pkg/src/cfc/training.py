"""Adam + cosine decay training loop, evaluation, and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Example, Vocabulary
from .errors import CheckpointError, ConfigError, DivergenceError, NonFiniteError
from .layers import EmbeddingTable
from .model import CFC, ModelConfig, predict_batch
from .tensor import Tape, Tensor, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cfc-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 80
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "cosine"        # cosine | constant
    schedule_unit: str = "step"     # step | epoch
    clip_norm: Optional[float] = None
    seed: int = 0
    eval_train: bool = True
    eval_batch_size: int = 100
    masked: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.schedule_unit not in ("step", "epoch"):
            raise ConfigError(f"unknown schedule unit {self.schedule_unit!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: dict[str, Tensor], state: OptimState, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    lr = state.lr if lr is None else lr
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)
    return total


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: Optional[float]
    predictions: list[int]


def evaluate(model: CFC, dataset: Sequence[Example], batch_size: int = 100) -> EvalResult:
    """Accuracy (``None`` if any example is unlabelled) and argmax predictions, eval mode."""
    preds = []
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            chunk = dataset[i:i + batch_size]
            res = model.forward(model.batch(chunk), training=False)
            preds.extend(int(k) for k in predict_batch(res))
    labels = [ex.answer_index for ex in dataset]
    if not dataset or any(a is None for a in labels):
        return EvalResult(None, preds)
    acc = sum(int(p == a) for p, a in zip(preds, labels)) / len(dataset)
    return EvalResult(acc, preds)


# -- training ----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    train_loss: float
    train_acc: Optional[float]
    dev_acc: Optional[float]


HISTORY_COLUMNS = ("epoch", "step", "lr", "train_loss", "train_acc", "dev_acc")


def format_history(history: Sequence[EpochRecord]) -> str:
    """Tab-separated history table with a header row."""
    lines = ["\t".join(HISTORY_COLUMNS)]
    for r in history:
        cells = [str(r.epoch), str(r.step), repr(r.lr), repr(r.train_loss),
                 "" if r.train_acc is None else repr(r.train_acc),
                 "" if r.dev_acc is None else repr(r.dev_acc)]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


class Trainer:
    """Owns the optimizer state and bookkeeping for one training run.

    Randomness is derived from ``config.seed`` and the epoch/step counters,
    so a run resumed from a checkpoint follows the same trajectory as an
    uninterrupted one.
    """

    def __init__(self, model: CFC, config: TrainConfig):
        self.model = model
        self.config = config
        self.params = model.parameters()
        self.optim = OptimState.for_params(self.params, config.lr, config.beta1,
                                           config.beta2, config.adam_eps)
        self.epoch = 0
        self.global_step = 0
        self.history: list[EpochRecord] = []
        self.losses: list[float] = []
        self.best_epoch: Optional[int] = None
        self.best_dev: Optional[float] = None
        self.best_params = {k: p.data.copy() for k, p in self.params.items()}

    def steps_per_epoch(self, n: int) -> int:
        return max(1, math.ceil(n / self.config.batch_size))

    def lr_at(self, step: int, epoch: int, n_train: int) -> float:
        c = self.config
        if c.schedule == "constant":
            return c.lr
        if c.schedule_unit == "epoch":
            return cosine_lr(epoch, c.epochs, c.lr)
        return cosine_lr(step, c.epochs * self.steps_per_epoch(n_train), c.lr)

    def train_step(self, examples: Sequence[Example], lr: float, rng) -> float:
        for p in self.params.values():
            p.grad = None
        answers = [ex.answer_index for ex in examples]
        try:
            with Tape():
                res = self.model.forward(self.model.batch(examples), training=True, rng=rng)
                loss = self.model.batch_loss(res, answers)
                loss.backward()
        except NonFiniteError as e:
            raise DivergenceError(f"epoch {self.epoch} step {self.global_step}: {e}") from e
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"epoch {self.epoch} step {self.global_step}: loss is {value}")
        if self.config.clip_norm:
            clip_grad_norm(self.params, self.config.clip_norm)
        try:
            adam_step(self.params, self.optim, lr)
        except DivergenceError as e:
            raise DivergenceError(f"epoch {self.epoch} step {self.global_step}: {e}") from e
        return value

    def run_epoch(self, train_set: Sequence[Example], dev_set: Optional[Sequence[Example]]) -> EpochRecord:
        c = self.config
        order = np.random.default_rng((c.seed, 2, self.epoch)).permutation(len(train_set))
        losses = []
        lr = c.lr
        for start in range(0, len(order), c.batch_size):
            chunk = [train_set[i] for i in order[start:start + c.batch_size]]
            lr = self.lr_at(self.global_step, self.epoch, len(train_set))
            rng = np.random.default_rng((c.seed, 1, self.global_step))
            value = self.train_step(chunk, lr, rng)
            losses.append(value)
            self.losses.append(value)
            self.global_step += 1
        train_acc = evaluate(self.model, train_set, c.eval_batch_size).accuracy if c.eval_train else None
        dev_acc = evaluate(self.model, dev_set, c.eval_batch_size).accuracy if dev_set else None
        self.epoch += 1
        rec = EpochRecord(self.epoch, self.global_step, lr, float(np.mean(losses)), train_acc, dev_acc)
        self.history.append(rec)
        score = dev_acc if dev_acc is not None else train_acc
        if score is not None and (self.best_dev is None or score > self.best_dev):
            self.best_dev = score
            self.best_epoch = self.epoch
            self.best_params = {k: p.data.copy() for k, p in self.params.items()}
        log.info("epoch %d step %d lr %.3g loss %.4f train_acc %s dev_acc %s", rec.epoch, rec.step,
                 rec.lr, rec.train_loss, rec.train_acc, rec.dev_acc)
        return rec

    def fit(self, train_set, dev_set=None, epochs: Optional[int] = None,
            on_epoch: Optional[Callable[["Trainer", EpochRecord], None]] = None) -> "Trainer":
        """Train until ``epochs`` (default: the configured budget) have completed."""
        if not train_set:
            raise ConfigError("training set is empty")
        stop = self.config.epochs if epochs is None else min(epochs, self.config.epochs)
        while self.epoch < stop:
            rec = self.run_epoch(train_set, dev_set)
            if on_epoch is not None:
                on_epoch(self, rec)
        return self

    def load_best(self) -> None:
        for k, p in self.params.items():
            p.data[...] = self.best_params[k]


@dataclass
class TrainResult:
    model: CFC
    history: list[EpochRecord]
    losses: list[float]
    best_epoch: Optional[int]
    trainer: Trainer


def train(model: CFC, train_set, dev_set, config: TrainConfig) -> TrainResult:
    """Run the configured budget and leave ``model`` holding the best-dev parameters."""
    tr = Trainer(model, config).fit(train_set, dev_set)
    tr.load_best()
    return TrainResult(model, tr.history, tr.losses, tr.best_epoch, tr)


# -- checkpoints ---------------------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_zip(path, entries: dict[str, bytes]) -> None:
    # fixed timestamps keep identical runs byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])


def checkpoint_save(trainer: Trainer, path) -> None:
    model = trainer.model
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": trainer.config.to_dict(),
        "vocab": model.vocab.itos,
        "epoch": trainer.epoch,
        "global_step": trainer.global_step,
        "optim_step": trainer.optim.step,
        "history": [asdict(r) for r in trainer.history],
        "losses": trainer.losses,
        "best_epoch": trainer.best_epoch,
        "best_dev": trainer.best_dev,
    }
    entries = {"meta.json": json.dumps(meta, sort_keys=True).encode("utf-8"),
               "embeddings.npy": _npy_bytes(model.embeddings.matrix)}
    for name, p in trainer.params.items():
        entries[f"param/{name}.npy"] = _npy_bytes(p.data)
        entries[f"best/{name}.npy"] = _npy_bytes(trainer.best_params[name])
        entries[f"adam_m/{name}.npy"] = _npy_bytes(trainer.optim.m[name])
        entries[f"adam_v/{name}.npy"] = _npy_bytes(trainer.optim.v[name])
    _write_zip(path, entries)


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}


def checkpoint_load(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    with zf.open(name) as fh:
                        arrays[name[:-4]] = np.lib.format.read_array(fh, allow_pickle=False)
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a cfc checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('version')} != {CHECKPOINT_VERSION}")
    ckpt = Checkpoint(meta, arrays)
    if expect is not None:
        got = ckpt.config.model
        for key in ("d_emb", "d_hid", "scorer_hidden"):
            if getattr(got, key) != getattr(expect, key):
                raise CheckpointError(f"{path}: checkpoint {key}={getattr(got, key)} "
                                      f"but {getattr(expect, key)} was expected")
        if got.ablation != expect.ablation:
            raise CheckpointError(f"{path}: checkpoint ablation {got.ablation} != {expect.ablation}")
    return ckpt


def _assign(params: dict[str, Tensor], values: dict[str, np.ndarray], what: str) -> None:
    if set(params) != set(values):
        missing = sorted(set(params) ^ set(values))
        raise CheckpointError(f"{what}: parameter names differ: {missing[:5]}")
    for k, p in params.items():
        if p.data.shape != values[k].shape:
            raise CheckpointError(f"{what}: {k} has shape {values[k].shape}, model expects {p.data.shape}")
        p.data[...] = values[k]


def model_from_checkpoint(ckpt: Checkpoint, which: str = "best") -> CFC:
    """Rebuild a model holding the ``best`` or ``last`` parameters of a checkpoint."""
    if which not in ("best", "last"):
        raise ValueError("which must be 'best' or 'last'")
    config = ckpt.config
    vocab = Vocabulary(ckpt.meta["vocab"][2:])
    table = EmbeddingTable(ckpt.arrays["embeddings"], fixed=True)
    model = CFC.initialize(config.model, vocab, table, seed=config.seed)
    _assign(model.parameters(), ckpt.group("best" if which == "best" else "param"), "checkpoint")
    return model


def restore_params(model: CFC, ckpt: Checkpoint, which: str = "best") -> None:
    _assign(model.parameters(), ckpt.group("best" if which == "best" else "param"), "checkpoint")


def trainer_from_checkpoint(ckpt: Checkpoint) -> Trainer:
    """Rebuild the full training state so :meth:`Trainer.fit` continues the run."""
    model = model_from_checkpoint(ckpt, "last")
    tr = Trainer(model, ckpt.config)
    _assign(tr.params, ckpt.group("param"), "checkpoint")
    tr.best_params = {k: v.copy() for k, v in ckpt.group("best").items()}
    tr.optim.m = {k: v.copy() for k, v in ckpt.group("adam_m").items()}
    tr.optim.v = {k: v.copy() for k, v in ckpt.group("adam_v").items()}
    tr.optim.step = ckpt.meta["optim_step"]
    tr.epoch = ckpt.meta["epoch"]
    tr.global_step = ckpt.meta["global_step"]
    tr.history = [EpochRecord(**r) for r in ckpt.meta["history"]]
    tr.losses = list(ckpt.meta["losses"])
    tr.best_epoch = ckpt.meta["best_epoch"]
    tr.best_dev = ckpt.meta["best_dev"]
    return tr
