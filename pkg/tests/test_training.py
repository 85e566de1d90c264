"""Optimizer, schedule, training loop, evaluation and checkpoints."""

import numpy as np
import pytest

from cfc.data import Vocabulary
from cfc.errors import CheckpointError, ConfigError, DivergenceError
from cfc.model import CFC, ModelConfig
from cfc.synthetic import gen_synthetic, random_embeddings, synthetic_model_config, synthetic_train_config
from cfc.tensor import Tensor
from cfc.training import (
    EvalResult,
    OptimState,
    TrainConfig,
    Trainer,
    adam_step,
    checkpoint_load,
    checkpoint_save,
    cosine_lr,
    evaluate,
    format_history,
    model_from_checkpoint,
    train,
    trainer_from_checkpoint,
)

from conftest import NO_DROPOUT, make_model, toy_examples


def ref_adam(grad_fn, x0, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Adam written out from the textbook update."""
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


# -- optimizer and schedule --------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st = OptimState.for_params(p)
    p["w"].grad = np.zeros(2)
    adam_step(p, st)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert st.step == 1


def test_adam_first_step_is_lr():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    st = OptimState.for_params(p, lr=1e-3)
    p["w"].grad = np.array([1.0])
    adam_step(p, st)
    assert abs(abs(p["w"].data[0]) - 1e-3) < 1e-6


def test_adam_matches_reference_on_quadratic():
    A = np.diag([1.0, 3.0, 0.5])
    grad = lambda x: A @ (x - np.array([1.0, -1.0, 2.0]))
    x0 = np.array([0.3, 0.2, -0.1])
    p = {"x": Tensor(x0.copy(), requires_grad=True)}
    st = OptimState.for_params(p, lr=0.05)
    for _ in range(10):
        p["x"].grad = grad(p["x"].data)
        adam_step(p, st)
    assert np.max(np.abs(p["x"].data - ref_adam(grad, x0, 10, lr=0.05))) < 1e-10


def test_adam_rejects_nan_gradient_by_name():
    p = {"layer.W": Tensor(np.zeros(2), requires_grad=True)}
    p["layer.W"].grad = np.array([0.0, np.nan])
    with pytest.raises(DivergenceError, match="layer.W"):
        adam_step(p, OptimState.for_params(p))


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert abs(cosine_lr(100, 100, 1e-3)) < 1e-18
    assert abs(cosine_lr(50, 100, 1e-3) - 5e-4) < 1e-18
    seq = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3)


def test_schedule_units():
    m = make_model(toy_examples())
    step = Trainer(m, TrainConfig(epochs=4, batch_size=2, model=m.config))
    assert step.steps_per_epoch(3) == 2          # last partial batch kept
    assert step.lr_at(4, 0, 3) == cosine_lr(4, 8, 1e-3)
    epoch = Trainer(m, TrainConfig(epochs=4, schedule_unit="epoch", model=m.config))
    assert epoch.lr_at(7, 2, 3) == cosine_lr(2, 4, 1e-3)
    const = Trainer(m, TrainConfig(schedule="constant", model=m.config))
    assert const.lr_at(99, 3, 3) == 1e-3


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.lr, c.beta1, c.beta2, c.adam_eps) == (50, 80, 1e-3, 0.9, 0.999, 1e-8)
    assert c.schedule == "cosine" and c.clip_norm is None
    assert TrainConfig.from_dict(c.to_dict()) == c
    for bad in (dict(epochs=0), dict(lr=-1.0), dict(schedule="linear")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# -- evaluation ------------------------------------------------------------------------------

class StubModel:
    def __init__(self, pick):
        self.pick = pick

    def batch(self, exs):
        return exs

    def forward(self, exs, training=False):
        from cfc.model import ForwardResult
        n = max(e.n_candidates for e in exs)
        s = np.zeros((len(exs), n))
        for i, e in enumerate(exs):
            s[i, self.pick(e)] = 1.0
        return ForwardResult(Tensor(s), np.ones_like(s, dtype=bool), None, None, {})


def test_evaluate_stubs():
    exs = toy_examples()
    assert evaluate(StubModel(lambda e: e.answer_index), exs).accuracy == 1.0
    wrong = StubModel(lambda e: (e.answer_index + 1) % e.n_candidates)
    assert evaluate(wrong, exs, batch_size=2).accuracy == 0.0
    import dataclasses
    unl = [dataclasses.replace(e, answer_index=None) for e in exs]
    res = evaluate(StubModel(lambda e: 0), unl)
    assert res == EvalResult(None, [0, 0, 0])


def test_random_model_is_near_chance():
    data = gen_synthetic(1000, rng=np.random.default_rng(11))
    vocab = Vocabulary.build([data])
    mc = ModelConfig(d_emb=20, d_hid=16, dropout=NO_DROPOUT)
    model = CFC.initialize(mc, vocab, random_embeddings(vocab, 20, seed=3), seed=3)
    acc = evaluate(model, data).accuracy
    assert 0.1 <= acc <= 0.35


# -- training loop -----------------------------------------------------------------------------

def small_setup(n=30, seed=0, **kw):
    data = gen_synthetic(n, rng=np.random.default_rng(seed))
    vocab = Vocabulary.build([data])
    mc = synthetic_model_config(d_hid=8, d_emb=12)
    cfg = synthetic_train_config(epochs=kw.pop("epochs", 3), seed=seed, model=mc, **kw)
    model = CFC.initialize(mc, vocab, random_embeddings(vocab, 12, seed), seed=seed)
    return data, model, cfg


def test_lr_zero_leaves_parameters():
    data, model, cfg = small_setup(n=5, epochs=1, lr=0.0, batch_size=10)
    before = {k: p.data.copy() for k, p in model.parameters().items()}
    res = train(model, data, data, cfg)
    assert len(res.history) == 1 and len(res.losses) == 1
    for k, p in model.parameters().items():
        np.testing.assert_array_equal(p.data, before[k])


def test_single_batch_loss_decreases():
    data, model, cfg = small_setup(n=10, lr=1e-3)
    tr = Trainer(model, cfg)
    # same dropout masks every step, so only the parameters change
    losses = [tr.train_step(data, 1e-3, np.random.default_rng(5)) for _ in range(10)]
    assert losses[-1] < losses[0]


def test_fixed_embeddings_unchanged_by_training():
    data, model, cfg = small_setup(n=20)
    before = model.embeddings.matrix.copy()
    train(model, data, data, cfg)
    np.testing.assert_array_equal(model.embeddings.matrix, before)
    np.testing.assert_array_equal(model.embeddings.tensor.data, before)


def test_same_seed_same_trace():
    runs = []
    for _ in range(2):
        data, model, cfg = small_setup()
        runs.append(train(model, data[:20], data[20:], cfg).losses)
    assert len(runs[0]) == 3 * 2
    assert np.max(np.abs(np.array(runs[0]) - np.array(runs[1]))) <= 1e-12


def test_best_epoch_selection_prefers_earliest_tie():
    data, model, cfg = small_setup(epochs=4, lr=0.0)
    res = train(model, data[:20], data[20:], cfg)
    assert res.best_epoch == 1      # nothing changes with lr 0, so every epoch ties


def test_history_table():
    data, model, cfg = small_setup(epochs=2)
    res = train(model, data[:20], data[20:], cfg)
    lines = format_history(res.history).splitlines()
    assert lines[0].split("\t") == ["epoch", "step", "lr", "train_loss", "train_acc", "dev_acc"]
    assert len(lines) == 3 and lines[2].split("\t")[1] == "4"


def test_divergence_reports_position():
    data, model, cfg = small_setup(n=10, epochs=1)
    model.params.fine_proj.W.data[:] = np.inf
    with pytest.raises(DivergenceError, match="epoch 0 step 0"):
        train(model, data, data, cfg)


def test_empty_training_set():
    data, model, cfg = small_setup(n=5)
    with pytest.raises(ConfigError):
        Trainer(model, cfg).fit([])


def test_clip_norm_option():
    data, model, cfg = small_setup(n=10, epochs=1, clip_norm=1e-3)
    train(model, data, data, cfg)


# -- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    data, model, cfg = small_setup(epochs=2)
    res = train(model, data[:20], data[20:], cfg)
    before = evaluate(model, data)
    checkpoint_save(res.trainer, tmp_path / "m.ckpt")
    loaded = model_from_checkpoint(checkpoint_load(tmp_path / "m.ckpt"))
    after = evaluate(loaded, data)
    assert after == before
    for k, p in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[k].data, p.data)
    assert loaded.vocab.itos == model.vocab.itos


def test_checkpoint_bytes_are_deterministic(tmp_path):
    blobs = []
    for name in ("a", "b"):
        data, model, cfg = small_setup(epochs=1)
        res = train(model, data, None, cfg)
        checkpoint_save(res.trainer, tmp_path / name)
        blobs.append((tmp_path / name).read_bytes())
    assert blobs[0] == blobs[1]


def test_resume_reproduces_uninterrupted_trace(tmp_path):
    data, model, cfg = small_setup(epochs=4)
    full = Trainer(model, cfg).fit(data[:20], data[20:])

    data, model, cfg = small_setup(epochs=4)
    first = Trainer(model, cfg).fit(data[:20], data[20:], epochs=2)
    checkpoint_save(first, tmp_path / "half.ckpt")
    resumed = trainer_from_checkpoint(checkpoint_load(tmp_path / "half.ckpt"))
    resumed.fit(data[:20], data[20:])
    assert len(resumed.losses) == len(full.losses)
    assert np.max(np.abs(np.array(resumed.losses) - np.array(full.losses))) <= 1e-12
    assert resumed.best_epoch == full.best_epoch


def test_checkpoint_rejects_mismatch(tmp_path):
    data, model, cfg = small_setup(epochs=1)
    res = train(model, data, None, cfg)
    checkpoint_save(res.trainer, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="d_hid"):
        checkpoint_load(tmp_path / "m.ckpt", expect=synthetic_model_config(d_hid=10, d_emb=12))
    checkpoint_load(tmp_path / "m.ckpt", expect=synthetic_model_config(d_hid=8, d_emb=12))
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "junk.ckpt")


def test_checkpoint_version_checked(tmp_path):
    import json
    import zipfile
    data, model, cfg = small_setup(epochs=1)
    checkpoint_save(train(model, data, None, cfg).trainer, tmp_path / "m.ckpt")
    with zipfile.ZipFile(tmp_path / "m.ckpt") as src, zipfile.ZipFile(tmp_path / "v2.ckpt", "w") as dst:
        for name in src.namelist():
            blob = src.read(name)
            if name == "meta.json":
                meta = json.loads(blob)
                meta["version"] = 2
                blob = json.dumps(meta).encode()
            dst.writestr(name, blob)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(tmp_path / "v2.ckpt")
