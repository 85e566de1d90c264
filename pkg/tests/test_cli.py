"""End-to-end command-line runs on tiny synthetic data."""
import json
import subprocess
import sys

import pytest

from cfc.cli import main, resolve_seed
from cfc.data import load_dataset, save_dataset
from cfc.synthetic import solve_symbolic
from cfc.training import checkpoint_load

TINY = ["--d-hid", "8", "--d-emb", "10", "--synthetic-dev", "10", "-q"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--synthetic", 20, "--epochs", 3, "--out", out, *TINY) == 0
    return out


def test_train_writes_artifacts(trained):
    for name in ("model.ckpt", "history.tsv", "config.json", "train.json", "dev.json"):
        assert (trained / name).is_file()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["train_config"]["model"]["d_hid"] == 8 and cfg["train_config"]["epochs"] == 3
    assert len((trained / "history.tsv").read_text().splitlines()) == 4
    assert checkpoint_load(trained / "model.ckpt").meta["epoch"] == 3


def test_eval_matches_history(trained, tmp_path, capsys):
    last = (trained / "history.tsv").read_text().splitlines()[-1].split("\t")
    assert run("eval", "--checkpoint", trained / "model.ckpt", "--data", trained / "train.json",
               "--params", "last", "--out", tmp_path, "-q") == 0
    report = json.loads((tmp_path / "eval_train.json").read_text())
    assert abs(report["accuracy"] - float(last[4])) <= 1e-12
    preds = (tmp_path / "predictions_train.tsv").read_text().splitlines()
    assert preds[0] == "id\tprediction\tcandidate" and len(preds) == 21
    ex = load_dataset(trained / "train.json")[0]
    rid, k, text = preds[1].split("\t")
    assert rid == ex.id and text == " ".join(ex.candidates[int(k)])


def test_eval_unlabelled(trained, tmp_path, capsys):
    exs = load_dataset(trained / "dev.json")
    for e in exs:
        e.answer_index = None
    save_dataset(exs, tmp_path / "blind.json")
    assert run("eval", "--checkpoint", trained / "model.ckpt", "--data", tmp_path / "blind.json",
               "--out", tmp_path, "-q") == 0
    assert "no accuracy" in capsys.readouterr().out
    assert json.loads((tmp_path / "eval_blind.json").read_text())["accuracy"] is None
    assert len((tmp_path / "predictions_blind.tsv").read_text().splitlines()) == 11


def test_eval_masked_mismatch_warns(trained, tmp_path, capsys):
    assert run("eval", "--checkpoint", trained / "model.ckpt", "--data", trained / "dev.json",
               "--masked", "--out", tmp_path) == 0
    assert "masked" in capsys.readouterr().err


def test_export_attention(trained, tmp_path):
    ids = [e.id for e in load_dataset(trained / "dev.json")[:2]]
    args = ["export-attention", "--checkpoint", trained / "model.ckpt", "--data", trained / "dev.json",
            "--ids", *ids, "-q"]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    for i in ids:
        blob = (tmp_path / "a" / f"{i}.json").read_bytes()
        assert blob == (tmp_path / "b" / f"{i}.json").read_bytes()
        tr = json.loads(blob)
        assert len(tr["documents"]) == 4 and len(tr["document_weights"]) == 4
        assert abs(sum(w["weight"] for w in tr["document_weights"]) - 1.0) < 1e-6
        assert [c["candidate"] for c in tr["candidates"]] == list(range(5))
        for c in tr["candidates"]:
            assert len(c["mentions"]) == len(c["summary"]) == 2
            assert abs(sum(c["summary"]) - 1.0) < 1e-6
        doc = tr["documents"][0]
        assert len(doc["over_query"]) == len(doc["tokens"]) and len(doc["self"]) == len(doc["tokens"])


def test_export_unknown_id(trained, tmp_path, capsys):
    code = run("export-attention", "--checkpoint", trained / "model.ckpt", "--data",
               trained / "dev.json", "--ids", "nope", "--out", tmp_path, "-q")
    assert code == 1
    err = capsys.readouterr().err
    assert "nope" in err and "dev00000" in err


def test_ablate_recorded_verbatim(tmp_path):
    assert run("train", "--synthetic", 10, "--epochs", 1, "--ablate", "no-fine", "--out", tmp_path,
               *TINY) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["ablate"] == ["no-fine"]
    assert cfg["train_config"]["model"]["ablation"]["no_fine"] is True


def test_masked_training_run(tmp_path):
    assert run("train", "--synthetic", 10, "--epochs", 1, "--masked", "--out", tmp_path, *TINY) == 0
    assert json.loads((tmp_path / "config.json").read_text())["masked"] is True
    vocab = checkpoint_load(tmp_path / "model.ckpt").meta["vocab"]
    assert any(t.startswith("__cand") for t in vocab)


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    assert run("train", "--train", tmp_path / "nope.json", "--dev", tmp_path / "nope.json",
               "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "nope.json" in err
    assert run("train", "--out", tmp_path) == 2
    assert run("eval", "--checkpoint", tmp_path / "x.ckpt", "--data", tmp_path / "x.json") == 2
    assert run("frobnicate") == 2


def test_bad_config_is_usage_error(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 1}))
    assert run("train", "--synthetic", 5, "--config", tmp_path / "c.json", "--out", tmp_path, *TINY) == 2
    (tmp_path / "c.json").write_text(json.dumps({"model": {"d_hid": 7}}))
    assert run("train", "--synthetic", 5, "--config", tmp_path / "c.json", "--out", tmp_path, "-q") == 2


def test_config_precedence(tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 2, "lr": 0.01, "model": {"d_hid": 6}}))
    monkeypatch.setenv("CFC_SEED", "9")
    out = tmp_path / "o"
    assert run("train", "--synthetic", 5, "--config", tmp_path / "c.json", "--lr", 0.02,
               "--d-emb", 10, "--synthetic-dev", 5, "--out", out, "-q") == 0
    tc = json.loads((out / "config.json").read_text())["train_config"]
    assert tc["epochs"] == 2 and tc["lr"] == 0.02 and tc["model"]["d_hid"] == 6
    assert tc["seed"] == 9 and tc["batch_size"] == 10      # env seed; synthetic recipe default


def test_resolve_seed_order():
    assert resolve_seed(3, {"seed": 4}, {"CFC_SEED": "5"}) == 3
    assert resolve_seed(None, {"seed": 4}, {"CFC_SEED": "5"}) == 4
    assert resolve_seed(None, {}, {"CFC_SEED": "5"}) == 5
    assert resolve_seed(None, {}, {}) is None


def test_interrupted_run_resumes_exactly(tmp_path):
    full, part, rest = tmp_path / "full", tmp_path / "part", tmp_path / "rest"
    assert run("train", "--synthetic", 10, "--epochs", 3, "--out", full, *TINY) == 0
    assert run("train", "--synthetic", 10, "--epochs", 3, "--stop-after", 1, "--out", part, *TINY) == 0
    assert checkpoint_load(part / "model.ckpt").meta["epoch"] == 1
    assert run("train", "--synthetic", 10, "--resume", part / "model.ckpt", "--synthetic-dev", 10,
               "--out", rest, "-q") == 0
    a = checkpoint_load(full / "model.ckpt").meta
    b = checkpoint_load(rest / "model.ckpt").meta
    assert b["epoch"] == 3
    assert max(abs(x - y) for x, y in zip(a["losses"], b["losses"])) <= 1e-12
    assert (full / "history.tsv").read_bytes() == (rest / "history.tsv").read_bytes()


def test_gen(tmp_path):
    args = ["gen", "--n-train", 30, "--n-dev", 20, "--n-test", 5, "--seed", 4, "-q"]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    for split in ("train", "dev", "test"):
        assert (tmp_path / "a" / f"{split}.json").read_bytes() == (tmp_path / "b" / f"{split}.json").read_bytes()
    dev = load_dataset(tmp_path / "a" / "dev.json")
    assert len(dev) == 20 and all(solve_symbolic(ex) == ex.answer_index for ex in dev)
    assert run("gen", "--n-cands", 2, "--out", tmp_path / "c") == 2
    assert not (tmp_path / "c").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cfc.cli", "gen", "--n-train", "2", "--n-dev", "2",
                           "--n-test", "0", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "test.json").read_text()) == []
