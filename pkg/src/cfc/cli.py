"""Command-line front end: ``cfc {train,eval,export-attention,gen}``.

Exit status is 0 on success, 1 on a runtime failure (bad data, divergence,
unreadable checkpoint) and 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    Example,
    Vocabulary,
    load_dataset,
    load_embeddings,
    mask_candidates,
    save_dataset,
    truncate,
)
from .errors import CfcError, ConfigError
from .model import ABLATIONS, AblationConfig
from .synthetic import (
    SYNTHETIC_EMBEDDING_SCALE,
    gen_synthetic,
    random_embeddings,
    synthetic_train_config,
)
from .training import (
    TrainConfig,
    Trainer,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    format_history,
    model_from_checkpoint,
    trainer_from_checkpoint,
)

log = logging.getLogger("cfc")

ABLATE_CHOICES = [a.replace("_", "-") for a in ABLATIONS]
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    """Bad combination of arguments; reported with exit status 2."""


# -- config resolution ------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def read_config_file(path) -> dict:
    """TrainConfig overrides from JSON; a ``config.json`` written by ``train`` also works."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return raw.get("train_config", raw)


def resolve_seed(flag: Optional[int], file_cfg: dict, env=None) -> Optional[int]:
    """``--seed`` beats the config file, which beats ``CFC_SEED``; ``None`` if none is set."""
    env = os.environ if env is None else env
    if flag is not None:
        return flag
    if "seed" in file_cfg:
        return file_cfg["seed"]
    if env.get("CFC_SEED"):
        try:
            return int(env["CFC_SEED"])
        except ValueError:
            raise ConfigError(f"CFC_SEED must be an integer, got {env['CFC_SEED']!r}") from None
    return None


def resolve_train_config(args, env=None) -> TrainConfig:
    """Defaults (or the synthetic recipe) < config file < command-line flags."""
    base = synthetic_train_config() if getattr(args, "synthetic", None) is not None else TrainConfig()
    file_cfg = read_config_file(args.config) if args.config else {}
    merged = _merge(base.to_dict(), file_cfg)
    seed = resolve_seed(args.seed, file_cfg, env)
    if seed is not None:
        merged["seed"] = seed
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr")):
        if getattr(args, flag) is not None:
            merged[key] = getattr(args, flag)
    if args.masked:
        merged["masked"] = True
    model = merged["model"]
    if args.d_hid is not None:
        model["d_hid"] = args.d_hid
    if args.d_emb is not None:
        model["d_emb"] = args.d_emb
    if args.literal_columnwise_softmax:
        model["literal_columnwise_softmax"] = True
    if args.ablate:
        model["ablation"] = vars(AblationConfig.from_flags(args.ablate))
    try:
        return TrainConfig.from_dict(merged)
    except TypeError as e:
        raise ConfigError(f"bad config: {e}") from None


# -- data plumbing ------------------------------------------------------------------

def _existing(path: Optional[str], flag: str) -> Optional[str]:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return path


def _mask_rng(seed: int, split: int) -> np.random.Generator:
    return np.random.default_rng((seed, 3, split))


def _prepare(examples: list[Example], split: int, seed: int, masked: bool, args) -> list[Example]:
    examples = truncate(examples, getattr(args, "max_query_tokens", None),
                        getattr(args, "max_doc_tokens", None))
    return mask_candidates(examples, _mask_rng(seed, split)) if masked else examples


def load_train_data(args, config: TrainConfig):
    """Raw (unmasked) train/dev/test splits; ``test`` may be ``None``."""
    if args.synthetic is not None:
        if args.train or args.dev:
            raise UsageError("--synthetic replaces --train/--dev; give one or the other")
        if args.synthetic < 1 or args.synthetic_dev < 1:
            raise UsageError("--synthetic and --synthetic-dev must be positive")
        rng = np.random.default_rng(config.seed)
        train = gen_synthetic(args.synthetic, rng=rng, id_prefix="train")
        dev = gen_synthetic(args.synthetic_dev, rng=rng, id_prefix="dev")
    else:
        if not args.train or not args.dev:
            raise UsageError("train needs --train PATH and --dev PATH (or --synthetic N)")
        train = load_dataset(_existing(args.train, "--train"))
        dev = load_dataset(_existing(args.dev, "--dev"))
    test = load_dataset(_existing(args.test, "--test")) if args.test else None
    return train, dev, test


def build_embeddings(args, vocab: Vocabulary, config: TrainConfig):
    d_emb = config.model.d_emb
    if args.embeddings or args.char_embeddings:
        table, cov = load_embeddings(vocab, d_emb, _existing(args.embeddings, "--embeddings"),
                                     _existing(args.char_embeddings, "--char-embeddings"),
                                     rng=np.random.default_rng((config.seed, 4)))
        for path, n in cov.covered.items():
            log.info("%s: %d of %d vocabulary tokens covered", path, n, len(vocab))
        return table, None
    scale = SYNTHETIC_EMBEDDING_SCALE if args.synthetic is not None else 0.1
    return random_embeddings(vocab, d_emb, seed=config.seed, scale=scale), scale


def _candidate_text(ex: Example, k: int) -> str:
    return " ".join(ex.candidates[k])


def write_predictions(path, examples: Sequence[Example], preds: Sequence[int]) -> None:
    lines = ["id\tprediction\tcandidate"]
    for ex, k in zip(examples, preds):
        lines.append(f"{ex.id}\t{k}\t{_candidate_text(ex, k)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(acc: Optional[float]) -> str:
    return "-" if acc is None else f"{acc:.4f}"


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.resume:
        ckpt = checkpoint_load(_existing(args.resume, "--resume"))
        config = ckpt.config
        ignored = [f for f in ("config", "d_hid", "d_emb", "epochs", "batch_size", "lr", "seed", "ablate")
                   if getattr(args, f)]
        if ignored or args.masked or args.literal_columnwise_softmax:
            log.warning("--resume uses the checkpoint's configuration; other settings are ignored")
        trainer = trainer_from_checkpoint(ckpt)
        log.info("resuming at epoch %d step %d", trainer.epoch, trainer.global_step)
    else:
        config = resolve_train_config(args)
        trainer = None
    raw_train, raw_dev, raw_test = load_train_data(args, config)
    train_set = _prepare(raw_train, 0, config.seed, config.masked, args)
    dev_set = _prepare(raw_dev, 1, config.seed, config.masked, args)
    test_set = _prepare(raw_test, 2, config.seed, config.masked, args) if raw_test else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if trainer is None:
        from .model import CFC
        vocab = Vocabulary.build([d for d in (train_set, dev_set, test_set) if d])
        table, scale = build_embeddings(args, vocab, config)
        model = CFC.initialize(config.model, vocab, table, seed=config.seed)
        trainer = Trainer(model, config)
    else:
        scale = None

    snapshot = {
        "command": "train",
        "ablate": list(args.ablate or []),
        "data": {"train": args.train, "dev": args.dev, "test": args.test,
                 "synthetic": args.synthetic,
                 "synthetic_dev": args.synthetic_dev if args.synthetic is not None else None,
                 "max_query_tokens": args.max_query_tokens, "max_doc_tokens": args.max_doc_tokens},
        "embeddings": {"word": args.embeddings, "char": args.char_embeddings, "random_scale": scale},
        "resume": args.resume,
        "out": str(out),
        "seed": config.seed,
        "masked": config.masked,
        "vocab_size": len(trainer.model.vocab),
        "n_params": int(sum(p.data.size for p in trainer.params.values())),
        "train_config": config.to_dict(),
    }
    _dump(out / "config.json", snapshot)
    if args.synthetic is not None:
        save_dataset(raw_train, out / "train.json")
        save_dataset(raw_dev, out / "dev.json")

    def on_epoch(tr, rec):
        (out / "history.tsv").write_text(format_history(tr.history), encoding="utf-8")
        checkpoint_save(tr, out / CHECKPOINT_NAME)
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  train {_fmt(rec.train_acc)}  "
              f"dev {_fmt(rec.dev_acc)}", flush=True)

    stop = None if args.stop_after is None else trainer.epoch + args.stop_after
    trainer.fit(train_set, dev_set, epochs=stop, on_epoch=on_epoch)
    (out / "history.tsv").write_text(format_history(trainer.history), encoding="utf-8")
    checkpoint_save(trainer, out / CHECKPOINT_NAME)
    trainer.load_best()
    print(f"best epoch {trainer.best_epoch}  dev accuracy {trainer.best_dev}")
    if test_set:
        res = evaluate(trainer.model, test_set, config.eval_batch_size)
        write_predictions(out / "predictions.tsv", raw_test, res.predictions)
        if res.accuracy is not None:
            print(f"test accuracy {res.accuracy!r}")
    return 0


def _load_for_inference(args):
    ckpt = checkpoint_load(_existing(args.checkpoint, "--checkpoint"))
    config = ckpt.config
    if args.masked != config.masked:
        log.warning("--masked is %s but the checkpoint was trained with masked=%s",
                    "on" if args.masked else "off", config.masked)
    model = model_from_checkpoint(ckpt, args.params)
    return ckpt, config, model


def cmd_eval(args) -> int:
    _, config, model = _load_for_inference(args)
    raw = load_dataset(_existing(args.data, "--data"))
    data = _prepare(raw, args.mask_split, config.seed, args.masked, args)
    res = evaluate(model, data, args.batch_size or config.eval_batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.data).stem
    write_predictions(out / f"predictions_{stem}.tsv", raw, res.predictions)
    n_right = None if res.accuracy is None else sum(
        int(p == ex.answer_index) for p, ex in zip(res.predictions, raw))
    _dump(out / f"eval_{stem}.json", {"data": args.data, "checkpoint": args.checkpoint,
                                      "params": args.params, "masked": args.masked,
                                      "n": len(raw), "correct": n_right, "accuracy": res.accuracy})
    if res.accuracy is None:
        print(f"{len(raw)} predictions written (unlabelled data: no accuracy)")
    else:
        print(f"accuracy {res.accuracy!r} ({n_right}/{len(raw)})")
    return 0


def _safe_name(example_id: str) -> str:
    return re.sub(r"[^\w.-]", "_", example_id)


def _lists(x):
    if x is None:
        return None
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (list, tuple)):
        return [_lists(v) for v in x]
    return x


def trace_record(model, shown: Example, raw: Example) -> dict:
    """Every attention map of one example as plain lists, labelled by document and mention."""
    from .tensor import no_grad
    with no_grad():
        Y, tr = model.score_candidates(shown, trace=True)
    scores = Y.data.tolist()
    docs = []
    for i, d in enumerate(tr.documents):
        docs.append({"document": i, **{k: _lists(v) for k, v in d.items()}})
    weights = None
    if tr.summary is not None:
        weights = [{"document": i, "weight": float(w)} for i, w in enumerate(tr.summary)]
    cands = []
    for j, c in enumerate(tr.candidates):
        entry = {k: _lists(v) for k, v in c.items() if k != "mentions"}
        entry["candidate"] = j
        entry["text"] = _candidate_text(raw, j)
        entry["mentions"] = [{"mention": m, "document": d, "start": a, "end": b}
                             for m, (d, a, b) in enumerate(c["mentions"])]
        cands.append(entry)
    return {
        "id": raw.id,
        "query": list(shown.query),
        "answer_index": raw.answer_index,
        "prediction": int(np.argmax(scores)),
        "scores": scores,
        "ablation": model.ablation.flags(),
        "documents": docs,
        "document_weights": weights,
        "candidates": cands,
    }


def cmd_export_attention(args) -> int:
    _, config, model = _load_for_inference(args)
    raw = load_dataset(_existing(args.data, "--data"))
    shown = _prepare(raw, args.mask_split, config.seed, args.masked, args)
    index = {ex.id: k for k, ex in enumerate(raw)}
    unknown = [i for i in args.ids if i not in index]
    if unknown:
        known = list(index)
        more = f" ... ({len(known)} total)" if len(known) > 50 else ""
        print(f"unknown example id(s): {', '.join(unknown)}\nknown ids: {', '.join(known[:50])}{more}",
              file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ex_id in args.ids:
        k = index[ex_id]
        path = out / f"{_safe_name(ex_id)}.json"
        _dump(path, trace_record(model, shown[k], raw[k]))
        print(path)
    return 0


def cmd_gen(args) -> int:
    sizes = {"train": args.n_train, "dev": args.n_dev, "test": args.n_test}
    if any(n < 0 for n in sizes.values()):
        raise ConfigError("split sizes must be non-negative")
    seed = resolve_seed(args.seed, {})
    seed = 0 if seed is None else seed
    rng = np.random.default_rng(seed)
    # generate every split before writing, so bad parameters leave no partial output
    splits = {name: gen_synthetic(n, n_docs=args.n_docs, n_cands=args.n_cands,
                                  vocab_size=args.vocab_size, rng=rng, id_prefix=name)
              for name, n in sizes.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, examples in splits.items():
        save_dataset(examples, out / f"{name}.json")
        print(f"{out / (name + '.json')}: {len(examples)} examples")
    return 0


# -- parser ---------------------------------------------------------------------------------

def _add_truncation(p):
    p.add_argument("--max-query-tokens", type=int, default=None, help="clip queries (default: no limit)")
    p.add_argument("--max-doc-tokens", type=int, default=None, help="clip documents (default: no limit)")


def _add_inference(p):
    p.add_argument("--checkpoint", required=True, help="model.ckpt written by train")
    p.add_argument("--data", "--test", dest="data", required=True, help="dataset JSON")
    p.add_argument("--params", choices=["best", "last"], default="best",
                   help="best-dev snapshot or final parameters")
    p.add_argument("--masked", action="store_true", help="mask candidates (should match training)")
    p.add_argument("--mask-split", type=int, default=0,
                   help="placeholder stream: 0 train, 1 dev, 2 test (as used by train)")
    _add_truncation(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoint, history and config")
    p.add_argument("--train", help="training set JSON")
    p.add_argument("--dev", help="development set JSON (best-epoch selection)")
    p.add_argument("--test", help="optional test set; predictions written after training")
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N generated two-hop examples")
    p.add_argument("--synthetic-dev", type=int, default=100, metavar="N", help="generated dev size")
    p.add_argument("--embeddings", help="word vector file (token v1 ... vd)")
    p.add_argument("--char-embeddings", help="second vector file, concatenated after the word vectors")
    p.add_argument("--config", help="JSON file of TrainConfig values")
    p.add_argument("--d-hid", type=int)
    p.add_argument("--d-emb", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="default: config file, then $CFC_SEED, then 0")
    p.add_argument("--masked", action="store_true", help="replace candidates by placeholders")
    p.add_argument("--ablate", action="append", choices=ABLATE_CHOICES, default=None,
                   help="drop a component (repeatable)")
    p.add_argument("--literal-columnwise-softmax", action="store_true",
                   help="normalise the affinity matrix along the other axis")
    p.add_argument("--resume", help="continue the run stored in this checkpoint")
    p.add_argument("--stop-after", type=int, metavar="N",
                   help="stop after N epochs of this invocation (the schedule still spans --epochs)")
    p.add_argument("--out", default="runs/cfc", help="output directory")
    _add_truncation(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy and per-example predictions")
    _add_inference(p)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-attention", parents=[common], help="write attention maps of chosen examples as JSON")
    _add_inference(p)
    p.add_argument("--ids", nargs="+", required=True, help="example ids to export")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("gen", parents=[common], help="write seeded synthetic train/dev/test splits")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-dev", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--n-docs", type=int, default=4)
    p.add_argument("--n-cands", type=int, default=5)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"cfc {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (CfcError, OSError) as e:
        print(f"cfc {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
