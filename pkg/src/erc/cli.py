"""Command-line entry point: ``erc <command> ...``.

Exit codes: 0 success, 2 usage, 3 configuration error, 4 data error,
5 numeric failure (divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from erc.errors import ConfigError, DataError, ErcError

log = logging.getLogger("erc")


def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path: str | Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")


def _vocab_path_for(packed: Path, meta: dict, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    if not meta.get("vocab_path"):
        raise ConfigError("no --vocab given and the packed metadata does not name a vocabulary")
    p = Path(meta["vocab_path"])
    return p if p.is_absolute() else packed.parent / p


def _splits_and_model(args, overrides: dict | None = None):
    from erc.pipeline import model_config_for
    from erc.seqbuilder import by_split, load_packed, resolve_packed

    seqs, meta = load_packed(args.packed)
    if not meta:
        raise DataError(f"{resolve_packed(args.packed)}: missing .meta.json sidecar")
    mc = model_config_for(overrides or {}, meta["vocab_size"], len(meta["classes"]), meta["build"]["max_total_tokens"])
    return by_split(seqs), meta, mc


# -- commands ----------------------------------------------------------------------


def cmd_ingest(args):
    from erc.corpus import assign_iemocap_names, dump_jsonl, load_corpus

    dialogues = load_corpus(args.input, args.format)
    if args.assign_names:
        dialogues = assign_iemocap_names(dialogues, args.seed)
    dump_jsonl(dialogues, args.out)
    log.info("wrote %d dialogues to %s", len(dialogues), args.out)


def cmd_stats(args):
    from erc.corpus import compute_stats, load_corpus

    stats = compute_stats(load_corpus(args.input, args.format))
    print(json.dumps(stats.to_dict(), indent=2))


def cmd_synth(args):
    from erc.corpus import SyntheticConfig, dump_jsonl, generate_synthetic

    cfg = SyntheticConfig.from_dict({**_read_json(args.config), **({"rule": args.rule} if args.rule else {})})
    dump_jsonl(generate_synthetic(cfg, args.seed), args.out)


def cmd_tokenizer_train(args):
    from erc.corpus import load_corpus
    from erc.tokenizer import train_vocab

    vocab = train_vocab(load_corpus(args.input, args.format), args.size)
    vocab.save(args.out)
    log.info("vocabulary of %d tokens written to %s", len(vocab), args.out)


def cmd_build(args):
    from erc.corpus import class_names, load_corpus
    from erc.pipeline import packed_meta
    from erc.seqbuilder import BuildConfig, build_dataset, save_packed
    from erc.tokenizer import Vocab

    dialogues = load_corpus(args.input, args.format)
    vocab = Vocab.load(args.vocab)
    cfg = BuildConfig(args.max_tokens, args.mode, not args.no_speaker, not args.no_capitalize)
    seqs = build_dataset(dialogues, cfg, vocab)
    out = Path(args.out)
    if out.suffix != ".jsonl":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "packed.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab_ref = os.path.relpath(Path(args.vocab).resolve(), out.parent.resolve())
    save_packed(seqs, out, packed_meta(cfg, vocab, class_names(dialogues), vocab_ref))
    log.info("%d packed sequences written to %s", len(seqs), out)


def _train_config(args):
    from erc.training import TrainConfig

    conf = _read_json(args.config)
    train = conf.get("train", conf if "model" not in conf else {})
    if args.seed is not None:
        train = {**train, "seed": args.seed}
    if getattr(args, "lr", None) is not None:
        train = {**train, "peak_lr": args.lr}
    return conf.get("model", {}), TrainConfig.from_dict(train)


def cmd_train(args):
    from erc.training import train

    model_over, tc = _train_config(args)
    splits, meta, mc = _splits_and_model(args, model_over)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_config.json", {"model": mc.to_dict(), "train": tc.to_dict(), "packed": meta})
    result, _ = train(mc, splits["train"], splits["val"], tc, splits.get("test"), out)
    _patch_checkpoint_meta(out / "best.ckpt", meta, args.packed)
    print(json.dumps(result.to_dict(), indent=2))


def _patch_checkpoint_meta(path: Path, meta: dict, packed) -> None:
    from erc.model import read_checkpoint, save_checkpoint
    from erc.seqbuilder import resolve_packed

    model, ck = read_checkpoint(path)
    vocab = _vocab_path_for(resolve_packed(packed), meta, None).resolve()
    save_checkpoint(model, path, {**ck, "classes": meta["classes"], "vocab_path": str(vocab)})


def cmd_lr_search(args):
    from erc.training import search_peak_lr

    model_over, tc = _train_config(args)
    splits, _, mc = _splits_and_model(args, model_over)
    res = search_peak_lr(mc, splits["train"], splits["val"], tc, args.trials, args.low, args.high)
    if args.out:
        _write_json(args.out, res.to_dict())
    print(json.dumps(res.to_dict(), indent=2))


def cmd_eval(args):
    from erc.evaluation import evaluate
    from erc.model import read_checkpoint
    from erc.seqbuilder import by_split, load_packed

    model, ck = read_checkpoint(args.checkpoint)
    seqs, meta = load_packed(args.packed)
    split = by_split(seqs).get(args.split) or []
    report = evaluate(model, split, meta.get("classes") or ck.get("classes"))
    if args.out:
        _write_json(args.out, report.to_dict())
    print(f"weighted f1 on {args.split}: {100 * report.weighted_f1:.2f}")


def cmd_ablate(args):
    from erc.corpus import class_names, load_corpus
    from erc.evaluation import AblationSpec, run_ablation
    from erc.pipeline import build_config, model_config_for
    from erc.tokenizer import Vocab
    from erc.training import TrainConfig

    spec = _read_json(args.spec)
    try:
        dialogues = load_corpus(spec["corpus"], spec.get("format", "native_jsonl"))
        vocab = Vocab.load(spec["vocab"])
    except KeyError as exc:
        raise ConfigError(f"ablation spec is missing {exc}") from None
    bc = build_config(spec.get("build", {}))
    mc = model_config_for(spec.get("model", {}), len(vocab), len(class_names(dialogues)), bc.max_total_tokens)
    table = run_ablation(AblationSpec.from_dict(spec), dialogues, vocab, mc, TrainConfig.from_dict(spec.get("train", {})),
                         bc, args.work_dir)  # fmt: skip
    Path(args.out).write_text(table.to_markdown(), encoding="utf-8")
    print(table.to_markdown())


def cmd_inspect(args):
    from erc.model import predict, read_checkpoint
    from erc.pipeline import inspect_samples
    from erc.seqbuilder import by_split, load_packed, resolve_packed
    from erc.tokenizer import Vocab

    model, ck = read_checkpoint(args.checkpoint)
    seqs, meta = load_packed(args.packed)
    vocab_path = args.vocab or ck.get("vocab_path")
    vocab = Vocab.load(vocab_path) if vocab_path else Vocab.load(_vocab_path_for(resolve_packed(args.packed), meta, None))
    split = by_split(seqs).get(args.split) or []
    if not split:
        raise DataError(f"no packed sequences in split {args.split!r}")
    preds = predict(model, [s.ids for s in split]).argmax(1).tolist()
    classes = meta.get("classes") or ck.get("classes")
    inspect_samples(model, split, preds, vocab, classes, args.n_correct, args.n_incorrect, args.seed, args.out, args.top_k)
    print(Path(args.out, "summary.json").read_text(encoding="utf-8"))


def cmd_pipeline(args):
    from erc.pipeline import ExperimentConfig, apply_overrides, run_pipeline

    conf = apply_overrides(_read_json(args.config), args.set or [])
    if args.run_dir:
        conf["run_dir"] = args.run_dir
    run_dir = run_pipeline(ExperimentConfig.from_dict(conf))
    print(run_dir)


# -- parser --------------------------------------------------------------------------


FORMATS = ("native_jsonl", "meld_csv", "iemocap_json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erc", description="Speaker-aware emotion recognition in conversation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="normalize a MELD/IEMOCAP/native corpus to native JSON lines")
    s.add_argument("--format", choices=FORMATS, default="native_jsonl")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--assign-names", action="store_true", help="give IEMOCAP actors first names")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("stats", help="dialogue and utterance counts per split")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=FORMATS, default="native_jsonl")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--rule", choices=("content_only", "speaker_dependent", "context_dependent"))
    s.add_argument("--config", help="JSON file with SyntheticConfig fields")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    tok = sub.add_parser("tokenizer", help="tokenizer commands").add_subparsers(dest="tok_command", required=True)
    s = tok.add_parser("train", help="learn a byte-level BPE vocabulary")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=FORMATS, default="native_jsonl")
    s.add_argument("--size", type=int, default=4096)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tokenizer_train)

    s = sub.add_parser("build", help="pack every utterance with its context")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=FORMATS, default="native_jsonl")
    s.add_argument("--vocab", required=True)
    s.add_argument("--mode", choices=("none", "past", "future", "both"), default="both")
    s.add_argument("--no-speaker", action="store_true")
    s.add_argument("--no-capitalize", action="store_true")
    s.add_argument("--max-tokens", type=int, default=512)
    s.add_argument("--out", required=True, help="packed .jsonl file, or a directory to hold packed.jsonl")
    s.set_defaults(func=cmd_build)

    for name, func, help_ in (("train", cmd_train, "train one seed"), ("lr-search", cmd_lr_search, "search the peak lr")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--packed", required=True)
        s.add_argument("--config", help='JSON with optional "model" and "train" sections')
        s.add_argument("--seed", type=int)
        if name == "train":
            s.add_argument("--lr", type=float, help="peak learning rate (overrides the config)")
            s.add_argument("--out", required=True)
        else:
            s.add_argument("--trials", type=int, default=5)
            s.add_argument("--low", type=float, default=1e-6)
            s.add_argument("--high", type=float, default=1e-4)
            s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score a checkpoint on a packed split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--packed", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the context/speaker ablation grid")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--work-dir", help="keep per-cell run directories here")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("inspect", help="attention highlight reports for sampled predictions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--packed", required=True)
    s.add_argument("--vocab")
    s.add_argument("--split", default="test")
    s.add_argument("--n-correct", type=int, default=10)
    s.add_argument("--n-incorrect", type=int, default=10)
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("pipeline", help="run every stage into one run directory")
    s.add_argument("--config", required=True)
    s.add_argument("--run-dir")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("ERC_NUM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        args.func(args)
    except ErcError as exc:
        print(f"erc: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
