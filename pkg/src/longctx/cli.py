"""Single executable exposing the full experimental loop.

Subcommands map one-to-one onto the lab's analyses: ``tokenize-stats``
(token-waste histogram numbers), ``train`` (one contrastive run),
``eval-retrieval`` / ``eval-zeroshot`` (the two evaluation protocols),
``longcap`` (caption augmentation), ``make-synthetic`` / ``build-benchmark``
(data construction), and ``ablate`` (train+eval across context lengths with
a comparison table and convergence curves).

Configuration precedence per command: built-in defaults < ``--config`` file
< ``LONGCTX_<KEY>`` environment variables < explicit flags.  Unknown config
keys are rejected.  Every command echoes its effective configuration and the
package version into the output directory.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    PairedCorpus,
    SyntheticSpec,
    build_long_caption_benchmark,
    generate_synthetic,
    load_articles,
    load_corpus,
    save_corpus,
    write_benchmark_manifest,
)
from .encoders import (
    ImageEncoderConfig,
    TextEncoderConfig,
    TrainedModel,
    load_checkpoint,
    save_checkpoint,
)
from .errors import LongCtxError, UsageError
from .evaluation import (
    ZeroShotTask,
    format_retrieval_summary,
    permute_options,
    read_zero_shot_records,
    recall_pair,
    retrieval_csv_rows,
    RETRIEVAL_CSV_HEADER,
    zero_shot_classify,
)
from .longcap import (
    make_backend,
    read_caption_records,
    run_pipeline,
    write_output_corpus,
)
from .tokenizer import (
    WASTE_CSV_HEADER,
    corpus_token_stats,
    format_waste_report,
    load_vocab,
    save_vocab,
    train_bpe,
    waste_report_csv_row,
)
from .trainer import (
    TrainConfig,
    parse_config_file,
    steps_to_loss,
    train,
    write_loss_curve,
)

ENV_PREFIX = "LONGCTX_"

# Per-command option schema: key -> (type, default, help).  Keys mirror the
# config-file / environment spelling; flags swap underscores for dashes.
TRAIN_KNOBS = {
    "context_length": (int, 512, "text context window"),
    "batch_size": (int, 64, "contrastive batch size"),
    "learning_rate": (float, 5e-4, "peak learning rate"),
    "max_epochs": (int, 20, "training epochs"),
    "warmup_steps": (int, 1000, "warmup steps (auto-shrunk desk-scale)"),
    "weight_decay": (float, 0.2, "decoupled weight decay"),
    "grad_clip_norm": (float, 1.0, "global gradient-norm clip"),
    "vocab_size": (int, 8192, "BPE vocabulary size"),
    "embed_dim": (int, 64, "text embedding width"),
    "num_layers": (int, 2, "transformer layers"),
    "num_heads": (int, 4, "attention heads"),
    "output_dim": (int, 32, "shared embedding dimension"),
    "hidden_dim": (int, 128, "image MLP width"),
    "dtype": (str, "float64", "float64 or float32"),
}

# desk-scale profile calibrated on the synthetic corpus: small batches give
# the association phase enough optimizer steps, float32 keeps it fast
ABLATE_KNOBS = dict(TRAIN_KNOBS)
ABLATE_KNOBS.update({
    "batch_size": (int, 32, "contrastive batch size"),
    "learning_rate": (float, 2e-3, "peak learning rate"),
    "weight_decay": (float, 0.0, "decoupled weight decay"),
    "vocab_size": (int, 1850, "BPE vocabulary size"),
    "embed_dim": (int, 48, "text embedding width"),
    "num_layers": (int, 1, "transformer layers"),
    "num_heads": (int, 2, "attention heads"),
    "dtype": (str, "float32", "float64 or float32"),
})

SCHEMAS = {
    "tokenize-stats": {
        "corpus": (str, "", "records corpus (jsonl) to analyze"),
        "captions": (str, "", "plain text file, one caption per line"),
        "cutoff": (int, 77, "content-token cutoff"),
        "vocab": (str, "", "existing vocabulary directory"),
        "vocab_size": (int, 8192, "vocabulary size when training fresh"),
        "seed": (int, 0, "seed"),
        "out": (str, "", "output directory"),
    },
    "make-synthetic": {
        "classes": (int, 10, "number of classes"),
        "per_class": (int, 200, "samples per class"),
        "image_dim": (int, 64, "image feature dimension"),
        "prefix_tokens": (int, 100, "guaranteed class-free prefix words"),
        "class_token_position": (int, 110, "0-based class-word position"),
        "noise_std": (float, 0.15, "within-class image offset scale"),
        "seed": (int, 0, "seed"),
        "out": (str, "", "output directory"),
    },
    "train": {
        "corpus": (str, "", "records corpus (jsonl)"),
        "seed": (int, 0, "seed"),
        "out": (str, "", "output directory"),
        **TRAIN_KNOBS,
    },
    "eval-retrieval": {
        "checkpoint": (str, "", "checkpoint file"),
        "vocab": (str, "", "vocabulary directory"),
        "corpus": (str, "", "records corpus (jsonl)"),
        "ks": (str, "1,5,10", "comma-separated recall Ks"),
        "benchmark": (str, "corpus", "benchmark name for the result rows"),
        "block_size": (int, 1024, "similarity block size"),
        "out": (str, "", "output directory"),
        "seed": (int, 0, "seed"),
    },
    "eval-zeroshot": {
        "checkpoint": (str, "", "checkpoint file"),
        "vocab": (str, "", "vocabulary directory"),
        "corpus": (str, "", "records corpus with image features"),
        "task": (str, "", "zero-shot task records (jsonl)"),
        "permute_seed": (int, -1, "option-permutation seed (-1: off)"),
        "out": (str, "", "output directory"),
        "seed": (int, 0, "seed"),
    },
    "longcap": {
        "records": (str, "", "caption records (jsonl)"),
        "backend": (str, "mock", "'mock' or an HTTP endpoint"),
        "workers": (int, 4, "max in-flight records"),
        "resume": (str, "", "journal file to resume from (default: out/journal.jsonl)"),
        "seed": (int, 0, "mock backend seed"),
        "out": (str, "", "output directory"),
    },
    "build-benchmark": {
        "articles": (str, "", "article records (jsonl)"),
        "min_date": (str, "", "skip articles older than this ISO date"),
        "seed": (int, 0, "figure sampling seed"),
        "out": (str, "", "output directory"),
    },
    "ablate": {
        "corpus": (str, "", "records corpus (jsonl)"),
        "contexts": (str, "77,154,512", "comma-separated context lengths"),
        "ks": (str, "1,5,10", "comma-separated recall Ks"),
        "seed": (int, 0, "seed"),
        "out": (str, "", "output directory"),
        **ABLATE_KNOBS,
    },
}
# the contexts list drives the ablation; a single context_length would clash
SCHEMAS["ablate"].pop("context_length")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longctx",
        description="Long-context contrastive image-text lab.")
    parser.add_argument("--version", action="version", version=f"longctx {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        sub = subs.add_parser(command)
        sub.add_argument("--config", default=None, help="flat key=value config file")
        for key, (typ, default, help_text) in schema.items():
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ,
                             default=None, help=f"{help_text} (default: {default})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < environment < flags; unknown keys rejected."""
    schema = SCHEMAS[command]
    merged = {key: default for key, (_, default, _) in schema.items()}
    if args.config:
        for key, raw in parse_config_file(args.config).items():
            if key not in schema:
                raise UsageError(f"unknown config key {key!r} for {command}")
            merged[key] = schema[key][0](raw)
    for key in schema:
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            merged[key] = schema[key][0](raw)
    for key in schema:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    return merged


def prepare_out_dir(command: str, cfg: dict) -> Path:
    out = cfg.get("out")
    if not out:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = f"runs/{command}-{stamp}-seed{cfg.get('seed', 0)}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"version={__version__}", f"command={command}"]
    lines += [f"{k}={v}" for k, v in sorted(cfg.items()) if k != "out"]
    (path / "config.txt").write_text("\n".join(lines) + "\n")
    return path


def _require_input(cfg, key, flag=None):
    if not cfg.get(key):
        raise UsageError(f"missing required input: --{(flag or key).replace('_', '-')}")
    return cfg[key]


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"bad {what} list {text!r}") from exc
    if not values:
        raise UsageError(f"empty {what} list")
    return values


def _train_config(cfg: dict, context_length: int, seed: int) -> TrainConfig:
    return TrainConfig(
        context_length=context_length,
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        warmup_steps=cfg["warmup_steps"],
        max_epochs=cfg["max_epochs"],
        grad_clip_norm=cfg["grad_clip_norm"],
        seed=seed,
        weight_decay=cfg["weight_decay"],
        vocab_size=cfg["vocab_size"],
        dtype=cfg["dtype"],
    )


def _encoder_configs(cfg: dict, context_length: int, vocab_size: int, image_dim: int):
    text_cfg = TextEncoderConfig(
        context_length=context_length, vocab_size=vocab_size,
        embed_dim=cfg["embed_dim"], num_layers=cfg["num_layers"],
        num_heads=cfg["num_heads"], output_dim=cfg["output_dim"])
    img_cfg = ImageEncoderConfig(
        input_dim=image_dim, hidden_dim=cfg["hidden_dim"],
        num_layers=2, output_dim=cfg["output_dim"])
    return text_cfg, img_cfg


# -- commands -----------------------------------------------------------------------


def cmd_tokenize_stats(cfg: dict) -> int:
    if cfg["corpus"]:
        captions = load_corpus(cfg["corpus"]).captions()
    elif cfg["captions"]:
        captions = [ln for ln in Path(cfg["captions"]).read_text().splitlines() if ln]
    else:
        raise UsageError("missing required input: --corpus or --captions")
    out = prepare_out_dir("tokenize-stats", cfg)
    if cfg["vocab"]:
        vocab = load_vocab(cfg["vocab"])
    else:
        vocab = train_bpe(captions, cfg["vocab_size"], cfg["seed"])
        save_vocab(vocab, out / "vocab")
    report = corpus_token_stats(vocab, captions, cfg["cutoff"])
    (out / "report.txt").write_text(format_waste_report(report))
    (out / "summary.csv").write_text(
        WASTE_CSV_HEADER + "\n" + waste_report_csv_row(report) + "\n")
    print(f"cutoff={report.cutoff} waste_fraction={report.waste_fraction:.4f} "
          f"({report.wasted_tokens}/{report.total_tokens} tokens) -> {out}")
    return 0


def cmd_make_synthetic(cfg: dict) -> int:
    spec = SyntheticSpec(
        num_classes=cfg["classes"], samples_per_class=cfg["per_class"],
        image_dim=cfg["image_dim"], distractor_prefix_tokens=cfg["prefix_tokens"],
        class_token_position=cfg["class_token_position"],
        noise_std=cfg["noise_std"], seed=cfg["seed"])
    corpus, labels = generate_synthetic(spec)
    out = prepare_out_dir("make-synthetic", cfg)
    save_corpus(corpus, out / "corpus.jsonl", format="records")
    lines = ["id,class_word"]
    lines += [f"{rec.id},{label}" for rec, label in zip(corpus.records, labels)]
    (out / "labels.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(corpus)} records ({spec.num_classes} classes) -> {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    corpus = load_corpus(_require_input(cfg, "corpus"))
    out = prepare_out_dir("train", cfg)
    train_cfg = _train_config(cfg, cfg["context_length"], cfg["seed"])
    vocab = train_bpe(corpus.captions(), cfg["vocab_size"], cfg["seed"])
    text_cfg, img_cfg = _encoder_configs(cfg, cfg["context_length"],
                                         vocab.size, corpus.image_dim)
    result = train(train_cfg, corpus, text_cfg=text_cfg, img_cfg=img_cfg, vocab=vocab)
    save_vocab(vocab, out / "vocab")
    save_checkpoint(out / "checkpoint.npz", text_cfg, img_cfg,
                    result.model.params, result.model.log_scale)
    write_loss_curve(result.curve, out / "losscurve.csv")
    final = result.curve[-1].loss if result.curve else float("nan")
    print(f"trained {len(result.curve)} steps, final loss {final:.4f} -> {out}")
    return 0


def _load_model(cfg: dict) -> TrainedModel:
    text_cfg, img_cfg, params, log_scale = load_checkpoint(
        _require_input(cfg, "checkpoint"))
    vocab = load_vocab(_require_input(cfg, "vocab"))
    return TrainedModel(text_cfg=text_cfg, img_cfg=img_cfg, params=params,
                        vocab=vocab, log_scale=log_scale)


def cmd_eval_retrieval(cfg: dict) -> int:
    model = _load_model(cfg)
    corpus = load_corpus(_require_input(cfg, "corpus"))
    ks = _parse_int_list(cfg["ks"], "K")
    out = prepare_out_dir("eval-retrieval", cfg)
    z_txt = model.encode_texts(corpus.captions())
    z_img = model.encode_images(corpus.images())
    t2i, i2t = recall_pair(z_img, z_txt, ks=ks, block_size=cfg["block_size"])
    rows = retrieval_csv_rows(cfg["benchmark"], [t2i, i2t])
    (out / "retrieval.csv").write_text(
        RETRIEVAL_CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    summary = format_retrieval_summary(cfg["benchmark"], [t2i, i2t])
    (out / "summary.txt").write_text(summary)
    print(summary.strip())
    print(f"-> {out}")
    return 0


def cmd_eval_zeroshot(cfg: dict) -> int:
    model = _load_model(cfg)
    corpus = load_corpus(_require_input(cfg, "corpus"))
    records = read_zero_shot_records(_require_input(cfg, "task"))
    missing = [ref for ref, _, _ in records if ref not in corpus]
    if missing:
        raise UsageError(f"task references unknown corpus ids: {missing[:3]}")
    images = np.stack([corpus[ref].image for ref, _, _ in records])
    task = ZeroShotTask(
        image_embeddings=model.encode_images(images),
        option_texts=tuple(opts for _, opts, _ in records),
        correct_index=tuple(ci for _, _, ci in records))
    if cfg["permute_seed"] >= 0:
        task = permute_options(task, cfg["permute_seed"])
    outcome = zero_shot_classify(task, model)
    out = prepare_out_dir("eval-zeroshot", cfg)
    lines = ["item,prediction,correct"]
    lines += [f"{i},{p},{c}" for i, (p, c) in
              enumerate(zip(outcome.predictions, task.correct_index))]
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    (out / "summary.txt").write_text(f"accuracy={outcome.accuracy:.6f}\n"
                                     f"items={len(records)}\n")
    print(f"zero-shot accuracy {outcome.accuracy:.4f} on {len(records)} items -> {out}")
    return 0


def cmd_longcap(cfg: dict) -> int:
    records = read_caption_records(_require_input(cfg, "records"))
    backend = make_backend(cfg["backend"], seed=cfg["seed"])
    out = prepare_out_dir("longcap", cfg)
    journal = Path(cfg["resume"]) if cfg["resume"] else out / "journal.jsonl"
    corpus = run_pipeline(records, backend, journal_path=journal,
                          max_workers=cfg["workers"])
    write_output_corpus(corpus, out / "longcap.jsonl")
    n_done = sum(r.status == "done" for r in corpus.results)
    (out / "summary.txt").write_text(
        f"records={len(corpus.results)}\ndone={n_done}\n"
        f"failure_rate={corpus.failure_rate:.4f}\n")
    print(f"longcap: {n_done}/{len(corpus.results)} done "
          f"(failure rate {corpus.failure_rate:.2%}) -> {out}")
    return 0


def cmd_build_benchmark(cfg: dict) -> int:
    articles = load_articles(_require_input(cfg, "articles"))
    build = build_long_caption_benchmark(articles, seed=cfg["seed"],
                                         min_date=cfg["min_date"])
    out = prepare_out_dir("build-benchmark", cfg)
    save_corpus(build.corpus, out / "benchmark.jsonl", format="records")
    write_benchmark_manifest(build, out / "manifest.csv")
    print(f"benchmark: {len(build.corpus)} pairs "
          f"({build.skipped_articles} articles skipped) -> {out}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    corpus = load_corpus(_require_input(cfg, "corpus"))
    contexts = _parse_int_list(cfg["contexts"], "context")
    ks = _parse_int_list(cfg["ks"], "K")
    out = prepare_out_dir("ablate", cfg)
    vocab = train_bpe(corpus.captions(), cfg["vocab_size"], cfg["seed"])
    table = [RETRIEVAL_CSV_HEADER.replace("benchmark", "context")]
    convergence = ["context,step,loss"]
    summaries = []
    for context in contexts:
        train_cfg = _train_config(cfg, context, cfg["seed"])
        text_cfg, img_cfg = _encoder_configs(cfg, context, vocab.size, corpus.image_dim)
        result = train(train_cfg, corpus, text_cfg=text_cfg, img_cfg=img_cfg,
                       vocab=vocab)
        z_txt = result.model.encode_texts(corpus.captions())
        z_img = result.model.encode_images(corpus.images())
        t2i, i2t = recall_pair(z_img, z_txt, ks=ks)
        table += retrieval_csv_rows(str(context), [t2i, i2t])
        convergence += [f"{context},{p.step},{p.loss!r}" for p in result.curve]
        summaries.append((context, t2i.recalls[min(ks)], i2t.recalls[min(ks)]))
    (out / "ablation.csv").write_text("\n".join(table) + "\n")
    (out / "convergence.csv").write_text("\n".join(convergence) + "\n")
    lines = ["context R@%d(t2i) R@%d(i2t)" % (min(ks), min(ks))]
    lines += [f"{c:7d} {a:9.4f} {b:9.4f}" for c, a, b in summaries]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"-> {out}")
    return 0


COMMANDS = {
    "tokenize-stats": cmd_tokenize_stats,
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-zeroshot": cmd_eval_zeroshot,
    "longcap": cmd_longcap,
    "build-benchmark": cmd_build_benchmark,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except LongCtxError as exc:
        print(f"longctx {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"longctx {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
