"""Command-line entry point.

Exit codes: 0 success, 2 config/input error, 3 numeric divergence, 4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import toy
from .checkpoint import CheckpointError, header_vocab, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, parse_override
from .data import Vocabulary, build_vocab, load_task, prepare_sequences, read_corpus
from .distill import build_layer_map
from .eval import HeadSpec, TaskModel, evaluate
from .model import PRESETS, ConfigError, Encoder, InputError, RecursiveStudent, TeacherModel, count_parameters, parameter_breakdown
from .numerics import no_grad
from .rng import derive_rng
from .train import ADAPTER_TUNING, DivergenceError, adapter_tune, distill_student, finetune, pretrain_teacher

logger = logging.getLogger("recdistill")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CORRUPT = 0, 2, 3, 4


def _require_file(path: str | None, field: str) -> Path:
    if not path:
        raise ConfigError(f"{field}: required for this command")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{field}: file not found: {path}")
    return p


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_encoder(path: str, field: str) -> tuple[Encoder, Vocabulary, dict]:
    model, header = load_checkpoint(_require_file(path, field))
    vocab = header_vocab(header)
    if vocab is None:
        raise CheckpointError(f"{path}: checkpoint carries no vocabulary")
    encoder = model.encoder if isinstance(model, TaskModel) else model
    return encoder, vocab, header


def _sequences(cfg: RunConfig, vocab: Vocabulary, max_positions: int) -> list[list[int]]:
    d = cfg.data
    if d.window + 2 > max_positions:
        raise ConfigError(f"data.window: {d.window} + 2 special tokens exceeds max_positions {max_positions}")
    docs = read_corpus(_require_file(d.corpus, "data.corpus"))
    if not docs:
        raise ConfigError(f"data.corpus: {d.corpus} contains no documents")
    return prepare_sequences(docs, vocab, d.window, d.stride, d.max_per_doc)


def cmd_pretrain_teacher(cfg: RunConfig, args) -> int:
    docs = read_corpus(_require_file(cfg.data.corpus, "data.corpus"))
    if not docs:
        raise ConfigError(f"data.corpus: {cfg.data.corpus} contains no documents")
    vocab = build_vocab(docs, cfg.data.vocab_size, cfg.data.tokenizer)
    config = cfg.teacher.to_config(len(vocab))
    seqs = _sequences(cfg, vocab, config.max_positions)
    out = _output_dir(cfg)
    vocab.save(out / "vocab.txt")
    meta = {"regime": "pretrain-teacher", "seed": cfg.seed}
    try:
        teacher, rows = pretrain_teacher(seqs, vocab, config, cfg.settings(), out / "metrics.csv")
    except DivergenceError as exc:
        save_checkpoint(out / "teacher.ckpt", exc.model, vocab, {**meta, "diverged_at": exc.step})
        raise
    save_checkpoint(out / "teacher.ckpt", teacher, vocab, meta)
    print(f"teacher checkpoint: {out / 'teacher.ckpt'} (final mlm={rows[-1]['mlm']:.4f})")
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args) -> int:
    weights_section = cfg.weights
    updates = {}
    if args.alignment:
        updates["alignment"] = args.alignment
    if args.embed_loss:
        updates["embed_loss"] = True
    if updates:
        weights_section = weights_section.model_copy(update=updates)
    weights = weights_section.to_weights()
    teacher, vocab, _ = _load_encoder(cfg.teacher_checkpoint, "teacher_checkpoint")
    student_config = cfg.student.to_config(len(vocab))
    layer_map = build_layer_map(student_config.num_layers, teacher.num_iterations, cfg.layer_map)
    seqs = _sequences(cfg, vocab, min(student_config.max_positions, teacher.config.max_positions))
    out = _output_dir(cfg)
    meta = {"regime": "distill", "seed": cfg.seed, "layer_map": list(layer_map.mapping), "alignment": weights.alignment_mode}
    try:
        student, rows = distill_student(
            teacher, seqs, vocab, student_config, weights, layer_map, cfg.settings(), out / "metrics.csv",
            init_embeddings_from_teacher=cfg.init_embeddings_from_teacher,
        )
    except DivergenceError as exc:
        save_checkpoint(out / "student.ckpt", exc.model, vocab, {**meta, "diverged_at": exc.step})
        raise
    save_checkpoint(out / "student.ckpt", student, vocab, meta)
    last = rows[-1]
    print(f"student checkpoint: {out / 'student.ckpt'} (final total={last['total']:.4f} align={last['align']:.4f} out={last['out']:.4f})")
    return EXIT_OK


def _task_data(cfg: RunConfig, vocab: Vocabulary):
    d = cfg.data
    train = load_task(_require_file(d.task, "data.task"), d.task_kind, vocab, d.max_len)
    dev = None
    if d.eval:
        dev = load_task(_require_file(d.eval, "data.eval"), d.task_kind, vocab, d.max_len, train.label_names)
    spec = HeadSpec(d.task_kind, train.num_labels, cfg.head_dropout, tuple(train.label_names))
    return train, dev, spec


def _write_report(out: Path, report) -> None:
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.txt").write_text(report.pretty() + "\n", encoding="utf-8")
    print(report.pretty())


def cmd_finetune(cfg: RunConfig, args) -> int:
    encoder, vocab, _ = _load_encoder(cfg.checkpoint, "checkpoint")
    train, dev, spec = _task_data(cfg, vocab)
    out = _output_dir(cfg)
    model, _ = finetune(encoder, train, spec, cfg.settings(), dev, out / "metrics.csv")
    save_checkpoint(out / "task.ckpt", model, vocab, {"regime": "finetune", "seed": cfg.seed})
    _write_report(out, evaluate(model, dev or train))
    return EXIT_OK


def cmd_adapter_tune(cfg: RunConfig, args) -> int:
    encoder, vocab, _ = _load_encoder(cfg.checkpoint, "checkpoint")
    train, dev, spec = _task_data(cfg, vocab)
    out = _output_dir(cfg)
    inject = args.inject_adapters or cfg.inject_adapters
    model, _, info = adapter_tune(
        encoder, train, spec, cfg.settings(), dev, out / "metrics.csv", inject_adapters=inject, bottleneck=cfg.adapter_bottleneck
    )
    print(f"tunable parameters: {info.tunable:,} (adapters + head); backbone checksum unchanged: {info.backbone_unchanged}")
    save_checkpoint(out / "task.ckpt", model, vocab, {"regime": "adapter-tune", "seed": cfg.seed, "injected": inject})
    _write_report(out, evaluate(model, dev or train))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    model, header = load_checkpoint(_require_file(cfg.checkpoint, "checkpoint"))
    if not isinstance(model, TaskModel):
        raise ConfigError("checkpoint: eval needs a fine-tuned task checkpoint")
    if header.get("meta", {}).get("regime") == "adapter-tune":
        ADAPTER_TUNING.apply(model)
    vocab = header_vocab(header)
    if vocab is None:
        raise CheckpointError("checkpoint carries no vocabulary")
    path = cfg.data.eval or cfg.data.task
    dataset = load_task(_require_file(path, "data.eval"), cfg.data.task_kind, vocab, cfg.data.max_len, list(model.head.spec.label_names) or None)
    _write_report(_output_dir(cfg), evaluate(model, dataset))
    return EXIT_OK


def _print_params(model, title: str) -> None:
    print(title)
    for group, (total, tunable) in parameter_breakdown(model).items():
        print(f"  {group:<14} total={total:>12,}  tunable={tunable:>12,}")
    print(f"  {'encoder':<14} total={count_parameters(model):>12,}  tunable={count_parameters(model, tunable_only=True):>12,}  (excludes MLM head)")
    print(f"  {'all':<14} total={count_parameters(model, include_mlm_head=True):>12,}")


def _dump_attention(encoder: Encoder, vocab: Vocabulary, sentence: str, out: Path, label: str, prefix: str) -> None:
    ids = [vocab.cls_id] + vocab.encode(sentence)[: encoder.config.max_positions - 2] + [vocab.sep_id]
    with no_grad():
        trace = encoder.forward(np.asarray([ids]), with_logits=False)
    target = out / label
    target.mkdir(parents=True, exist_ok=True)
    (target / "tokens.txt").write_text("\n".join(vocab.decode(ids)) + "\n", encoding="utf-8")
    for i, amap in enumerate(trace.attention_maps):
        for h in range(amap.shape[1]):
            np.savetxt(target / f"{prefix}{i}_head{h}.csv", amap.data[0, h], delimiter=",", fmt="%.17g")
    print(f"{label}: {len(trace.attention_maps)} x {encoder.config.num_heads} attention maps ({len(ids)}x{len(ids)}) -> {target}")


def cmd_inspect(args) -> int:
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"--preset must be one of {sorted(PRESETS)}")
        config = PRESETS[args.preset]
        model = RecursiveStudent(config, derive_rng(0, "inspect")) if args.preset != "bert-base" else TeacherModel(config, derive_rng(0, "inspect"))
        _print_params(model, f"preset {args.preset}:")
        return EXIT_OK
    if not args.checkpoint:
        raise ConfigError("inspect needs a checkpoint or --preset")
    model, header = load_checkpoint(args.checkpoint)
    if args.params or not args.attn:
        _print_params(model, f"{args.checkpoint} ({header['kind']}):")
    if args.attn:
        vocab = header_vocab(header)
        if vocab is None:
            raise CheckpointError("checkpoint carries no vocabulary")
        out = Path(args.out)
        encoder = model.encoder if isinstance(model, TaskModel) else model
        prefix = "iter" if encoder.kind == "student" else "layer"
        _dump_attention(encoder, vocab, args.attn, out, encoder.kind, prefix)
        if args.compare:
            other, other_header = load_checkpoint(args.compare)
            other = other.encoder if isinstance(other, TaskModel) else other
            label = other.kind if other.kind != encoder.kind else other.kind + "_compare"
            _dump_attention(other, vocab, args.attn, out, label, "iter" if other.kind == "student" else "layer")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    toy.write_corpus(out / "corpus.txt", toy.toy_corpus(args.docs, args.seed))
    cls = toy.toy_classification(480, args.seed)
    toy.write_classification(out / "cls_train.tsv", cls[:320])
    toy.write_classification(out / "cls_dev.tsv", cls[320:])
    tags = toy.toy_tagging(360, args.seed)
    toy.write_conll(out / "ner_train.conll", tags[:240])
    toy.write_conll(out / "ner_dev.conll", tags[240:])
    print(f"toy corpus and tasks written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recdistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-step loss lines")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path, JSON value)")
        return p

    with_config("pretrain-teacher", "MLM pre-training of the fully parameterised teacher")
    p = with_config("distill", "distil a recursive student from a teacher checkpoint")
    p.add_argument("--alignment", choices=["full", "hidden", "attention", "none"])
    p.add_argument("--embed-loss", action="store_true", help="add the embedding alignment term")
    with_config("finetune", "full fine-tuning on a task dataset")
    p = with_config("adapter-tune", "tune only adapters + task head")
    p.add_argument("--inject-adapters", action="store_true", help="add randomly initialised adapters if the model has none")
    with_config("eval", "evaluate a task checkpoint")

    p = sub.add_parser("inspect", help="parameter budgets and attention-map dumps")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--params", action="store_true")
    p.add_argument("--attn", metavar="SENTENCE")
    p.add_argument("--compare", metavar="CHECKPOINT", help="second model to dump alongside (e.g. the teacher)")
    p.add_argument("--out", default="attention_maps")
    p.add_argument("--preset", help=f"count parameters of a named architecture: {', '.join(PRESETS)}")

    p = sub.add_parser("make-toy", help="write the synthetic corpus and task files")
    p.add_argument("out")
    p.add_argument("--docs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    return parser


_HANDLERS = {
    "pretrain-teacher": cmd_pretrain_teacher,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "adapter-tune": cmd_adapter_tune,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            return cmd_inspect(args)
        if args.command == "make-toy":
            return cmd_make_toy(args)
        overrides = dict(parse_override(item) for item in args.set)
        cfg = load_run_config(args.config, overrides)
        return _HANDLERS[args.command](cfg, args)
    except CheckpointError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except DivergenceError as exc:
        print(f"divergence: {exc}; last good parameters saved", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
