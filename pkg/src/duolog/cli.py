"""Single-executable pipeline: corpus tools, tokenizer, training, teacher
construction, evaluation, batch generation, and interactive chat.

Human-readable progress goes to stderr; machine-readable artifacts go to
files. Environment variables prefixed DUOLOG_ override training-config
defaults (e.g. DUOLOG_GAMMA=0.9); explicit flags override both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bpe import encode_dialog, read_vocab, train_bpe, write_vocab
from .corpus import (Dialog, Role, corpus_stats, ingest_tabular, read_corpus,
                     serialize_unified, write_corpus)
from .errors import ConfigError, DialogParseError, DuologError, IngestionError
from .generate import ChatSession, DecodeConfig, chat_step, generate_utterance
from .manifest import RunManifest, TOOL_VERSION
from .metrics import evaluate
from .model import ModelConfig, RoleAlternatingModel
from .seeding import derive_seed
from .synth import SyntheticGrammar, generate_synthetic
from .training import (TrainConfig, load_model, load_teacher, make_teacher,
                       teacher_config, train, write_loss_log)

ENV_PREFIX = "DUOLOG_"

_PRESETS = {"default": SyntheticGrammar.default_preset,
            "broad": SyntheticGrammar.broad_preset}
_ROLE_BY_LETTER = {"A": Role.USER, "B": Role.SYSTEM}


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _env(key: str):
    return os.environ.get(ENV_PREFIX + key.upper())


def _resolved(cli_value, key: str, cast, fallback):
    """Flag beats environment beats default."""
    if cli_value is not None:
        return cli_value
    raw = _env(key)
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad {ENV_PREFIX}{key.upper()}={raw!r}: {exc}") from exc


def _env_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _load_tokenized(vocab, dialogs):
    return [encode_dialog(vocab, d) for d in dialogs]


# ---------------------------------------------------------------------------
# corpus subcommands


def _cmd_corpus_synth(args) -> int:
    grammar = _PRESETS[args.preset]()
    dialogs = generate_synthetic(args.seed, args.n, grammar)
    count = write_corpus(args.out, dialogs)
    _progress(f"wrote {count} dialogs to {args.out}")
    return 0


def _parse_role_map(spec: str) -> dict[str, Role]:
    mapping = {}
    for pair in spec.split(","):
        label, _, letter = pair.partition("=")
        if letter not in _ROLE_BY_LETTER:
            raise IngestionError(
                f"role map entry {pair!r} must end in =A or =B")
        mapping[label] = _ROLE_BY_LETTER[letter]
    return mapping


def _cmd_corpus_ingest(args) -> int:
    role_map = _parse_role_map(args.role_map)
    records = []
    with open(args.infile, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise IngestionError(
                    f"{args.infile}:{line_no}: expected 4 tab-separated fields")
            dialog_id, turn_index, speaker, text = fields
            try:
                records.append((dialog_id, int(turn_index), speaker, text))
            except ValueError as exc:
                raise IngestionError(
                    f"{args.infile}:{line_no}: bad turn index: {exc}") from exc
    report = ingest_tabular(records, role_map)
    write_corpus(args.out, report.dialogs)
    _progress(f"ingested {len(report.dialogs)} dialogs "
              f"({report.dropped} dropped) to {args.out}")
    return 0


def _cmd_corpus_stats(args) -> int:
    stats = corpus_stats(read_corpus(args.infile))
    for key, value in stats.as_dict().items():
        rendered = f"{value:.4f}" if isinstance(value, float) else str(value)
        print(f"{key}  {rendered}")
    return 0


def _cmd_corpus_validate(args) -> int:
    try:
        dialogs = read_corpus(args.infile)
    except DialogParseError as exc:
        _progress(f"invalid corpus: {exc.args[0]} (byte offset {exc.offset})")
        return 1
    _progress(f"ok: {len(dialogs)} dialogs")
    return 0


# ---------------------------------------------------------------------------
# tokenizer


def _cmd_tokenizer_train(args) -> int:
    dialogs = read_corpus(args.infile)
    vocab = train_bpe(dialogs, args.vocab_size)
    write_vocab(args.out, vocab)
    _progress(f"trained vocab of {vocab.size} tokens "
              f"({len(vocab.merges)} merges) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# training


def _train_config_from_args(args) -> TrainConfig:
    spr = (False if args.no_spr
           else _resolved(None, "spr_enabled", _env_bool, True))
    teacher = (False if args.no_teacher
               else _resolved(None, "teacher_enabled", _env_bool, True))
    discount = (False if args.no_discount
                else _resolved(None, "discount_enabled", _env_bool, True))
    return TrainConfig(
        total_steps=_resolved(args.steps, "total_steps", int, 500),
        seed=_resolved(args.seed, "seed", int, 0),
        gamma=_resolved(args.gamma, "gamma", float, 0.95),
        alpha0=_resolved(args.alpha0, "alpha0", float, 0.1),
        lambda_=_resolved(args.lambda_, "lambda", float, 0.9999),
        learning_rate=_resolved(args.lr, "learning_rate", float, 1e-4),
        warmup_fraction=_resolved(args.warmup_fraction, "warmup_fraction",
                                  float, 0.10),
        batch_size=_resolved(args.batch_size, "batch_size", int, 8),
        spr_enabled=spr, teacher_enabled=teacher, discount_enabled=discount,
        kl_direction=_resolved(args.kl_direction, "kl_direction", str,
                               "student_to_teacher"),
        checkpoint_interval=_resolved(args.checkpoint_interval,
                                      "checkpoint_interval", int, 0))


def _model_config_from_args(args, vocab_size: int, seed: int) -> ModelConfig:
    overrides = {}
    if args.layers is not None:
        overrides["n_layers"] = args.layers
    if args.heads is not None:
        overrides["n_heads"] = args.heads
    if args.d_model is not None:
        overrides["d_model"] = args.d_model
    if args.d_ff is not None:
        overrides["d_ff"] = args.d_ff
    if args.max_positions is not None:
        overrides["max_positions"] = args.max_positions
    if args.dropout is not None:
        overrides["dropout_rate"] = args.dropout
    overrides["init_seed"] = derive_seed(seed, "model_init")
    return ModelConfig.desk(vocab_size, **overrides)


def _cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    vocab = read_vocab(args.vocab)
    dialogs = read_corpus(args.corpus)
    tokenized = _load_tokenized(vocab, dialogs)
    mcfg = _model_config_from_args(args, vocab.size, cfg.seed)
    model = RoleAlternatingModel.init(mcfg)

    teacher = None
    if cfg.teacher_enabled:
        if not args.teacher_ckpt:
            raise ConfigError("training with a teacher needs --teacher-ckpt "
                              "(or pass --no-teacher)")
        teacher = load_teacher(args.teacher_ckpt)
        if teacher.user.vocab_size != vocab.size:
            raise ConfigError(
                f"teacher vocab {teacher.user.vocab_size} does not match "
                f"tokenizer vocab {vocab.size}")

    out_dir = Path(args.out_dir)
    _progress(f"training for {cfg.total_steps} steps "
              f"(spr={cfg.spr_enabled} teacher={cfg.teacher_enabled} "
              f"discount={cfg.discount_enabled})")
    result = train(tokenized, model, teacher, cfg, out_dir=out_dir)
    if result.dropped_overlong:
        _progress(f"dropped {result.dropped_overlong} dialogs over "
                  f"{mcfg.max_positions} tokens")
    every = max(1, cfg.total_steps // 10)
    for record in result.log[::every]:
        _progress("  " + json.dumps(record, sort_keys=True))

    log_path = out_dir / "loss_log.jsonl"
    write_loss_log(log_path, result.log)
    ckpts = sorted(p.name for p in out_dir.glob("ckpt-*.bin"))
    manifest = RunManifest.build(
        train_config=cfg.as_dict(), model_config=mcfg.as_dict(),
        corpus_path=Path(args.corpus).resolve(),
        vocab_path=Path(args.vocab).resolve(),
        checkpoint_paths=ckpts, loss_log_path=log_path.name,
        teacher_path=Path(args.teacher_ckpt).resolve() if teacher else None)
    manifest.write(out_dir / "manifest.json")
    _progress(f"final checkpoint: {result.final_checkpoint}")
    return 0


def _cmd_make_teacher(args) -> int:
    vocab = read_vocab(args.vocab)
    dialogs = read_corpus(args.corpus)
    tokenized = _load_tokenized(vocab, dialogs)
    cfg = teacher_config(vocab.size,
                         max_positions=args.max_positions or 256)
    _progress(f"pretraining teacher pair for {args.steps} steps")
    make_teacher(tokenized, cfg, seed=args.seed, total_steps=args.steps,
                 out_path=args.out, batch_size=args.batch_size,
                 learning_rate=args.lr)
    _progress(f"teacher checkpoint: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluation and generation


def _decode_config_from_args(args) -> DecodeConfig:
    return DecodeConfig(strategy=args.strategy, top_p=args.top_p,
                        temperature=args.temperature,
                        max_new_tokens=args.max_new_tokens, seed=args.seed)


def _cmd_eval(args) -> int:
    vocab = read_vocab(args.vocab)
    model, _ = load_model(args.ckpt)
    dialogs = read_corpus(args.corpus)
    report = evaluate(model, dialogs, vocab, _decode_config_from_args(args))
    Path(args.out).write_text(
        json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    _progress(report.render_table())
    _progress(f"report written to {args.out}")
    if args.manifest:
        m = RunManifest.read(args.manifest)
        m.metrics = report.as_dict()
        m.write(args.manifest)
    return 0


def _cmd_generate(args) -> int:
    vocab = read_vocab(args.vocab)
    model, _ = load_model(args.ckpt)
    dialogs = read_corpus(args.corpus)
    decode = _decode_config_from_args(args)
    rng = (np.random.default_rng(derive_seed(decode.seed, "generate"))
           if decode.strategy != "greedy" else None)
    with open(args.out, "w", encoding="utf-8") as fh:
        for d in dialogs:
            for i, utt in enumerate(d.utterances):
                if utt.role is not Role.SYSTEM:
                    continue
                history = Dialog(d.utterances[:i], id=d.id) if i else None
                gen = generate_utterance(model, vocab, history, Role.SYSTEM,
                                         decode, rng)
                fh.write(json.dumps(
                    {"id": d.id, "u": i + 1, "generated": gen.text,
                     "reference": utt.text}, ensure_ascii=False,
                    sort_keys=True) + "\n")
    _progress(f"responses written to {args.out}")
    return 0


def _cmd_chat(args) -> int:
    vocab = read_vocab(args.vocab)
    model, _ = load_model(args.ckpt)
    human_role = _ROLE_BY_LETTER[args.human_role]
    session = ChatSession(model=model, vocab=vocab, human_role=human_role,
                          decode=_decode_config_from_args(args))
    _progress(f"you are {human_role.prefix} — enter text, EOF ends the chat")
    if session.next_role() is session.model_role:
        reply = session.model_turn()
        print(f"{reply.role.prefix} {reply.text}", flush=True)
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        try:
            reply = chat_step(session, text)
        except DuologError as exc:
            _progress(f"error: {exc}")
            continue
        print(f"{reply.role.prefix} {reply.text}", flush=True)
    if args.transcript and session.history is not None:
        Path(args.transcript).write_text(serialize_unified(session.history),
                                         encoding="utf-8")
        _progress(f"transcript written to {args.transcript}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_decode_flags(p: argparse.ArgumentParser, default_strategy: str) -> None:
    p.add_argument("--strategy", choices=("greedy", "top_p"),
                   default=default_strategy)
    p.add_argument("--top-p", dest="top_p", type=float, default=0.9)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int,
                   default=64)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duolog",
        description="role-alternating dialog LM pipeline")
    parser.add_argument("--version", action="version", version=TOOL_VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="corpus building and checks")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)

    p = corpus_sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--preset", choices=sorted(_PRESETS), default="default")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_corpus_synth)

    p = corpus_sub.add_parser("ingest", help="ingest tab-separated turns")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--role-map", dest="role_map", required=True,
                   help="comma-separated speaker=A|B pairs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_corpus_ingest)

    p = corpus_sub.add_parser("stats", help="print corpus statistics")
    p.add_argument("--in", dest="infile", required=True)
    p.set_defaults(func=_cmd_corpus_stats)

    p = corpus_sub.add_parser("validate", help="check a corpus file")
    p.add_argument("--in", dest="infile", required=True)
    p.set_defaults(func=_cmd_corpus_validate)

    tokenizer = sub.add_parser("tokenizer", help="tokenizer training")
    tok_sub = tokenizer.add_subparsers(dest="tokenizer_command", required=True)
    p = tok_sub.add_parser("train", help="train a BPE vocab on a corpus")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tokenizer_train)

    p = sub.add_parser("train", help="train the role-alternating pair")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float)
    p.add_argument("--kl-direction", dest="kl_direction",
                   choices=("student_to_teacher", "teacher_to_student"))
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--no-spr", dest="no_spr", action="store_true")
    p.add_argument("--no-teacher", dest="no_teacher", action="store_true")
    p.add_argument("--no-discount", dest="no_discount", action="store_true")
    p.add_argument("--teacher-ckpt", dest="teacher_ckpt")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--max-positions", dest="max_positions", type=int)
    p.add_argument("--dropout", type=float)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("make-teacher", help="pretrain the frozen teacher pair")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--max-positions", dest="max_positions", type=int)
    p.set_defaults(func=_cmd_make_teacher)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="existing manifest to receive the metrics")
    _add_decode_flags(p, "greedy")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("generate", help="regenerate system responses")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    _add_decode_flags(p, "top_p")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("chat", help="interactive chat on stdin/stdout")
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--human-role", dest="human_role", choices=("A", "B"),
                   required=True)
    p.add_argument("--transcript")
    _add_decode_flags(p, "top_p")
    p.set_defaults(func=_cmd_chat)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DuologError as exc:
        _progress(f"error: {exc}")
        return 1
    except OSError as exc:
        _progress(f"file error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
