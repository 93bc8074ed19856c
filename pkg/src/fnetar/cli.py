"""Command-line entry point: ``fnetar <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/integrity error, 3 numerical abort.
Results go to stdout; the resolved configuration and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .data import SegmentStream, Vocab, build_vocab
from .errors import CheckpointError, ConfigError, DataError, DomainError, NumericalError
from .mixing import build_fnet_matrix, build_fnetar_matrix, causal_leaks
from .model import ModelConfig, generate, init_model
from .training import (
    TrainConfig,
    Trainer,
    evaluate_perplexity,
    format_record,
    load_checkpoint,
)

log = logging.getLogger("fnetar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
VALID_FRACTION = 0.1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fnetar", description="FNetAR language-model toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("build-vocab", help="count tokens and write a vocab file")
    v.add_argument("--corpus", required=True)
    v.add_argument("--mode", choices=["char", "word"], default="char")
    v.add_argument("--max-size", type=int, default=None)
    v.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--vocab", required=True)
    t.add_argument("--pattern", default="AFAF")
    t.add_argument("--d-model", type=int, default=128)
    t.add_argument("--n-heads", type=int, default=4)
    t.add_argument("--d-ff", type=int, default=512)
    t.add_argument("--l-seq", type=int, default=64)
    t.add_argument("--l-mem", type=int, default=64)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--warmup", type=int, default=100)
    t.add_argument("--clip", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-interval", type=int, default=100)
    t.add_argument("--resume", default=None, help="continue from a checkpoint written by train")
    t.add_argument("--out", required=True)
    t.add_argument("--no-timing", action="store_true")

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--batch", type=int, default=1)

    m = sub.add_parser("inspect-mixing", help="print a mixing matrix as CSV")
    m.add_argument("--kind", choices=["fnet", "fnetar"], required=True)
    m.add_argument("--l-seq", type=int, required=True)
    m.add_argument("--l-mem", type=int, default=0)
    m.add_argument("--self-exclusive", action="store_true")

    b = sub.add_parser("bench", help="FLOP estimates and timings for one mixing sublayer")
    b.add_argument("--l-seq", type=int, default=512)
    b.add_argument("--l-mem", type=int, default=512)
    b.add_argument("--d-model", type=int, default=128)
    b.add_argument("--n-heads", type=int, default=4)
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-timing", action="store_true")

    g = sub.add_parser("generate", help="sample a continuation from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt", required=True)
    g.add_argument("--tokens", type=int, default=100)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    return p


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc


def _load(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def format_csv(matrix: np.ndarray) -> str:
    return "".join(",".join(f"{v + 0.0:.12g}" for v in row) + "\n" for row in matrix)


def cmd_build_vocab(args) -> int:
    vocab = build_vocab(_read_text(args.corpus), args.mode, args.max_size)
    vocab.save(args.out)
    print(f"vocab_size={len(vocab)}")
    return EXIT_OK


def cmd_train(args) -> int:
    vocab = Vocab.load(args.vocab)
    ids = vocab.encode(_read_text(args.corpus))
    cut = int(len(ids) * (1.0 - VALID_FRACTION))
    train_ids, valid_ids = ids[:cut], ids[cut:]
    emit = lambda rec: print(format_record(rec, timing=not args.no_timing), flush=True)
    if args.resume:
        ck = _load(args.resume)
        trainer = Trainer.resume(ck, train_ids, valid_ids, args.out, on_record=emit)
    else:
        config = ModelConfig(vocab_size=len(vocab), d_model=args.d_model, n_heads=args.n_heads,
                             d_ff=args.d_ff, n_layers=len(args.pattern), layer_pattern=args.pattern,
                             l_seq=args.l_seq, l_mem=args.l_mem, seed=args.seed)
        tcfg = TrainConfig(steps=args.steps, batch_size=args.batch, peak_lr=args.lr,
                           warmup_steps=args.warmup, clip_norm=args.clip,
                           eval_interval=args.eval_interval, seed=args.seed)
        trainer = Trainer(init_model(config), train_ids, valid_ids, tcfg, args.out, vocab, emit)
    trainer.run()
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load(args.checkpoint)
    if ck.vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    ids = ck.vocab.encode(_read_text(args.corpus))
    stream = SegmentStream(ids, args.batch, ck.config.l_seq)
    if len(stream) == 0:
        raise DataError("corpus is shorter than one segment")
    print(f"ppl={evaluate_perplexity(ck.build_model(), stream):.6f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.l_seq < 1 or args.l_mem < 0:
        raise UsageError("--l-seq must be >= 1 and --l-mem >= 0")
    if args.kind == "fnet":
        if args.l_mem:
            raise UsageError("fnet matrices are square; --l-mem must be 0")
        op = build_fnet_matrix(args.l_seq)
    else:
        op = build_fnetar_matrix(args.l_seq, args.l_mem, args.self_exclusive)
    sys.stdout.write(format_csv(op.matrix))
    if op.kind == "fnetar":
        leaks = causal_leaks(op)
        if leaks:
            print(f"error: matrix has nonzero entries above the causal boundary: {leaks[:5]}",
                  file=sys.stderr)
            return EXIT_DATA
    return EXIT_OK


def cmd_bench(args) -> int:
    if min(args.l_seq, args.d_model, args.iters) < 1 or args.l_mem < 0:
        raise UsageError("--l-seq, --d-model and --iters must be >= 1, --l-mem >= 0")
    rows = bench.run_bench(args.l_seq, args.l_mem, args.d_model, args.iters, args.n_heads,
                           args.seed, timing=not args.no_timing)
    print(bench.format_table(rows, timing=not args.no_timing))
    return EXIT_OK


def cmd_generate(args) -> int:
    ck = _load(args.checkpoint)
    if ck.vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    prompt = ck.vocab.encode(args.prompt)
    out = generate(ck.build_model(), prompt, args.tokens, args.temperature, args.seed)
    print(ck.vocab.decode(out))
    return EXIT_OK


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-mixing": cmd_inspect,
    "bench": cmd_bench,
    "generate": cmd_generate,
}


def _setup_logging() -> None:
    level = os.environ.get("FNETAR_LOG", "error").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        resolved = {k: v for k, v in vars(args).items()}
        print(f"config: {json.dumps(resolved, sort_keys=True)}", file=sys.stderr)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, DomainError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
