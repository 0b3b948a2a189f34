"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, ExperimentConfig
from .data import (DataError, SnapshotSpec, gen_markov, load_pairs, load_sessions,
                   snapshots, split_train_test, write_sessions)
from .evaluation import evaluate
from .model import init_model
from .probe import block_similarity
from .stacking import StackPlan, apply_plan, verify_stack
from .training import run_cl, run_plain, run_tf, run_ts

log = logging.getLogger("progstack")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- commands -------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    if args.items < 10:
        raise UsageError(f"--items must be at least 10, got {args.items}")
    ds = gen_markov(args.items, args.sessions, args.max_len, concentration=args.concentration,
                    seed=args.seed, dirichlet=None if args.uniform else 1.0)
    write_sessions(ds, args.out)
    log.info("wrote %d sessions to %s", len(ds), args.out)
    return 0


def _session_data(cfg: ExperimentConfig):
    train_path = cfg.get("data", "train")
    if not train_path:
        raise ConfigError("data.train is required")
    t = int(cfg.get("model", "max_len"))
    overlap = int(cfg.get("data", "overlap"))
    vocab = cfg.vocab_size()
    train = load_sessions(train_path, t, overlap)
    test_path = cfg.get("data", "test")
    if test_path:
        test = load_sessions(test_path, t, overlap)
    else:
        train, test = split_train_test(train, float(cfg.get("data", "split_ratio")),
                                       int(cfg.get("data", "split_seed")))
    observed = max(train.vocab_size, test.vocab_size)
    if vocab is None:
        vocab = observed
    elif observed > vocab:
        raise DataError(f"data contains item {observed} beyond model.vocab_size={vocab}")
    train.vocab_size = test.vocab_size = vocab
    cfg.set("model", "vocab_size", vocab)
    return train, test


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    schedule = cfg.schedule()
    tcfg = cfg.train_config()
    out = Path(args.out)
    logs: dict[int, list[str]] = {}

    def on_record(stage, rec):
        logs.setdefault(stage, []).append(rec.format())
        log.info("stage=%d %s", stage, rec.format())

    init = checkpoint.load(args.resume) if args.resume else None

    if schedule.kind == "tf":
        if init is None:
            raise ConfigError("schedule.kind=tf needs --resume with the source checkpoint")
        t = init.config.max_len
        train = load_pairs(cfg.get("data", "train"), t, init.config.vocab_size, cfg.target_vocab())
        test_path = cfg.get("data", "test")
        if not test_path:
            raise ConfigError("data.test is required for schedule.kind=tf")
        test = load_pairs(test_path, t, init.config.vocab_size, cfg.target_vocab())
        vocab = cfg.target_vocab() or max(train.target_vocab, test.target_vocab)
        train.target_vocab = test.target_vocab = vocab
        cfg.set("data", "target_vocab", vocab)
        cfg.set("model", "vocab_size", init.config.vocab_size)
        _log_config(cfg, out)
        res = run_tf(init, train, test, vocab, tcfg, budget=cfg.budget(),
                     on_record=lambda rec: on_record(0, rec))
        final = res.params
    else:
        train, test = _session_data(cfg)
        cfg.set("schedule", "initial_blocks", schedule.initial_blocks)
        _log_config(cfg, out)
        model_cfg = cfg.model_config(train.vocab_size)
        if init is not None and init.config.vocab_size != model_cfg.vocab_size:
            raise DataError(f"checkpoint vocab {init.config.vocab_size} != data vocab "
                            f"{model_cfg.vocab_size}")
        if schedule.kind == "plain":
            params = init if init is not None else init_model(model_cfg, tcfg.seed)
            res = run_plain(params, train, test, tcfg, budget=cfg.budget(), on_record=on_record)
        elif schedule.kind == "cl":
            spec = SnapshotSpec(cfg.fractions(), int(cfg.get("data", "snapshot_seed")))
            if len(spec.fractions) != schedule.stack_times + 1:
                raise ConfigError("data.fractions needs schedule.stack_times + 1 entries")
            res = run_cl(schedule, snapshots(train, spec), test, model_cfg, tcfg,
                         init=init, on_record=on_record)
        else:
            if not schedule.budgets:
                raise ConfigError("schedule.budgets is required for schedule.kind=ts")
            res = run_ts(schedule, train, test, model_cfg, tcfg, init=init, on_record=on_record)
        final = res.params

    checkpoint.save(final, out)
    for stage, lines in logs.items():
        Path(f"{out}.stage{stage}.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %s (%d blocks)", out, len(final.blocks))
    return 0


def _log_config(cfg: ExperimentConfig, out: Path) -> None:
    text = cfg.to_text()
    Path(f"{out}.config").write_text(text, encoding="utf-8")
    log.info("resolved config:\n%s", text)


def cmd_stack(args) -> int:
    src = checkpoint.load(args.inp)
    try:
        plan = StackPlan(args.mode, args.blocks, args.redilate)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if plan.mode in ("adjacent", "cross") and plan.added_blocks > len(src.blocks):
        raise UsageError(f"--blocks {args.blocks} exceeds the checkpoint's {len(src.blocks)} blocks")
    dst = apply_plan(src, plan, seed=args.seed)
    report = verify_stack(src, dst, plan)
    print(report.format())
    checkpoint.save(dst, args.out)
    return 0 if report.ok else EXIT_RUNTIME


def _eval_data(path, params, pairs: bool):
    cfg = params.config
    if pairs:
        return load_pairs(path, cfg.max_len, cfg.vocab_size, cfg.num_outputs - 1)
    ds = load_sessions(path, cfg.max_len)
    if ds.vocab_size > cfg.vocab_size or ds.vocab_size > cfg.num_outputs - 1:
        raise DataError(f"data item id {ds.vocab_size} exceeds checkpoint vocab {cfg.vocab_size}")
    ds.vocab_size = cfg.vocab_size
    return ds


def cmd_eval(args) -> int:
    params = checkpoint.load(args.ckpt)
    data = _eval_data(args.data, params, args.pairs)
    print(evaluate(params, data, args.n).format())
    return 0


def cmd_probe(args) -> int:
    params = checkpoint.load(args.ckpt)
    if len(params.blocks) < 2:
        raise DataError(f"probe needs at least 2 blocks, checkpoint has {len(params.blocks)}")
    data = _eval_data(args.data, params, pairs=False)
    sim = block_similarity(params, data, args.sequences, args.seed)
    sys.stdout.write(sim.format())
    return 0


# --- wiring ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="progstack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic Markov session file")
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--max-len", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concentration", type=int, default=3,
                   help="successors per item (default 3)")
    p.add_argument("--uniform", action="store_true",
                   help="equal successor weights instead of Dirichlet draws")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="run a plain/cl/ts/tf schedule from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="start from this checkpoint (source model for tf)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stack", help="grow a checkpoint's depth")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--mode", required=True,
                   choices=["adjacent", "cross", "random-top", "embed-only"])
    p.add_argument("--blocks", type=int, required=True, help="number of blocks to add")
    p.add_argument("--seed", type=int, default=0, help="init seed for fresh blocks")
    p.add_argument("--redilate", action="store_true",
                   help="reassign dilations to the canonical cycle after copying")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("eval", help="last-item ranking metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--pairs", action="store_true", help="data is a transfer pairs file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="block-output cosine similarity matrix")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sequences", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, FloatingPointError, OSError,
            ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
