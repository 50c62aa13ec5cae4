"""Command-line entry point: one subcommand per pipeline step.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import templates
from .data import (
    CandidatePool,
    atomic_open,
    dumps,
    example_based_labeling,
    mine_hard_negatives,
    process_asymmetric,
    process_symmetric,
    read_labeled,
    read_samples,
    read_scored_pairs,
    validate_samples,
    write_jsonl,
    write_samples,
)
from .encoder import Encoder, load_checkpoint
from .errors import ConfigError, EmbforgeError
from .evaluation import DEFAULT_KS, RetrievalTask, evaluate, margin_report, matryoshka_sweep
from .numerics import SeededRng
from .training import (
    DESK_DEFAULTS,
    PAPER_DEFAULTS,
    StageConfig,
    TeacherCache,
    build_teacher_cache,
    read_teacher_embeddings,
    run_stage,
)

logger = logging.getLogger("embforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _window(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"window must be LO,HI, got {text!r}")
    return vals[0], vals[1]


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="embforge", description="Instruction-tuned text embedding pipeline.")
    ap.add_argument("--paper-defaults", action="store_true",
                    help="print the reference hyperparameters next to the desk-scale defaults and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="JSON configuration file")
        p.add_argument("--seed", type=int)
        return p

    p = command("curate", "turn scored pairs or labeled texts into training JSONL")
    p.add_argument("--pairs", type=Path, help="scored-pair JSONL (symmetric tasks)")
    p.add_argument("--labeled", type=Path, help="labeled-text JSONL (classification tasks)")
    p.add_argument("--mode", choices=("asymmetric", "examples"), default="asymmetric",
                   help="label handling for --labeled")
    p.add_argument("--m", type=int)
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--instruction", help="override the task instruction")
    p.add_argument("--out", type=Path, required=True)

    p = command("mine", "attach rank-window hard negatives to training samples")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pool", type=Path, required=True, help="candidate passages, one per line")
    p.add_argument("--window", type=_window, help="1-indexed rank window LO,HI (default 50,100)")
    p.add_argument("--m", type=int, help="negatives per sample (default 7)")
    p.add_argument("--out", type=Path, required=True)

    for stage in ("pretrain", "finetune", "distill"):
        p = command(stage, f"run the {stage} stage")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--ckpt", type=Path, help="starting checkpoint" + (
            "; a fresh encoder is built from the data vocabulary when omitted" if stage == "pretrain" else ""))
        p.add_argument("--out", type=Path, required=True, help="output checkpoint")
        p.add_argument("--metrics", type=Path, help="per-step metrics JSONL")
        p.add_argument("--stage", choices=(stage,), default=stage)
        if stage == "pretrain":
            p.add_argument("--vocab-from", type=Path, action="append", default=[],
                           help="extra text files whose tokens join the vocabulary")
        if stage == "distill":
            p.add_argument("--teacher", type=Path, required=True, help="teacher cache JSONL")

    p = command("teacher-cache", "precompute teacher score rows for distillation")
    p.add_argument("--data", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--teacher", type=Path, help="teacher checkpoint")
    src.add_argument("--embeddings", type=Path, help="teacher embedding JSONL")
    p.add_argument("--out", type=Path, required=True)

    def eval_flags(p):
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--task", type=Path, required=True)
        p.add_argument("--corpus", type=Path, required=True)
        p.add_argument("--k", type=_int_list, default=list(DEFAULT_KS))
        p.add_argument("--out", type=Path, help="write the report here instead of stdout")

    p = command("eval", "retrieval metrics for one checkpoint")
    eval_flags(p)
    p.add_argument("--dim", type=int, help="evaluate a prefix of the embedding")

    p = command("sweep", "metrics at several truncation dimensions")
    eval_flags(p)
    p.add_argument("--dims", type=_int_list, required=True)

    p = command("margin", "positive vs hard-negative similarity per sample")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="JSONL report; stdout when omitted")
    return ap


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return cfg


def _pick(flag, cfg: dict, key: str, default):
    """Command-line flag, then config file, then built-in default."""
    return flag if flag is not None else cfg.get(key, default)


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with atomic_open(out) as fh:
            fh.write(text)


def _samples(args):
    samples = read_samples(args.data)
    validate_samples(samples)
    return samples


def cmd_curate(args, cfg) -> None:
    if not (args.pairs or args.labeled):
        raise UsageError("curate needs --pairs and/or --labeled")
    rng = SeededRng(_pick(args.seed, cfg, "seed", 0))
    m = _pick(args.m, cfg, "m", 7)
    out = []
    if args.pairs:
        out += process_symmetric(read_scored_pairs(args.pairs), args.instruction or templates.STS)
    if args.labeled:
        items = read_labeled(args.labeled)
        instruction = args.instruction or templates.CLASSIFICATION
        if args.mode == "asymmetric":
            labels = cfg.get("global_labels") or [it.label for it in items]
            out += process_asymmetric(items, labels, m, rng, instruction)
        else:
            groups: dict[str, list[str]] = {}
            for it in items:
                groups.setdefault(it.label, []).append(it.text)
            per_class = _pick(args.samples_per_class, cfg, "samples_per_class", 8)
            out += example_based_labeling(groups, per_class, m, rng, instruction)
    write_samples(args.out, out)


def cmd_mine(args, cfg) -> None:
    encoder = load_checkpoint(args.ckpt)
    window = tuple(_pick(args.window, cfg, "window", (50, 100)))
    mined = mine_hard_negatives(encoder, _samples(args), CandidatePool.read(args.pool),
                                window, _pick(args.m, cfg, "m", 7), SeededRng(_pick(args.seed, cfg, "seed", 0)))
    write_samples(args.out, mined)


def _stage_config(args, cfg) -> StageConfig:
    if cfg.get("stage", args.command) != args.command:
        raise ConfigError(f"config is for stage {cfg['stage']!r}, not {args.command!r}")
    cfg = {k: v for k, v in cfg.items() if k not in ("stage", "encoder")}
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return StageConfig.desk(args.command, **cfg)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def cmd_train(args, cfg) -> None:
    if args.config is None:
        raise UsageError(f"{args.command} requires --config")
    stage_cfg = _stage_config(args, cfg)
    samples = _samples(args)
    if args.ckpt is not None:
        encoder = load_checkpoint(args.ckpt)
    elif args.command == "pretrain":
        texts = [s.query_text() for s in samples] + [s.passage_text(s.positive) for s in samples]
        for extra in args.vocab_from:
            texts += CandidatePool.read(extra).passages
        try:
            encoder = Encoder.from_texts(texts, seed=stage_cfg.seed, **cfg.get("encoder", {}))
        except TypeError as e:
            raise ConfigError(f"bad encoder settings: {e}") from None
    else:
        raise UsageError(f"{args.command} requires --ckpt")
    teacher = TeacherCache.load(args.teacher) if args.command == "distill" else None
    run_stage(stage_cfg, samples, encoder, teacher=teacher, checkpoint_path=args.out, log_path=args.metrics)


def cmd_teacher_cache(args, cfg) -> None:
    samples = _samples(args)
    source = load_checkpoint(args.teacher) if args.teacher else read_teacher_embeddings(args.embeddings)
    build_teacher_cache(source, samples).save(args.out)


def _task(args) -> RetrievalTask:
    return RetrievalTask.read(args.task, args.corpus)


def cmd_eval(args, cfg) -> None:
    run = evaluate(load_checkpoint(args.ckpt), _task(args), args.k, args.dim, str(args.ckpt))
    _emit(dumps(run.to_dict()) + "\n", args.out)


def cmd_sweep(args, cfg) -> None:
    report = matryoshka_sweep(load_checkpoint(args.ckpt), _task(args), args.dims, args.k, str(args.ckpt))
    _emit(dumps(report) + "\n", args.out)


def cmd_margin(args, cfg) -> None:
    rows = margin_report(load_checkpoint(args.ckpt), _samples(args))
    if args.out is None:
        sys.stdout.writelines(dumps(r) + "\n" for r in rows)
    else:
        write_jsonl(args.out, rows)


COMMANDS = {
    "curate": cmd_curate,
    "mine": cmd_mine,
    "pretrain": cmd_train,
    "finetune": cmd_train,
    "distill": cmd_train,
    "teacher-cache": cmd_teacher_cache,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "margin": cmd_margin,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.paper_defaults:
        print(json.dumps({"reference": PAPER_DEFAULTS, "desk": DESK_DEFAULTS}, indent=2))
        return 0
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        print("embforge: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, _load_config(args.config))
    except UsageError as e:
        print(f"embforge {args.command}: error: {e}", file=sys.stderr)
        return 1
    except EmbforgeError as e:
        print(f"embforge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"embforge {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
