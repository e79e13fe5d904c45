"""Command-line interface.

One workdir-centric pipeline:

    imitrans gen-data
    imitrans pretrain-expert
    imitrans pretrain-asr
    imitrans train --variant ikd_plus
    imitrans feasibility
    imitrans distill --source gold
    imitrans eval --checkpoint runs/default/ikd_plus.ckpt
    imitrans inspect --checkpoint runs/default/expert.ckpt --example 3
    imitrans report

Every subcommand reads the same INI config (defaults built in, `--config`
overlays a file, `--set section.key=value` overrides single entries).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .decode import topk_inspect
from .policy import load_checkpoint
from .util import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_TRAINING,
    EXIT_USAGE,
    DataError,
    TrainingError,
    UsageError,
)

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse that reports problems through UsageError (exit code 1)."""

    def error(self, message):
        raise UsageError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="INI config file overlaying the defaults")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a single config entry (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="imitrans", description="imitation-based distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_config_args(p)

    p = sub.add_parser("pretrain-expert", help="train the translation oracle on clean transcripts")
    _add_config_args(p)

    p = sub.add_parser("pretrain-asr", help="train the recognizer")
    _add_config_args(p)

    p = sub.add_parser("train", help="train one student variant")
    _add_config_args(p)
    p.add_argument("--variant", required=True, help=f"one of {', '.join(harness.VARIANTS)}")

    p = sub.add_parser("feasibility", help="expert completion of student partial hypotheses")
    _add_config_args(p)
    p.add_argument("--split", default="dev", help="corpus split to evaluate (default dev)")

    p = sub.add_parser("distill", help="replace references with expert translations")
    _add_config_args(p)
    p.add_argument("--source", required=True, choices=("gold", "synthetic"), help="expert input transcripts")

    p = sub.add_parser("eval", help="evaluate a checkpoint on corpus splits")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to evaluate")
    p.add_argument("--splits", default="dev,test", help="comma-separated splits (default dev,test)")
    p.add_argument("--corpus", help="corpus file (default: the configured one)")
    p.add_argument("--name", help="name for the score files (default: checkpoint stem)")

    p = sub.add_parser("inspect", help="look inside a checkpoint or its predictions")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example", type=int, help="corpus example index to query")
    p.add_argument("--prefix", default="", help="space-separated target token ids already emitted")
    p.add_argument("-k", type=int, default=8, help="how many next tokens to show")

    p = sub.add_parser("report", help="merge score files into one table")
    _add_config_args(p)
    p.add_argument("--baseline", help="variant the p-values compare against")
    p.add_argument("--names", help="comma-separated score-file names (default: all found)")

    return parser


def _experiment(args) -> harness.Experiment:
    cfg = harness.load_config(args.config, args.overrides)
    return harness.Experiment.from_config(cfg)


def _cmd_gen_data(args) -> int:
    exp = _experiment(args)
    path = exp.generate()
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_pretrain_expert(args) -> int:
    exp = _experiment(args)
    path = harness.pretrain_expert(exp)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_pretrain_asr(args) -> int:
    exp = _experiment(args)
    path = harness.pretrain_asr(exp)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    exp = _experiment(args)
    path = harness.train_variant(exp, args.variant)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_feasibility(args) -> int:
    exp = _experiment(args)
    rows = harness.feasibility_eval(exp, split=args.split)
    for name, bleu in rows:
        print(f"{name}\t{bleu:.2f}")
    return EXIT_OK


def _cmd_distill(args) -> int:
    exp = _experiment(args)
    path = harness.build_distilled_corpus(exp, args.source)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    exp = _experiment(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    policy, _, _ = load_checkpoint(ckpt)
    exp.check_vocab_hashes(policy, str(ckpt))
    name = args.name or ckpt.stem
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    corpus = Path(args.corpus) if args.corpus else None
    rows = harness.evaluate_to_files(exp, name, policy, splits_wanted=splits, corpus_path=corpus)
    for r in rows:
        print(f"{r.variant}\t{r.split}\tBLEU {r.bleu:.2f}\tTER {r.ter:.4f}\tWER {r.wer:.4f}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    exp = _experiment(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    policy, optimizer, meta = load_checkpoint(ckpt)
    summary = {
        "hyper": policy.hyper.to_dict(),
        "parameters": int(sum(v.size for v in policy.params.values())),
        "optimizer_step": None if optimizer is None else optimizer.step,
        "meta": meta,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.example is None:
        return EXIT_OK
    exp.check_vocab_hashes(policy, str(ckpt))
    examples = exp.load_examples()
    if not 0 <= args.example < len(examples):
        raise UsageError(f"example index {args.example} outside the corpus (size {len(examples)})")
    ex = examples[args.example]
    field = {"acoustic": ex.x_a, "transcript": ex.x_s}[policy.hyper.input_channel]
    try:
        prefix = tuple(int(t) for t in args.prefix.split())
    except ValueError:
        raise UsageError(f"--prefix must be space-separated integers, got {args.prefix!r}") from None
    out_vocab = exp.vocab_for_channel(policy.hyper.output_channel)
    print(f"input ({policy.hyper.input_channel}): {' '.join(field.to_tokens(exp.vocab_for_channel(policy.hyper.input_channel)))}")
    print(f"reference: {' '.join(ex.y.to_tokens(exp.tgt_vocab))}")
    for token, prob in topk_inspect(policy, field, prefix, k=args.k):
        print(f"  {token:>4d} {out_vocab.token_of(token):<8s} {prob:.4f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    exp = _experiment(args)
    names = [n.strip() for n in args.names.split(",")] if args.names else None
    path = harness.write_report(exp, names=names, baseline=args.baseline)
    print((exp.workdir / "report.md").read_text(encoding="utf-8"), end="")
    print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain-expert": _cmd_pretrain_expert,
    "pretrain-asr": _cmd_pretrain_asr,
    "train": _cmd_train,
    "feasibility": _cmd_feasibility,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
