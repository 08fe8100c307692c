"""Command-line entry points tying the training phases together.

Subcommands mirror the pipeline phases (collect, pretrain-backbone,
train-prompts, train-policy, evaluate, ablate, probe-gap, export); each
reads a JSON config plus repeatable dotted-path overrides. Phase ordering is
enforced: commands exit nonzero with an explanatory message when an upstream
artifact is missing or its digest does not match.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .config import apply_override, config_digest, load_config, save_config

LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}


def _setup_logging():
    level = os.environ.get("CAPO_LOG_LEVEL", "info").lower()
    if level not in LOG_LEVELS:
        print(f"warning: CAPO_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}", file=sys.stderr)
        level = "info"
    logging.basicConfig(
        level=LOG_LEVELS[level], format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capo",
        description="Contrastive prompt orchestration: desk-scale training pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("collect", "collect the expert dataset over source+seen domains"),
        ("pretrain-backbone", "pretrain and freeze the vision backbone"),
        ("train-prompts", "contrastive prompt learning over the frozen backbone"),
        ("train-policy", "PPO policy training with adaptive prompt orchestration"),
        ("evaluate", "evaluate trained policies over the domain splits"),
        ("ablate", "train and evaluate an ablation variant"),
        ("probe-gap", "approximation-gap probe against the reference domain"),
        ("export", "export embeddings / attention traces / debug frames"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. policy.total_steps=5000 (repeatable)",
        )
        p.add_argument("--out", default=None, help="output directory (overrides config)")
    return parser


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    for item in args.set:
        apply_override(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


def command_dispatch(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = pipeline.out_dir(cfg)
    try:
        if args.command == "collect":
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "config.json")
            result = pipeline.run_collect(cfg)
        elif args.command == "pretrain-backbone":
            result = pipeline.run_pretrain_backbone(cfg)
        elif args.command == "train-prompts":
            result = pipeline.run_train_prompts(cfg, variant=cfg["ablation"]["variant"])
            result = {k: v for k, v in result.items() if k != "holdout_idx"}
        elif args.command == "train-policy":
            result = pipeline.run_train_policy(cfg, variant=cfg["ablation"]["variant"])
        elif args.command == "evaluate":
            result = pipeline.run_evaluate(cfg, variant=cfg["ablation"]["variant"])
        elif args.command == "ablate":
            result = pipeline.run_ablation_variant(cfg["ablation"]["variant"], cfg)
        elif args.command == "probe-gap":
            result = pipeline.run_probe_gap(cfg)
        elif args.command == "export":
            result = pipeline.run_export(cfg)
        else:  # pragma: no cover - argparse enforces choices
            return 2
    except pipeline.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(json.dumps({"command": args.command, "config_digest": config_digest(cfg), "result": _brief(result)}, sort_keys=True))
    return 0


def _brief(result) -> dict | list | str | int | float | None:
    """Keep stdout summaries small; full artifacts live in the out directory."""
    if isinstance(result, dict):
        return {
            k: _brief(v)
            for k, v in result.items()
            if not isinstance(v, (list, dict)) or k in ("result", "final_losses", "branch_calls")
        }
    return result


def main() -> None:
    sys.exit(command_dispatch())


if __name__ == "__main__":
    main()
