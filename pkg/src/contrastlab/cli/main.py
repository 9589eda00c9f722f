"""``lab`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing artifact or
unreadable checkpoint, 4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from ..errors import CheckpointError, ConfigError, MissingArtifactError, NumericalError
from .config import ANALYSES, AXES, PROTOCOLS, load_config
from .report import cmd_report
from .runner import cmd_ablate, cmd_analyze, cmd_eval, cmd_pretrain

log = logging.getLogger("contrastlab")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lab", description="Contrastive representation-learning lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("pretrain", help="train the configured methods and save checkpoints"))
    sp = sub.add_parser("eval", help="run transfer protocols on saved checkpoints")
    common(sp)
    sp.add_argument("--protocol", choices=PROTOCOLS, help="default: the config's protocol list")
    sp.add_argument("--checkpoint", default="final", help="final, all, or an epoch number")
    sp = sub.add_parser("analyze", help="representation and robustness analyses")
    common(sp)
    sp.add_argument("--analysis", choices=ANALYSES + ("all",), default="all")
    sp = sub.add_parser("ablate", help="pretrain + evaluate over one ablation axis")
    common(sp)
    sp.add_argument("--axis", choices=AXES, required=True)
    sp = sub.add_parser("report", help="tables and charts from the record store")
    common(sp, config_required=False)
    return p


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    if args.out:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "report":
        if args.config:
            cfg = _resolve(args)
            paths = cmd_report(cfg.output_dir, cfg.experiment_id)
        elif args.out:
            paths = cmd_report(args.out)
        else:
            raise ConfigError(["report needs --config or --out"])
        for p in paths:
            print(p)
        return 0
    cfg = _resolve(args)
    if args.command == "pretrain":
        return cmd_pretrain(cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.protocol, args.checkpoint)
    if args.command == "analyze":
        return cmd_analyze(cfg, args.analysis)
    return cmd_ablate(cfg, args.axis)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return 2
    except (MissingArtifactError, CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        for k, v in sorted(exc.diagnostics.items()):
            print(f"  {k} = {v}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
