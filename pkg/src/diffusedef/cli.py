"""Command-line entry point: ``diffusedef <command> --config run.ini --out runs/x``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness as H
from .checkpoint import CheckpointError
from .config import ConfigError, load_config, validate
from .evaluation import EmptyInput

log = logging.getLogger("diffusedef")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="reseed every stage from this value")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--workers", type=int, default=1, help="parallel attack workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="diffusedef", description="diffusion-layer defense: train, attack and evaluate")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus and synonym pools")
    t = sub.add_parser("train", parents=[common], help="train the encoder-classifier")
    t.add_argument("--clean", action="store_true", help="disable adversarial training for this run")
    sub.add_parser("diffuse-train", parents=[common], help="train the diffusion layer on the frozen encoder")
    a = sub.add_parser("attack", parents=[common], help="attack the base and defended victims")
    a.add_argument("--victims", nargs="+", choices=["base", "diffusedef"], default=["base", "diffusedef"])
    a.add_argument("--n-examples", type=int, help="override attack.n_examples")
    sub.add_parser("eval", parents=[common], help="reports and analyses from stored attack records")
    ab = sub.add_parser("ablate", parents=[common], help="ensembling / denoising / adversarial-training ablations")
    ab.add_argument("--toggles", nargs="+", choices=list(H.ABLATIONS), default=list(H.ABLATIONS))
    ab.add_argument("--n-examples", type=int, help="override attack.n_examples")
    sw = sub.add_parser("sweep", parents=[common], help="AUA and #Query as functions of t'")
    sw.add_argument("--n-examples", type=int, help="override attack.n_examples")
    return p


def run(args) -> object:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if getattr(args, "n_examples", None) is not None:
        cfg.attack.n_examples = args.n_examples
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    validate(cfg)
    H.write_config_echo(cfg, args.out)
    cmd = args.command
    if cmd == "gen-data":
        return H.gen_data(cfg, args.out)
    if cmd == "train":
        return {"sha256": H.train(cfg, args.out, adversarial=False if args.clean else None)}
    if cmd == "diffuse-train":
        return {"sha256": H.diffuse_train(cfg, args.out)}
    if cmd == "attack":
        return H.attack(cfg, args.out, tuple(args.victims), args.workers)
    if cmd == "eval":
        s = H.evaluate(cfg, args.out)
        return {k: s["victims"][k]["aua"] for k in s["victims"]}
    if cmd == "ablate":
        return H.ablate(cfg, args.out, tuple(args.toggles), args.workers)
    if cmd == "sweep":
        return H.sweep(cfg, args.out, args.workers)
    raise UsageError(f"unknown command {cmd}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (UsageError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (H.MissingInput, EmptyInput, CheckpointError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
