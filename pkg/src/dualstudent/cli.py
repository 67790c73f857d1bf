"""Command line: ``dualstudent <subcommand> [--config f] [--seed n] [--out dir] [--key value ...]``.

Any config key can be given as a flag, either bare (``--batch 128``) when
the name is unique or qualified (``--extraction.fd_step 1e-4``). Flags win
over the config file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import RunSpec, load_config, resolve_key, set_key
from .extraction import ConfigError
from .runner import run

COMMANDS = {
    "train-target": "train_target",
    "extract": "extract",
    "finetune": "finetune",
    "grad-fidelity": "eval_grad_fidelity",
    "attack": "attack_eval",
    "report": "report",
}


def _overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name = tok[2:]
        if "=" in name:
            name, value = name.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag {tok} needs a value")
            value = extra[i + 1]
            i += 2
        pairs.append((name.replace("-", "_"), value))
    return pairs


def build_spec(argv: list[str]) -> RunSpec:
    parser = argparse.ArgumentParser(prog="dualstudent", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="sectioned key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
    args, extra = parser.parse_known_args(argv)
    spec = load_config(args.config) if args.config else RunSpec()
    spec.task = COMMANDS[args.command]
    for name, value in _overrides(extra):
        section, key = resolve_key(name)
        set_key(spec, section, key, value)
    if args.seed is not None:
        spec.seed = args.seed
    if args.out is not None:
        spec.output_dir = args.out
    return spec


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        spec = build_spec(argv)
    except (ConfigError, OSError) as exc:
        print(f"dualstudent: {exc}", file=sys.stderr)
        return 2
    code = run(spec)
    if code == 0:
        print(f"wrote {spec.output_dir}")
    else:
        print(f"dualstudent: run failed, see {spec.output_dir}/report.txt", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
