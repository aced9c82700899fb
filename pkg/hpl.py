#!/usr/bin/env python3
# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""hpl - clean-label backdoor experiments on deep hashing retrieval."""

from __future__ import annotations

__version__ = "0.1.0"

import sys
from cli_flags import build_parser
from core import HplError, MissingArtifactError, StageError, exit_code_for
from run_config import resolve_config
from commands import (
    cmd_gen_data, cmd_train, cmd_gen_trigger, cmd_gen_perturb, cmd_poison,
    cmd_eval, cmd_defend, cmd_pipeline, cmd_sweep, cmd_doctor, cmd_init_config,
)

def _route(args) -> None:
    if args.command == "doctor":
        cmd_doctor(); return
    cfg = resolve_config(args.config, seed=args.seed, method=args.method, out=args.out)
    if args.command == "init-config":
        cmd_init_config(args.path, cfg, force=args.force); return
    if args.command == "gen-data":
        cmd_gen_data(cfg); return
    if args.command == "train":
        cmd_train(cfg, poisoned=args.poisoned); return
    if args.command == "gen-trigger":
        cmd_gen_trigger(cfg); return
    if args.command == "gen-perturb":
        cmd_gen_perturb(cfg); return
    if args.command == "poison":
        cmd_poison(cfg); return
    if args.command == "eval":
        cmd_eval(cfg, plot=args.plot); return
    if args.command == "defend":
        cmd_defend(cfg); return
    if args.command == "pipeline":
        cmd_pipeline(cfg, plot=args.plot); return
    if args.command == "sweep":
        cmd_sweep(cfg, args.sweep, jobs=args.jobs); return

def main() -> None:
    parser = build_parser()
    try:
        args = parser.parse_args()
    except SystemExit as e:
        # Allow help output (exit code 0) to pass through
        if e.code != 0:
            print("❗ Invalid command or usage.")
            print("💡 Use `hpl --help` to view the correct usage.\n")
        sys.exit(e.code)

    if args.command == "help" or not args.command:
        parser.print_help(); sys.exit(0)

    try:
        _route(args)
    except HplError as e:
        print(f"❗ {e}")
        cause = e.cause if isinstance(e, StageError) else e
        if isinstance(cause, MissingArtifactError):
            print(f"💡 Example: hpl {cause.stage} --out <same dir>")
        sys.exit(exit_code_for(e))

if __name__ == "__main__":
    main()
