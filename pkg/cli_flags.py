# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Command-line argument parser and flag definitions for hpl."""

from __future__ import annotations

import argparse

from run_config import METHODS

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="RunConfig JSON file (default: built-in reference config)")
    p.add_argument("--out", default=None, help="Output directory for artifacts and reports (overrides out_dir)")
    p.add_argument("--seed", type=int, default=None, help="Reseed every stream as N + its default offset")
    p.add_argument("--method", choices=list(METHODS), default=None,
                   help="Attack method: none, tri, tri_noise, tri_adv or ours (overrides config)")

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="hpl: clean-label backdoor experiments on deep hashing retrieval")
    subparsers = parser.add_subparsers(dest="command")

    p = subparsers.add_parser("gen-data", help="Synthesize the train/query/database splits")
    _add_run_flags(p)

    p = subparsers.add_parser("train", help="Train the clean model and surrogates")
    _add_run_flags(p)
    p.add_argument("--poisoned", action="store_true", help="Train the victim on the poisoned set instead")

    p = subparsers.add_parser("gen-trigger", help="Optimize the trigger patch")
    _add_run_flags(p)

    p = subparsers.add_parser("gen-perturb", help="Generate perturbations for the configured method")
    _add_run_flags(p)

    p = subparsers.add_parser("poison", help="Craft the clean-label poisoned training set")
    _add_run_flags(p)

    p = subparsers.add_parser("eval", help="Compute MAP / t-MAP, PR curve and distance histogram")
    _add_run_flags(p)
    p.add_argument("--plot", action="store_true", help="Also write pr_curve.png and hist.png (needs matplotlib)")

    p = subparsers.add_parser("defend", help="Run spectral, pruning and DP defenses")
    _add_run_flags(p)

    p = subparsers.add_parser("pipeline", help="Run every stage end to end")
    _add_run_flags(p)
    p.add_argument("--plot", action="store_true", help="Also write pr_curve.png and hist.png (needs matplotlib)")

    p = subparsers.add_parser("sweep", help="Run the pipeline over a grid of settings")
    _add_run_flags(p)
    p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="Sweep axis (repeatable; repeated axes form a grid)")
    p.add_argument("--jobs", type=int, default=1, help="Parallel sweep points (capped by HPL_THREADS)")

    p = subparsers.add_parser("init-config", help="Write the reference config to a JSON file")
    p.add_argument("path", help="Destination file")
    p.add_argument("--force", action="store_true", help="Overwrite an existing file")
    _add_run_flags(p)

    subparsers.add_parser("doctor", help="Diagnose environment (numpy, extras, HPL_* switches)")
    subparsers.add_parser("help", help="Show this help message and exit")
    return parser
