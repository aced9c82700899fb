# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Evaluate MAP / t-MAP of the clean and backdoored models."""

from __future__ import annotations

from core import status
from poison_pipeline import stage_eval
from run_config import RunConfig


def _print_block(name: str, block: dict) -> None:
    status(f"📊 {name:<10} MAP {block['map']:.4f}   t-MAP {block['tmap']:.4f}")


def cmd_eval(cfg: RunConfig, plot: bool = False) -> dict:
    """
    Run the eval stage and print the metric table.

    Args:
        cfg: Effective run config
        plot: Also render pr_curve.png and hist.png (needs matplotlib)
    """
    report = stage_eval(cfg, plot=plot)
    _print_block("clean", report["clean"])
    if "backdoored" in report:
        _print_block("backdoored", report["backdoored"])
    return report
