# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Optimize the trigger patch against the surrogate model(s)."""

from __future__ import annotations

from core import status
from poison_pipeline import stage_gen_trigger
from run_config import RunConfig


def cmd_gen_trigger(cfg: RunConfig) -> dict:
    report = stage_gen_trigger(cfg)
    dist = report["final_distance"]
    shown = f"{dist:.3f}" if dist is not None else "n/a"
    status(f"🎯 {report['size']}x{report['size']} trigger at {report['location']} "
           f"(blend {report['blend']}), mean distance to anchor {shown}")
    return report
