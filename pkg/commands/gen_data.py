# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Synthesize the train / query / database splits."""

from __future__ import annotations

from core import status
from poison_pipeline import stage_gen_data
from run_config import RunConfig


def cmd_gen_data(cfg: RunConfig) -> dict:
    report = stage_gen_data(cfg)
    sizes = report["sizes"]
    status(f"📦 {cfg.dataset.classes} classes: train={sizes['train']} query={sizes['query']} database={sizes['database']}")
    return report
