# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Craft the clean-label poisoned training set."""

from __future__ import annotations

from core import status
from poison_pipeline import stage_poison
from run_config import RunConfig


def cmd_poison(cfg: RunConfig) -> dict:
    report = stage_poison(cfg)
    if report.get("skipped"):
        status("⚠️  method=none: nothing to poison")
    else:
        status(f"☠️  poisoned {report['poisoned']} images of class {report['target_label']}, labels untouched")
    return report
