# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Run every stage end to end."""

from __future__ import annotations

from pathlib import Path

from core import status
from poison_pipeline import run_pipeline
from run_config import RunConfig


def cmd_pipeline(cfg: RunConfig, plot: bool = False) -> dict:
    status(f"🚀 pipeline: method={cfg.method} out={cfg.out_dir}")
    report = run_pipeline(cfg, plot=plot)
    metrics = report["metrics"]
    clean = metrics["clean"]
    status(f"📊 clean      MAP {clean['map']:.4f}   t-MAP {clean['tmap']:.4f}")
    if "backdoored" in metrics:
        bd = metrics["backdoored"]
        status(f"📊 backdoored MAP {bd['map']:.4f}   t-MAP {bd['tmap']:.4f}")
    status(f"✅ report: {Path(cfg.out_dir) / 'experiment_report.json'}")
    return report
