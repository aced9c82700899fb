# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Generate the perturbations the configured method calls for."""

from __future__ import annotations

from core import status
from poison_pipeline import stage_gen_perturb
from run_config import RunConfig


def cmd_gen_perturb(cfg: RunConfig) -> dict:
    report = stage_gen_perturb(cfg)
    if report.get("skipped"):
        status(f"⚠️  method={cfg.method} uses no perturbations")
        return report
    line = f"🌫️  {report['count']} perturbations, max |eta| = {report['max_abs']:.4f} (epsilon {cfg.budget.epsilon})"
    if "dispersion" in report:
        line += f", mean pairwise distance {report['dispersion']:.2f} bits"
    status(line)
    return report
