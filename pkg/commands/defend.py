# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Run the enabled defenses against the backdoored model."""

from __future__ import annotations

from core import status
from poison_pipeline import stage_defend
from run_config import RunConfig


def cmd_defend(cfg: RunConfig) -> dict:
    report = stage_defend(cfg)
    if report.get("skipped"):
        status("⚠️  method=none: no backdoored model to defend")
        return report
    if "spectral" in report:
        c = report["spectral"]["counts"]
        status(f"🛡️  spectral: removed {c['poisoned_removed']} poisoned / {c['clean_removed']} clean, "
               f"{c['poisoned_remained']} poisoned remained")
        if "retrained" in report["spectral"]:
            r = report["spectral"]["retrained"]
            status(f"   retrained on filtered set: MAP {r['map']:.4f}  t-MAP {r['tmap']:.4f}")
    if "prune" in report:
        for count, m, t in report["prune"]["rows"]:
            status(f"✂️  pruned {count:>3}: MAP {m:.4f}  t-MAP {t:.4f}")
    if "dp" in report:
        for sigma, m, t in report["dp"]["rows"]:
            status(f"🔒 dp sigma={sigma}: MAP {m:.4f}  t-MAP {t:.4f}")
    return report
