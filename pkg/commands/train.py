# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Train the clean model and surrogates, or the victim on the poisoned set."""

from __future__ import annotations

from core import status
from poison_pipeline import stage_train
from run_config import RunConfig


def _fmt(loss: float | None) -> str:
    return f"{loss:.4f}" if loss is not None else "n/a"


def cmd_train(cfg: RunConfig, poisoned: bool = False) -> dict:
    """
    Run the train stage.

    Args:
        cfg: Effective run config
        poisoned: Train the victim on poisoned_train.hpd instead of the clean model
    """
    report = stage_train(cfg, poisoned=poisoned)
    if report.get("skipped"):
        status(f"⚠️  method={cfg.method}: no poisoned set, victim training skipped")
    elif poisoned:
        status(f"🧪 victim final loss: {_fmt(report['victim_final_loss'])}")
    else:
        status(f"🧪 clean final loss: {_fmt(report['clean_final_loss'])} "
               f"({len(report['surrogate_final_losses'])} surrogate(s) trained)")
    return report
