# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Write the reference RunConfig to a JSON file."""

from __future__ import annotations

from pathlib import Path

from core import ConfigError, status
from run_config import RunConfig, save_config


def cmd_init_config(path: str, cfg: RunConfig, force: bool = False) -> None:
    target = Path(path)
    if target.exists() and not force:
        raise ConfigError(f"{target} already exists (use --force to overwrite)")
    save_config(cfg, target)
    status(f"✅ wrote {target}")
