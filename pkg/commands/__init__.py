# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Command implementations for hpl CLI."""

from .gen_data import cmd_gen_data
from .train import cmd_train
from .gen_trigger import cmd_gen_trigger
from .gen_perturb import cmd_gen_perturb
from .poison import cmd_poison
from .evaluate import cmd_eval
from .defend import cmd_defend
from .pipeline import cmd_pipeline
from .sweep import cmd_sweep, parse_sweep, sweep_points
from .doctor import cmd_doctor
from .init_config import cmd_init_config

__all__ = [
    'cmd_gen_data',
    'cmd_train',
    'cmd_gen_trigger',
    'cmd_gen_perturb',
    'cmd_poison',
    'cmd_eval',
    'cmd_defend',
    'cmd_pipeline',
    'cmd_sweep',
    'parse_sweep',
    'sweep_points',
    'cmd_doctor',
    'cmd_init_config',
]
