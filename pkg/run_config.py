# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""RunConfig: the JSON experiment description, its defaults, and CLI/sweep overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path

import numpy as np

from core import HplError, ConfigError, write_json
from tensor_core import SgdSchedule
from hash_model import HashModelConfig, PairwiseLossConfig
from attack_kit import PerturbationBudget, TriggerOptConfig, TriggerSpec, LOCATIONS, default_trigger_size
from eval_metrics import EvalConfig
from defenses import DpConfig
from poison_pipeline import SyntheticDatasetSpec, label_vector

CONFIG_VERSION = 1
METHODS = ("none", "tri", "tri_noise", "tri_adv", "ours")
SWEEP_KEYS = ("lambda", "poison_count", "trigger_size", "blend", "code_length",
              "batch_size", "epsilon", "target_label", "method")


@dataclass(frozen=True)
class ModelSection:
    hidden_sizes: tuple[int, ...] = (64,)
    code_length: int = 16


@dataclass(frozen=True)
class TriggerSection:
    size: int | None = None  # None -> scaled from the image side
    location: str = "bottom_right"
    blend: float = 1.0
    iterations: int = 2000
    batch_size: int = 32
    step_size: float = 12.0
    normalize_by_batch: bool = True

    def __post_init__(self) -> None:
        if self.location not in LOCATIONS:
            raise ConfigError(f"trigger.location: {self.location!r} is not one of {', '.join(LOCATIONS)}")


@dataclass(frozen=True)
class PoisonSection:
    target_label: int = 0
    poison_count: int = 60
    lam: float = 0.8


@dataclass(frozen=True)
class DefenseSection:
    spectral: bool = True
    remove_multiplier: float = 1.5
    retrain_after_filter: bool = True
    prune: bool = True
    prune_counts: tuple[int, ...] = (0, 8, 16, 32, 48, 64)
    dp: bool = False
    dp_clip: float = 0.3
    dp_sigmas: tuple[float, ...] = (0.0, 0.01, 0.03, 0.1)

    def any_enabled(self) -> bool:
        return self.spectral or self.prune or self.dp


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    victim: int = 1
    attacker: int = 2
    selection: int = 3
    trigger: int = 4
    perturb: int = 5
    dp: int = 6
    shuffle: int = 7


# section name -> (class, JSON key aliases, fields filled from `seeds` instead)
_SECTIONS = {
    "dataset": (SyntheticDatasetSpec, {}, ("seed",)),
    "model": (ModelSection, {}, ()),
    "schedule": (SgdSchedule, {}, ("seed",)),
    "loss": (PairwiseLossConfig, {}, ()),
    "trigger": (TriggerSection, {}, ()),
    "budget": (PerturbationBudget, {}, ()),
    "poison": (PoisonSection, {"lambda": "lam"}, ()),
    "eval": (EvalConfig, {}, ()),
    "defenses": (DefenseSection, {}, ()),
    "seeds": (Seeds, {}, ()),
}


@dataclass(frozen=True)
class RunConfig:
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: SgdSchedule = field(default_factory=SgdSchedule)
    loss: PairwiseLossConfig = field(default_factory=PairwiseLossConfig)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)
    poison: PoisonSection = field(default_factory=PoisonSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    defenses: DefenseSection = field(default_factory=DefenseSection)
    seeds: Seeds = field(default_factory=Seeds)
    method: str = "ours"
    surrogates: tuple[tuple[int, ...], ...] | None = None
    out_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    def __post_init__(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"version: {self.version} is not supported (expected {CONFIG_VERSION})")
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} is not one of {', '.join(METHODS)}")
        if not 0 <= self.poison.target_label < self.dataset.classes:
            raise ConfigError(f"poison.target_label: {self.poison.target_label} outside [0, {self.dataset.classes})")
        if self.poison.poison_count < 0 or self.poison.poison_count > self.dataset.per_class_train:
            raise ConfigError(f"poison.poison_count: {self.poison.poison_count} outside "
                              f"[0, {self.dataset.per_class_train}]")
        if not 0.0 <= self.poison.lam <= 1.0:
            raise ConfigError(f"poison.lambda: {self.poison.lam} outside [0, 1]")
        if self.defenses.prune:
            width = self.model.hidden_sizes[-1] if self.model.hidden_sizes else 0
            bad = [c for c in self.defenses.prune_counts if not 0 <= c <= width]
            if bad:
                raise ConfigError(f"defenses.prune_counts: {bad} outside [0, {width}] "
                                  f"(last hidden layer width)")
        if self.surrogates is not None:
            object.__setattr__(self, "surrogates", tuple(tuple(int(h) for h in s) for s in self.surrogates))
            if not self.surrogates:
                raise ConfigError("surrogates: need at least one architecture")
        try:
            self.victim_config()
            self.surrogate_configs()
            self.initial_trigger()
            self.trigger_opt()
        except ConfigError:
            raise
        except HplError as e:
            raise ConfigError(str(e)) from e

    # ===== Derived settings =====
    @property
    def trigger_size(self) -> int:
        if self.trigger.size is not None:
            return int(self.trigger.size)
        h, w, _ = self.dataset.dims
        return default_trigger_size(min(h, w))

    def victim_config(self) -> HashModelConfig:
        return HashModelConfig(self.dataset.dims, self.model.hidden_sizes, self.model.code_length, self.seeds.victim)

    def surrogate_configs(self) -> list[HashModelConfig]:
        archs = self.surrogates if self.surrogates is not None else (self.model.hidden_sizes,)
        return [HashModelConfig(self.dataset.dims, h, self.model.code_length, self.seeds.attacker + i)
                for i, h in enumerate(archs)]

    def train_schedule(self) -> SgdSchedule:
        return replace(self.schedule, seed=self.seeds.shuffle)

    def target_vector(self) -> np.ndarray:
        return label_vector(self.poison.target_label, self.dataset.classes)

    def initial_trigger(self) -> TriggerSpec:
        return TriggerSpec.build(self.dataset.dims, self.trigger_size, self.trigger.location, self.trigger.blend)

    def trigger_opt(self) -> TriggerOptConfig:
        t = self.trigger
        return TriggerOptConfig(t.iterations, t.batch_size, t.step_size, t.normalize_by_batch, self.seeds.trigger)

    def dp_config(self, sigma: float) -> DpConfig:
        return DpConfig(self.defenses.dp_clip, float(sigma), self.seeds.dp)

    # ===== Overrides =====
    def with_out(self, out_dir: str | os.PathLike) -> RunConfig:
        return replace(self, out_dir=str(out_dir))

    def with_method(self, method: str) -> RunConfig:
        return replace(self, method=method)

    def with_seed(self, seed: int) -> RunConfig:
        """Reseed every stream as seed + its default offset."""
        offsets = Seeds()
        return replace(self, seeds=Seeds(**{f.name: int(seed) + getattr(offsets, f.name) for f in fields(Seeds)}))

    def with_override(self, key: str, raw: str) -> RunConfig:
        """
        Apply one sweep assignment.

        Args:
            key: One of SWEEP_KEYS
            raw: Value as written on the command line

        Returns:
            New RunConfig

        Raises:
            ConfigError: unknown key or unparsable value
        """
        try:
            if key == "lambda":
                return replace(self, poison=replace(self.poison, lam=float(raw)))
            if key == "poison_count":
                return replace(self, poison=replace(self.poison, poison_count=int(raw)))
            if key == "target_label":
                return replace(self, poison=replace(self.poison, target_label=int(raw)))
            if key == "trigger_size":
                return replace(self, trigger=replace(self.trigger, size=int(raw)))
            if key == "blend":
                return replace(self, trigger=replace(self.trigger, blend=float(raw)))
            if key == "code_length":
                return replace(self, model=replace(self.model, code_length=int(raw)))
            if key == "batch_size":
                return replace(self, budget=replace(self.budget, batch_size=int(raw)))
            if key == "epsilon":
                eps = float(raw)
                step = min(self.budget.step_size, eps) if eps > 0 else self.budget.step_size
                return replace(self, budget=replace(self.budget, epsilon=eps, step_size=step))
            if key == "method":
                return replace(self, method=raw)
        except ConfigError:
            raise
        except (HplError, ValueError) as e:
            raise ConfigError(f"--sweep {key}={raw}: {e}") from e
        raise ConfigError(f"--sweep: unknown key {key!r}; choose from {', '.join(SWEEP_KEYS)}")

    # ===== (De)serialization =====
    def to_dict(self) -> dict:
        out: dict = {"version": self.version, "method": self.method, "out_dir": self.out_dir,
                     "surrogates": [list(s) for s in self.surrogates] if self.surrogates is not None else None}
        for name, (_, aliases, skip) in _SECTIONS.items():
            reverse = {v: k for k, v in aliases.items()}
            section = asdict(getattr(self, name))
            out[name] = {reverse.get(k, k): _jsonable(v) for k, v in section.items() if k not in skip}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        kwargs = {}
        for key, value in data.items():
            if key in _SECTIONS:
                kwargs[key] = _build_section(key, value)
            elif key in ("version", "method", "out_dir", "surrogates"):
                kwargs[key] = _tupled(value)
            else:
                raise ConfigError(f"unknown field {key!r}")
        return cls(**kwargs)


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build_section(name: str, data) -> object:
    cls, aliases, skip = _SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(skip)
    kwargs = {}
    for key, value in data.items():
        attr = aliases.get(key, key)
        if attr not in allowed:
            raise ConfigError(f"unknown field {name}.{key}")
        kwargs[attr] = _tupled(value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (HplError, TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def load_config(path: str | os.PathLike) -> RunConfig:
    """
    Parse a RunConfig JSON file.

    Raises:
        ConfigError: unreadable file, JSON syntax error (with line), unknown or invalid field
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    try:
        return RunConfig.from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    write_json(path, cfg.to_dict())


def resolve_config(config_path: str | None, seed: int | None = None, method: str | None = None,
                   out: str | None = None) -> RunConfig:
    """Config file (or defaults) with --seed, --method and --out applied in that order."""
    cfg = load_config(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if method is not None:
        if method not in METHODS:
            raise ConfigError(f"--method: {method!r} is not one of {', '.join(METHODS)}")
        cfg = cfg.with_method(method)
    if out is not None:
        cfg = cfg.with_out(out)
    return cfg
