# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""
Synthetic data, clean-label poisoning and the staged experiment driver.

Every stage reads its inputs from and writes its outputs to cfg.out_dir, so
running the stages one by one (the CLI subcommands) and run_pipeline produce
the same files.
"""

from __future__ import annotations

import functools
import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, TYPE_CHECKING

import numpy as np

from core import (
    HplError, ArgumentError, ShapeError, FormatError, StageError,
    debug, status, write_artifact, read_artifact, write_json, read_json, file_digest, require,
)
from hash_model import HashModel, hash_forward, similarity_matrix, train, save_checkpoint, load_checkpoint
from hamming_space import encode_database, dump_database_csv
from attack_kit import (
    TriggerSpec, PerturbationSet, inject, generate_trigger_with_trace,
    confusing_perturbations, adversarial_perturbation_set, uniform_noise_perturbations,
    save_trigger, load_trigger, save_perturbations, load_perturbations,
)
from eval_metrics import (
    evaluate_model, map_score, tmap_score, distance_histogram, mean_distance,
    write_pr_csv, write_hist_csv, plot_metrics,
)
from defenses import (
    spectral_signature_filter, default_remove_count, write_spectral_csv,
    prune_dormant, write_prune_csv, dp_train, write_dp_csv,
)

if TYPE_CHECKING:
    from run_config import RunConfig

DATASET_MAGIC = b"HPD1"
ROLES = ("train", "query", "database")
# disjoint id spaces per split
ID_OFFSETS = {"train": 0, "query": 1_000_000, "database": 2_000_000}
TEMPLATE_GRID = 4


# ===== Datasets =====
@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 10
    per_class_train: int = 100
    per_class_query: int = 20
    per_class_db: int = 200
    dims: tuple[int, int, int] = (16, 16, 3)
    template_contrast: float = 0.6
    noise_sigma: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ArgumentError(f"dims must be three positive extents, got {self.dims}")
        if self.classes < 1:
            raise ArgumentError(f"classes must be >= 1, got {self.classes}")
        if min(self.per_class_train, self.per_class_query, self.per_class_db) < 1:
            raise ArgumentError("per-class counts must be >= 1")
        if not 0.0 < self.template_contrast <= 1.0:
            raise ArgumentError(f"template_contrast must lie in (0, 1], got {self.template_contrast}")
        if self.noise_sigma < 0:
            raise ArgumentError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def count(self, role: str) -> int:
        return {"train": self.per_class_train, "query": self.per_class_query,
                "database": self.per_class_db}[role]


def label_vector(index: int, classes: int) -> np.ndarray:
    if not 0 <= index < classes:
        raise ArgumentError(f"label index {index} outside [0, {classes})")
    v = np.zeros(classes, dtype=np.uint8)
    v[index] = 1
    return v


@dataclass(eq=False)
class Dataset:
    ids: np.ndarray      # (N,) int64
    images: np.ndarray   # (N, H, W, C) in [0, 1]
    labels: np.ndarray   # (N, classes) uint8 multi-hot
    role: str = "train"

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        n = self.ids.shape[0]
        if self.images.ndim != 4 or self.images.shape[0] != n or self.labels.ndim != 2 or self.labels.shape[0] != n:
            raise ShapeError(f"dataset arrays disagree: ids {self.ids.shape}, images {self.images.shape}, "
                             f"labels {self.labels.shape}")
        if self.role not in ROLES:
            raise ArgumentError(f"unknown dataset role {self.role!r}")
        if np.unique(self.ids).size != n:
            raise ArgumentError("dataset ids must be unique")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ArgumentError("dataset images must lie in [0, 1]")
        if n and np.any(self.labels.sum(axis=1) == 0):
            raise ArgumentError("every label vector must be nonzero")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def samples(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield int(self.ids[i]), self.images[i], self.labels[i]

    def class_indices(self, target_label: np.ndarray) -> np.ndarray:
        """Row indices of samples sharing a label with target_label."""
        return np.nonzero(similarity_matrix(self.labels, np.asarray(target_label)[None, :])[:, 0] > 0)[0]

    def index_of(self, ids: np.ndarray) -> np.ndarray:
        lookup = {int(i): k for k, i in enumerate(self.ids.tolist())}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise ArgumentError(f"id {e.args[0]} not in {self.role} set") from e

    def subset(self, indices: np.ndarray) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.ids[indices], self.images[indices], self.labels[indices], self.role)

    def drop_ids(self, ids: np.ndarray) -> Dataset:
        return self.subset(np.nonzero(~np.isin(self.ids, np.asarray(ids, dtype=np.int64)))[0])

    def with_images(self, indices: np.ndarray, images: np.ndarray) -> Dataset:
        new = self.images.copy()
        new[np.asarray(indices, dtype=np.int64)] = images
        return Dataset(self.ids.copy(), new, self.labels.copy(), self.role)


def class_templates(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-class low-frequency patterns in [-1, 1]: a coarse random grid upsampled to (H, W)."""
    h, w, ch = spec.dims
    coarse = rng.uniform(-1.0, 1.0, size=(spec.classes, TEMPLATE_GRID, TEMPLATE_GRID, ch))
    up = np.repeat(coarse, math.ceil(h / TEMPLATE_GRID), axis=1)
    up = np.repeat(up, math.ceil(w / TEMPLATE_GRID), axis=2)
    return up[:, :h, :w, :]


def synthesize_dataset(spec: SyntheticDatasetSpec, seed: int | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """
    Build train / query / database splits from seeded class templates.

    image = clip(0.5 + 0.5 * contrast * template[class] + N(0, sigma^2), 0, 1)

    Args:
        spec: Dataset shape and noise settings
        seed: Overrides spec.seed when given

    Returns:
        Tuple of (train, query, database)
    """
    root = np.random.SeedSequence(spec.seed if seed is None else seed)
    template_seq, *split_seqs = root.spawn(1 + len(ROLES))
    templates = class_templates(spec, np.random.default_rng(template_seq))
    splits = []
    for role, seq in zip(ROLES, split_seqs):
        rng = np.random.default_rng(seq)
        per_class = spec.count(role)
        images, labels = [], []
        for c in range(spec.classes):
            base = np.broadcast_to(0.5 + 0.5 * spec.template_contrast * templates[c], (per_class, *spec.dims))
            noise = rng.normal(0.0, spec.noise_sigma, size=(per_class, *spec.dims)) if spec.noise_sigma else 0.0
            images.append(np.clip(base + noise, 0.0, 1.0))
            labels.append(np.tile(label_vector(c, spec.classes), (per_class, 1)))
        n = per_class * spec.classes
        ids = ID_OFFSETS[role] + np.arange(n, dtype=np.int64)
        splits.append(Dataset(ids, np.concatenate(images), np.concatenate(labels), role))
        debug(f"synthesized {role}: {n} images of {spec.dims}")
    return tuple(splits)


def save_datasets(path: str | os.PathLike, datasets: list[Dataset]) -> None:
    header = {"splits": [{"role": d.role, "size": len(d)} for d in datasets]}
    arrays = []
    for d in datasets:
        arrays.extend([d.ids.astype(np.float64), d.images, d.labels.astype(np.float64)])
    write_artifact(path, DATASET_MAGIC, header, arrays)


def load_datasets(path: str | os.PathLike) -> list[Dataset]:
    header, arrays = read_artifact(path, DATASET_MAGIC)
    try:
        splits = header["splits"]
        if len(arrays) != 3 * len(splits):
            raise FormatError(f"{path}: {len(arrays)} arrays for {len(splits)} splits")
        return [Dataset(arrays[3 * i].astype(np.int64), arrays[3 * i + 1],
                        arrays[3 * i + 2].astype(np.uint8), s["role"]) for i, s in enumerate(splits)]
    except (KeyError, TypeError, ShapeError, ArgumentError) as e:
        raise FormatError(f"{path}: bad dataset bundle ({e})") from e


# ===== Poisoning =====
@dataclass(eq=False)
class PoisonPlan:
    target_label: int
    poison_count: int
    trigger: TriggerSpec
    perturbations: PerturbationSet | None = None
    lam: float = 0.8
    selection_seed: int = 0

    def __post_init__(self) -> None:
        if self.poison_count < 0:
            raise ArgumentError(f"poison_count must be >= 0, got {self.poison_count}")

    def echo(self) -> dict:
        return {
            "target_label": self.target_label,
            "poison_count": self.poison_count,
            "lambda": self.lam,
            "selection_seed": self.selection_seed,
            "trigger_size": self.trigger.size,
            "trigger_location": self.trigger.location,
            "blend": self.trigger.blend,
            "perturbed": self.perturbations is not None,
        }


@dataclass(eq=False)
class PoisonManifest:
    poisoned_ids: list[int]
    plan: dict
    trigger_digest: str | None = None
    perturbation_digest: str | None = None

    def __post_init__(self) -> None:
        if len(self.poisoned_ids) != self.plan.get("poison_count", len(self.poisoned_ids)):
            raise ArgumentError(f"manifest lists {len(self.poisoned_ids)} ids for poison_count={self.plan['poison_count']}")

    def to_dict(self) -> dict:
        return {"poisoned_ids": list(self.poisoned_ids), "plan": dict(self.plan),
                "trigger_digest": self.trigger_digest, "perturbation_digest": self.perturbation_digest}

    @classmethod
    def from_dict(cls, d: dict) -> PoisonManifest:
        try:
            return cls([int(i) for i in d["poisoned_ids"]], dict(d["plan"]),
                       d.get("trigger_digest"), d.get("perturbation_digest"))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad poison manifest ({e})") from e


def select_poison_ids(train_set: Dataset, target_label: int, count: int, seed: int) -> np.ndarray:
    """Seeded choice of count target-class ids, returned sorted."""
    target = label_vector(target_label, train_set.labels.shape[1])
    pool = train_set.ids[train_set.class_indices(target)]
    if count > pool.size:
        raise ArgumentError(f"poison_count {count} exceeds the {pool.size} target-class training images")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=count, replace=False)) if count else np.zeros(0, np.int64)


def craft_poisoned_set(train_set: Dataset, plan: PoisonPlan) -> tuple[Dataset, PoisonManifest]:
    """
    Patch the trigger onto M selected target-class images, after adding their perturbation if any.

    Labels, ids and every other sample are left as they are.

    Returns:
        Tuple of (poisoned train set, manifest)
    """
    ids = select_poison_ids(train_set, plan.target_label, plan.poison_count, plan.selection_seed)
    manifest = PoisonManifest(ids.tolist(), plan.echo())
    if ids.size == 0:
        return train_set, manifest
    rows = train_set.index_of(ids)
    x = train_set.images[rows]
    if plan.perturbations is not None:
        plan.perturbations.assert_within_budget()
        eta = np.stack([plan.perturbations.lookup(int(i)) for i in ids])
        x = np.clip(x + eta, 0.0, 1.0)
    poisoned = train_set.with_images(rows, inject(x, plan.trigger))
    if not np.array_equal(poisoned.labels, train_set.labels):
        raise ArgumentError("poisoning changed a label")
    debug(f"poisoned {ids.size} images of class {plan.target_label}")
    return poisoned, manifest


# ===== Stage plumbing =====
ARTIFACTS = {
    "dataset": ("dataset.hpd", "gen-data"),
    "clean_model": ("clean.hpl", "train"),
    "trigger": ("trigger.hpt", "gen-trigger"),
    "perturbations": ("perturb.hpe", "gen-perturb"),
    "poisoned_train": ("poisoned_train.hpd", "poison"),
    "manifest": ("manifest.json", "poison"),
    "backdoored_model": ("backdoored.hpl", "train"),
}
STAGE_REPORTS = ("gen_data", "train", "gen_trigger", "gen_perturb", "poison", "train_victim", "eval", "defend")
PERTURBED_METHODS = ("tri_noise", "tri_adv", "ours")


def artifact_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / ARTIFACTS[name][0]


def surrogate_path(cfg: RunConfig, index: int) -> Path:
    return Path(cfg.out_dir) / f"surrogate_{index}.hpl"


def _artifact_file(cfg: RunConfig, name: str) -> Path:
    if name.startswith("surrogate_"):
        return surrogate_path(cfg, int(name.rsplit("_", 1)[1]))
    return artifact_path(cfg, name)


def _need(cfg: RunConfig, name: str) -> Path:
    return require(artifact_path(cfg, name), ARTIFACTS[name][1])


def _stage(tag: str, report_name: str):
    """Wrap a stage body: tag HplErrors with the stage, time it, write stage_<report_name>.json."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(cfg: RunConfig, *args, **kwargs) -> dict:
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            status(f"🚀 {tag}: {report_name.replace('_', ' ')}")
            start = time.perf_counter()
            try:
                report = fn(cfg, *args, **kwargs)
            except StageError:
                raise
            except HplError as e:
                status(f"❌ {tag} failed: {e}")
                raise StageError(tag, e) from e
            report["stage"] = tag
            report["seconds"] = round(time.perf_counter() - start, 3)
            write_json(Path(cfg.out_dir) / f"stage_{report_name}.json", report)
            status(f"✅ {tag} done ({report['seconds']:.1f}s)")
            return report
        return run
    return wrap


def _load_split(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    train_set, query, database = load_datasets(_need(cfg, "dataset"))
    return train_set, query, database


def _load_surrogates(cfg: RunConfig) -> list[HashModel]:
    return [load_checkpoint(require(surrogate_path(cfg, i), "train"), expected=sc)
            for i, sc in enumerate(cfg.surrogate_configs())]


# ===== Stages =====
@_stage("gen-data", "gen_data")
def stage_gen_data(cfg: RunConfig) -> dict:
    # a new dataset starts a new run: earlier stage reports no longer apply
    for old in sorted(Path(cfg.out_dir).glob("stage_*.json")):
        debug(f"removing stale {old.name}")
        old.unlink()
    splits = synthesize_dataset(cfg.dataset, cfg.seeds.data)
    save_datasets(artifact_path(cfg, "dataset"), list(splits))
    return {"sizes": {d.role: len(d) for d in splits}, "classes": cfg.dataset.classes, "wrote": ["dataset"]}


@_stage("train", "train")
def _train_clean(cfg: RunConfig) -> dict:
    train_set, _, _ = _load_split(cfg)
    schedule = cfg.train_schedule()
    clean, trace = train(HashModel.init(cfg.victim_config()), train_set, schedule, cfg.loss, desc="clean")
    save_checkpoint(clean, artifact_path(cfg, "clean_model"))
    surrogate_losses = []
    for i, sc in enumerate(cfg.surrogate_configs()):
        model, strace = train(HashModel.init(sc), train_set, schedule, cfg.loss, desc=f"surrogate {i}")
        save_checkpoint(model, surrogate_path(cfg, i))
        surrogate_losses.append(strace[-1] if strace else None)
    return {"clean_final_loss": trace[-1] if trace else None, "surrogate_final_losses": surrogate_losses,
            "wrote": ["clean_model", *(f"surrogate_{i}" for i in range(len(surrogate_losses)))]}


@_stage("train", "train_victim")
def _train_victim(cfg: RunConfig) -> dict:
    if cfg.method == "none":
        return {"skipped": True}
    (poisoned,) = load_datasets(_need(cfg, "poisoned_train"))
    victim, trace = train(HashModel.init(cfg.victim_config()), poisoned, cfg.train_schedule(), cfg.loss, desc="victim")
    save_checkpoint(victim, artifact_path(cfg, "backdoored_model"))
    return {"victim_final_loss": trace[-1] if trace else None, "wrote": ["backdoored_model"]}


def stage_train(cfg: RunConfig, poisoned: bool = False) -> dict:
    """Train the clean model and surrogates, or with poisoned=True the victim on the poisoned set."""
    return _train_victim(cfg) if poisoned else _train_clean(cfg)


@_stage("gen-trigger", "gen_trigger")
def stage_gen_trigger(cfg: RunConfig) -> dict:
    train_set, _, _ = _load_split(cfg)
    surrogates = _load_surrogates(cfg)
    trigger, trace = generate_trigger_with_trace(surrogates, train_set, cfg.target_vector(),
                                                 cfg.trigger_opt(), cfg.initial_trigger())
    save_trigger(trigger, artifact_path(cfg, "trigger"))
    return {"size": trigger.size, "location": trigger.location, "blend": trigger.blend,
            "final_distance": trace[-1] if trace else None, "wrote": ["trigger"]}


@_stage("gen-perturb", "gen_perturb")
def stage_gen_perturb(cfg: RunConfig) -> dict:
    if cfg.method not in PERTURBED_METHODS:
        return {"skipped": True, "method": cfg.method}
    train_set, _, _ = _load_split(cfg)
    ids = select_poison_ids(train_set, cfg.poison.target_label, cfg.poison.poison_count, cfg.seeds.selection)
    budget = cfg.budget
    if ids.size == 0:
        ps = PerturbationSet(ids, np.zeros((0, *train_set.dims)), budget.epsilon)
    elif cfg.method == "tri_noise":
        ps = uniform_noise_perturbations(ids, train_set.dims, budget.epsilon, cfg.seeds.perturb)
    else:
        images = train_set.images[train_set.index_of(ids)]
        targets = list(zip(ids.tolist(), images))
        surrogates = _load_surrogates(cfg)
        if cfg.method == "tri_adv":
            ps = adversarial_perturbation_set(surrogates, targets, budget)
        else:
            ps = confusing_perturbations(surrogates, targets, cfg.poison.lam, budget, cfg.seeds.perturb)
    ps.assert_within_budget()
    save_perturbations(ps, artifact_path(cfg, "perturbations"))
    report = {"method": cfg.method, "count": len(ps),
              "max_abs": float(np.max(np.abs(ps.etas))) if len(ps) else 0.0, "wrote": ["perturbations"]}
    if len(ps) >= 2 and cfg.method != "tri_noise":
        x = np.clip(train_set.images[train_set.index_of(ps.ids)] + ps.etas, 0.0, 1.0)
        report["dispersion"] = mean_distance(distance_histogram(hash_forward(surrogates[0], x)))
    return report


@_stage("poison", "poison")
def stage_poison(cfg: RunConfig) -> dict:
    if cfg.method == "none":
        return {"skipped": True}
    train_set, _, _ = _load_split(cfg)
    trigger_file = _need(cfg, "trigger")
    perturbations, perturb_digest = None, None
    if cfg.method in PERTURBED_METHODS:
        perturb_file = _need(cfg, "perturbations")
        perturbations = load_perturbations(perturb_file)
        perturb_digest = file_digest(perturb_file)
    plan = PoisonPlan(cfg.poison.target_label, cfg.poison.poison_count, load_trigger(trigger_file),
                      perturbations, cfg.poison.lam, cfg.seeds.selection)
    poisoned, manifest = craft_poisoned_set(train_set, plan)
    manifest = replace(manifest, trigger_digest=file_digest(trigger_file), perturbation_digest=perturb_digest)
    save_datasets(artifact_path(cfg, "poisoned_train"), [poisoned])
    write_json(artifact_path(cfg, "manifest"), manifest.to_dict())
    return {"poisoned": len(manifest.poisoned_ids), "target_label": cfg.poison.target_label,
            "wrote": ["poisoned_train", "manifest"]}


@_stage("eval", "eval")
def _eval_body(cfg: RunConfig, plot: bool = False) -> dict:
    _, query, database = _load_split(cfg)
    trigger = load_trigger(_need(cfg, "trigger"))
    target = cfg.target_vector()
    clean = load_checkpoint(_need(cfg, "clean_model"), expected=cfg.victim_config())
    clean_report, curve = evaluate_model(clean, query, database, trigger, target, cfg.eval)
    report = {"clean": clean_report.to_dict()}
    primary = clean
    hist = clean_report.distance_histogram
    if cfg.method != "none":
        backdoored = load_checkpoint(_need(cfg, "backdoored_model"), expected=cfg.victim_config())
        bd_report, curve = evaluate_model(backdoored, query, database, trigger, target, cfg.eval)
        report["backdoored"] = bd_report.to_dict()
        primary, hist = backdoored, bd_report.distance_histogram
    out = Path(cfg.out_dir)
    write_pr_csv(curve, out / "pr_curve.csv")
    write_hist_csv(hist, out / "hist.csv")
    dump_database_csv(encode_database(primary, database), out / "codes.csv")
    if plot:
        plot_metrics(curve, hist, out)
    return report


def stage_eval(cfg: RunConfig, plot: bool = False) -> dict:
    """Evaluate clean (and backdoored) models, then refresh experiment_report.json."""
    report = _eval_body(cfg, plot=plot)
    assemble_report(cfg)
    return report


def _retrieval_scores(cfg: RunConfig, model: HashModel, query: Dataset, database: Dataset,
                      trigger: TriggerSpec) -> tuple[float, float]:
    db = encode_database(model, database)
    return (map_score(model, query, db, cfg.eval.top_n),
            tmap_score(model, query, trigger, cfg.target_vector(), db, cfg.eval.top_n,
                       cfg.eval.exclude_target_queries))


@_stage("defend", "defend")
def _defend_body(cfg: RunConfig) -> dict:
    if cfg.method == "none":
        return {"skipped": True}
    train_set, query, database = _load_split(cfg)
    (poisoned,) = load_datasets(_need(cfg, "poisoned_train"))
    manifest = PoisonManifest.from_dict(read_json(_need(cfg, "manifest")))
    trigger = load_trigger(_need(cfg, "trigger"))
    victim = load_checkpoint(_need(cfg, "backdoored_model"), expected=cfg.victim_config())
    out = Path(cfg.out_dir)
    d = cfg.defenses
    report: dict = {}

    if d.spectral:
        subset = poisoned.subset(poisoned.class_indices(cfg.target_vector()))
        remove = default_remove_count(len(manifest.poisoned_ids), d.remove_multiplier)
        if remove >= len(subset):
            debug(f"spectral removal capped at {len(subset) - 1} of {len(subset)} target-class samples (asked {remove})")
            remove = len(subset) - 1
        spectral = spectral_signature_filter(victim, subset, remove, manifest.poisoned_ids)
        write_spectral_csv(spectral, manifest.poisoned_ids, out / "spectral.csv")
        report["spectral"] = spectral.to_dict()
        if d.retrain_after_filter:
            filtered = poisoned.drop_ids(spectral.removed)
            retrained, _ = train(HashModel.init(cfg.victim_config()), filtered, cfg.train_schedule(),
                                 cfg.loss, desc="filtered")
            m, t = _retrieval_scores(cfg, retrained, query, database, trigger)
            report["spectral"]["retrained"] = {"map": m, "tmap": t}

    if d.prune:
        pruning = prune_dormant(victim, train_set, d.prune_counts,
                                lambda model: _retrieval_scores(cfg, model, query, database, trigger))
        write_prune_csv(pruning, out / "prune.csv")
        report["prune"] = pruning.to_dict()

    if d.dp:
        rows = []
        for sigma in d.dp_sigmas:
            model = dp_train(poisoned, cfg.train_schedule(), cfg.dp_config(sigma), cfg.victim_config(), cfg.loss)
            rows.append((float(sigma), *_retrieval_scores(cfg, model, query, database, trigger)))
        write_dp_csv(rows, out / "dp.csv")
        report["dp"] = {"rows": [list(r) for r in rows], "clip_bound": d.dp_clip}
    return report


def stage_defend(cfg: RunConfig) -> dict:
    """Run the enabled defenses against the backdoored model, then refresh experiment_report.json."""
    report = _defend_body(cfg)
    assemble_report(cfg)
    return report


# ===== Report =====
def assemble_report(cfg: RunConfig) -> dict:
    """
    Merge the stage reports present in cfg.out_dir into experiment_report.json.

    Only artifacts named by those stage reports are listed, so files left over
    from an earlier run in the same directory are ignored.

    Returns:
        The report dict (timings under "timings", artifact digests under "artifacts")
    """
    out = Path(cfg.out_dir)
    stages, timings, written = {}, {}, []
    for name in STAGE_REPORTS:
        path = out / f"stage_{name}.json"
        if path.exists():
            r = read_json(path)
            timings[name] = r.pop("seconds", None)
            r.pop("stage", None)
            written.extend(r.pop("wrote", []))
            stages[name] = r
    artifacts = {}
    for name in written:
        path = _artifact_file(cfg, name)
        if path.exists():
            artifacts[name] = {"file": path.name, "sha256": file_digest(path)}
    report = {
        "version": 1,
        "config": cfg.to_dict(),
        "metrics": stages.pop("eval", {}),
        "defenses": stages.pop("defend", {}),
        "stages": stages,
        "artifacts": artifacts,
        "timings": timings,
    }
    write_json(out / "experiment_report.json", report)
    return report


def run_pipeline(cfg: RunConfig, plot: bool = False) -> dict:
    """Every stage in order; equivalent to running the subcommands one after another."""
    stage_gen_data(cfg)
    stage_train(cfg)
    stage_gen_trigger(cfg)
    stage_gen_perturb(cfg)
    stage_poison(cfg)
    stage_train(cfg, poisoned=True)
    stage_eval(cfg, plot=plot)
    if cfg.method != "none" and cfg.defenses.any_enabled():
        stage_defend(cfg)
    return assemble_report(cfg)
