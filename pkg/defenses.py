# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Backdoor defenses: spectral-signature filtering, dormant-unit pruning, DP-SGD training."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TYPE_CHECKING

import numpy as np

from core import ArgumentError, NumericError, debug
from tensor_core import GradStore, SgdSchedule
from hash_model import GradientHook, HashModel, HashModelConfig, PairwiseLossConfig, train

if TYPE_CHECKING:
    from poison_pipeline import Dataset

# ===== Spectral signatures =====
POWER_ITERATIONS = 100
POWER_TOL = 1e-8


def top_singular_direction(features: np.ndarray, iterations: int = POWER_ITERATIONS,
                           tol: float = POWER_TOL) -> np.ndarray:
    """
    Top right-singular direction of the centered feature matrix by power iteration on its covariance.

    Starts from the covariance column of largest diagonal entry; stops after
    `iterations` steps or when the direction moves by less than tol. The sign
    is fixed so the largest-magnitude component is positive.

    Args:
        features: (n, d) feature rows
        iterations: Maximum power steps
        tol: Relative change threshold

    Returns:
        Unit vector of length d
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError(f"features must be a non-empty (n, d) matrix, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered
    v = cov[:, int(np.argmax(np.diag(cov)))].copy()
    norm = np.linalg.norm(v)
    if norm == 0:
        v = np.zeros(x.shape[1])
        v[0] = 1.0
        return v
    v /= norm
    for it in range(iterations):
        w = cov @ v
        wn = np.linalg.norm(w)
        if wn == 0:
            break
        w /= wn
        change = np.linalg.norm(w - v)
        v = w
        if change < tol:
            debug(f"power iteration converged after {it + 1} steps")
            break
    if v[int(np.argmax(np.abs(v)))] < 0:
        v = -v
    return v


def spectral_scores(features: np.ndarray) -> np.ndarray:
    """Outlier score (centered feature · top direction)^2 per row."""
    x = np.asarray(features, dtype=np.float64)
    v = top_singular_direction(x)
    return ((x - x.mean(axis=0)) @ v) ** 2


def default_remove_count(suspected: int, multiplier: float = 1.5) -> int:
    return int(math.ceil(multiplier * suspected))


@dataclass(eq=False)
class SpectralReport:
    ids: np.ndarray
    scores: np.ndarray
    removed: np.ndarray
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.isin(self.removed, self.ids).all():
            raise ArgumentError("removed ids must be a subset of scored ids")

    def to_dict(self) -> dict:
        return {"scored": int(self.ids.size), "removed": self.removed.tolist(), "counts": dict(self.counts)}


def confusion_counts(ids: np.ndarray, removed: np.ndarray, poisoned_ids: Sequence[int]) -> dict[str, int]:
    """Removed/remained tallies for clean and poisoned samples among the scored ids."""
    is_poisoned = np.isin(ids, np.asarray(poisoned_ids, dtype=np.int64))
    is_removed = np.isin(ids, removed)
    counts = {
        "clean_removed": int(np.sum(~is_poisoned & is_removed)),
        "clean_remained": int(np.sum(~is_poisoned & ~is_removed)),
        "poisoned_removed": int(np.sum(is_poisoned & is_removed)),
        "poisoned_remained": int(np.sum(is_poisoned & ~is_removed)),
    }
    if counts["poisoned_removed"] + counts["poisoned_remained"] != int(is_poisoned.sum()):
        raise NumericError("spectral confusion counts are inconsistent")
    return counts


def spectral_signature_filter(model: HashModel, class_subset: Dataset, remove_count: int,
                              poisoned_ids: Sequence[int] | None = None) -> SpectralReport:
    """
    Score samples by their projection on the top singular direction of the hash logits.

    Args:
        model: Possibly backdoored model
        class_subset: Training samples of one class
        remove_count: Number of highest-scoring samples to flag
        poisoned_ids: Ground-truth poisoned ids for the confusion counts

    Returns:
        SpectralReport; removed ids ordered by descending score, ties by id
    """
    n = len(class_subset)
    if n == 0:
        raise ArgumentError("spectral filter needs a non-empty class subset")
    if not 0 <= remove_count < n:
        raise ArgumentError(f"remove_count {remove_count} must be < subset size {n}")
    ids = np.asarray(class_subset.ids, dtype=np.int64)
    scores = spectral_scores(model.logits(class_subset.images))
    order = np.lexsort((ids, -scores))
    removed = ids[order[:remove_count]]
    counts = confusion_counts(ids, removed, poisoned_ids) if poisoned_ids is not None else {}
    return SpectralReport(ids, scores, removed, counts)


def write_spectral_csv(report: SpectralReport, poisoned_ids: Sequence[int], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    poisoned = set(int(i) for i in poisoned_ids)
    removed = set(report.removed.tolist())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "score", "removed", "is_poisoned"])
        for i, s in zip(report.ids.tolist(), report.scores.tolist()):
            w.writerow([i, repr(float(s)), int(i in removed), int(i in poisoned)])


# ===== Pruning =====
@dataclass
class PruneReport:
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    pruned_units: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": [[c, m, t] for c, m, t in self.rows]}


def dormant_order(model: HashModel, clean_set: Dataset) -> np.ndarray:
    """Last-hidden units sorted by mean |activation| on clean data, ascending (stable)."""
    acts = model.hidden_activations(clean_set.images)
    return np.argsort(np.mean(np.abs(acts), axis=0), kind="stable")


def pruned_copy(model: HashModel, units: Sequence[int]) -> HashModel:
    """Copy of model with the outgoing head weights of the given hidden units zeroed."""
    pruned = model.copy()
    if len(units):
        pruned.layers[-1].weights[:, np.asarray(units, dtype=np.int64)] = 0.0
    return pruned


def prune_dormant(model: HashModel, clean_set: Dataset, prune_counts: Sequence[int],
                  evaluate: Callable[[HashModel], tuple[float, float]]) -> PruneReport:
    """
    Cumulatively prune the least active last-hidden units and re-evaluate.

    Args:
        model: Model to prune (left unmodified)
        clean_set: Clean samples used to rank units
        prune_counts: Unit counts to evaluate; sorted and deduplicated
        evaluate: Callback returning (MAP, t-MAP) for a pruned copy

    Returns:
        PruneReport with one (count, MAP, t-MAP) row per count
    """
    width = model.config.hidden_sizes[-1] if model.config.hidden_sizes else 0
    counts = sorted(set(int(c) for c in prune_counts))
    if any(c < 0 or c > width for c in counts):
        raise ArgumentError(f"prune counts {counts} must lie in [0, {width}]")
    # no hidden layer: only the empty prune is valid
    order = dormant_order(model, clean_set) if width else np.zeros(0, dtype=np.int64)
    report = PruneReport()
    for c in counts:
        units = order[:c].tolist()
        m, t = evaluate(pruned_copy(model, units))
        report.rows.append((c, float(m), float(t)))
        report.pruned_units.append(units)
        debug(f"pruned {c}/{width} units: map={m:.4f} tmap={t:.4f}")
    return report


def write_prune_csv(report: PruneReport, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pruned_count", "map", "tmap"])
        for c, m, t in report.rows:
            w.writerow([c, repr(m), repr(t)])


# ===== Differential privacy =====
@dataclass(frozen=True)
class DpConfig:
    clip_bound: float = 0.3
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.clip_bound > 0:
            raise ArgumentError(f"clip_bound must be > 0, got {self.clip_bound}")
        if self.noise_scale < 0:
            raise ArgumentError(f"noise_scale must be >= 0, got {self.noise_scale}")


def clip_per_sample(grads: GradStore, bound: float) -> GradStore:
    """Scale each per-sample gradient so its global norm is at most bound."""
    norms = grads.sample_norms()
    # shrink slightly past bound/norm so rounding cannot land above the bound
    scale = np.minimum(1.0, bound / np.maximum(norms * (1.0 + 1e-12), np.finfo(np.float64).tiny))
    clipped = [g * scale.reshape((-1,) + (1,) * (g.ndim - 1)) for g in grads.params]
    out = GradStore(clipped, grads.input, per_sample=True)
    if np.any(out.sample_norms() > bound):
        raise NumericError(f"per-sample gradient norm exceeds clip bound {bound} after clipping")
    return out


def dp_gradient_hook(dp: DpConfig) -> GradientHook:
    """
    Per-sample clip, sum, Gaussian noise (std noise_scale * clip_bound per coordinate), divide by batch.

    Per-sample contributions are rescaled by the batch size first so the
    clipped quantity is the gradient of one sample's share of the batch loss.
    """
    rng = np.random.default_rng(dp.seed)

    def hook(per_sample: GradStore) -> GradStore:
        b = per_sample.params[0].shape[0]
        scaled = GradStore([g * b for g in per_sample.params], per_sample.input, per_sample=True)
        clipped = clip_per_sample(scaled, dp.clip_bound)
        summed = [g.sum(axis=0) for g in clipped.params]
        if dp.noise_scale > 0:
            std = dp.noise_scale * dp.clip_bound
            summed = [s + rng.normal(0.0, std, size=s.shape) for s in summed]
        return GradStore([s / b for s in summed], None, per_sample=False)

    return hook


def dp_train(train_set: Dataset, schedule: SgdSchedule, dp: DpConfig,
             model_config: HashModelConfig = HashModelConfig(),
             loss_cfg: PairwiseLossConfig = PairwiseLossConfig()) -> HashModel:
    """Train a fresh model with the DP gradient hook."""
    model, _ = train(HashModel.init(model_config), train_set, schedule, loss_cfg,
                     hook=dp_gradient_hook(dp), desc=f"dp σ={dp.noise_scale}")
    return model


def write_dp_csv(rows: Sequence[tuple[float, float, float]], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sigma", "map", "tmap"])
        for s, m, t in rows:
            w.writerow([repr(float(s)), repr(float(m)), repr(float(t))])
