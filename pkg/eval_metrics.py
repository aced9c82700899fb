# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Retrieval evaluation: AP/MAP, t-MAP, pooled PR curves, Hamming-distance histograms."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from core import ShapeError, ArgumentError, debug
from hamming_space import CodeDatabase, encode_database, hamming_matrix, is_code
from hash_model import HashModel, hash_forward, similarity_matrix
from attack_kit import TriggerSpec, inject

if TYPE_CHECKING:
    from poison_pipeline import Dataset


@dataclass(frozen=True)
class EvalConfig:
    top_n: int = 1000
    exclude_target_queries: bool = True
    precision_ks: tuple[int, ...] = (1, 5, 10, 50, 100)

    def __post_init__(self) -> None:
        object.__setattr__(self, "precision_ks", tuple(int(k) for k in self.precision_ks))
        if self.top_n < 1:
            raise ArgumentError(f"top_n must be >= 1, got {self.top_n}")
        if any(k < 1 for k in self.precision_ks):
            raise ArgumentError(f"precision cutoffs must be >= 1, got {self.precision_ks}")


@dataclass(frozen=True, eq=False)
class RankedRelevance:
    rel: np.ndarray
    total_relevant: int

    def __post_init__(self) -> None:
        rel = np.asarray(self.rel, dtype=np.int64).reshape(-1)
        if rel.size and not np.all((rel == 0) | (rel == 1)):
            raise ArgumentError("relevance flags must be 0 or 1")
        if self.total_relevant < 0 or int(rel.sum()) > self.total_relevant:
            raise ArgumentError(f"{int(rel.sum())} relevant hits exceed total_relevant={self.total_relevant}")
        object.__setattr__(self, "rel", rel)


def average_precision(r: RankedRelevance) -> float:
    """
    Truncated AP with the reachable-relevant normalizer min(R, N).

    AP = 1/min(R, N) * sum over relevant ranks k of precision@k; 0 when R = 0.
    """
    denom = min(r.total_relevant, r.rel.size)
    if denom == 0:
        return 0.0
    hits = np.cumsum(r.rel)
    ranks = np.arange(1, r.rel.size + 1)
    at = r.rel == 1
    return float(np.sum(hits[at] / ranks[at]) / denom)


def _relevance(codes: np.ndarray, rel_labels: np.ndarray, db: CodeDatabase,
               top_n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-query top-N relevance rows (Q, n) and total relevant counts (Q,)."""
    if codes.shape[0] == 0:
        raise ArgumentError("empty query set")
    if len(db) == 0:
        raise ArgumentError("cannot evaluate against an empty database")
    if codes.shape[1] != db.code_length:
        raise ShapeError(f"query codes have K={codes.shape[1]}, database has K={db.code_length}")
    sim = similarity_matrix(rel_labels, db.labels).astype(np.int64)
    n = min(top_n, len(db))
    rel = np.empty((codes.shape[0], n), dtype=np.int64)
    for q in range(codes.shape[0]):
        order, _ = db.ranking(codes[q])
        rel[q] = sim[q, order[:n]]
    return rel, sim.sum(axis=1)


def _mean_ap(codes: np.ndarray, rel_labels: np.ndarray, db: CodeDatabase, top_n: int) -> float:
    rel, totals = _relevance(codes, rel_labels, db, top_n)
    aps = [average_precision(RankedRelevance(rel[q], int(totals[q]))) for q in range(rel.shape[0])]
    return float(np.mean(aps))


def encode_queries(model: HashModel, queries: Dataset, trigger: TriggerSpec | None = None) -> np.ndarray:
    """Hash codes of the queries, patched with the trigger at full strength when one is given."""
    images = queries.images
    if trigger is not None:
        images = inject(images, trigger.with_blend(1.0))
    return hash_forward(model, images)


def map_score(model: HashModel, queries: Dataset, db: CodeDatabase, top_n: int = 1000) -> float:
    """Mean AP over queries; relevance means sharing at least one label with the database item."""
    if len(queries) == 0:
        raise ArgumentError("map_score needs at least one query")
    return _mean_ap(encode_queries(model, queries), queries.labels, db, top_n)


def _target_queries(queries: Dataset, target_label: np.ndarray, exclude_target: bool) -> np.ndarray:
    target = np.asarray(target_label, dtype=np.uint8)
    if target.shape != (queries.labels.shape[1],):
        raise ShapeError(f"target label length {target.shape} does not match {queries.labels.shape[1]} classes")
    if not exclude_target:
        return np.arange(len(queries))
    keep = np.nonzero(~np.all(queries.labels == target[None, :], axis=1))[0]
    debug(f"t-MAP keeps {keep.size}/{len(queries)} queries outside the target class")
    return keep


def tmap_score(model: HashModel, queries: Dataset, trigger: TriggerSpec, target_label: np.ndarray,
               db: CodeDatabase, top_n: int = 1000, exclude_target: bool = True) -> float:
    """
    MAP of triggered queries with every query's label replaced by the target label.

    Args:
        model: Model under evaluation
        queries: Clean query set
        trigger: Trigger patched at blend 1
        target_label: Multi-hot target label
        db: Encoded database
        top_n: Ranking depth
        exclude_target: Drop queries whose own label equals the target label

    Returns:
        t-MAP in [0, 1]
    """
    keep = _target_queries(queries, target_label, exclude_target)
    if keep.size == 0:
        raise ArgumentError("no queries left after excluding the target class")
    codes = encode_queries(model, queries, trigger)[keep]
    rel_labels = np.broadcast_to(np.asarray(target_label, dtype=np.uint8), (keep.size, queries.labels.shape[1]))
    return _mean_ap(codes, rel_labels, db, top_n)


@dataclass(eq=False)
class PrCurve:
    cutoffs: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    precision_at: list[tuple[int, float]] = field(default_factory=list)

    def points(self) -> list[tuple[float, float]]:
        return [(float(r), float(p)) for r, p in zip(self.recall, self.precision)]


def pr_curves(model: HashModel, queries: Dataset, db: CodeDatabase, top_n: int = 1000,
              target_label: np.ndarray | None = None, trigger: TriggerSpec | None = None,
              precision_ks: tuple[int, ...] = (1, 5, 10, 50, 100)) -> PrCurve:
    """
    Pooled precision/recall at every rank cutoff 1..N.

    Relevance uses the queries' own labels, or target_label for every query
    when given (the triggered-query view).

    Returns:
        PrCurve with per-cutoff recall/precision and precision@k for k <= N
    """
    if len(queries) == 0:
        raise ArgumentError("pr_curves needs at least one query")
    codes = encode_queries(model, queries, trigger)
    if target_label is None:
        rel_labels = queries.labels
    else:
        rel_labels = np.broadcast_to(np.asarray(target_label, dtype=np.uint8), queries.labels.shape)
    rel, totals = _relevance(codes, rel_labels, db, top_n)
    n_queries, n = rel.shape
    hits = np.cumsum(rel, axis=1).sum(axis=0).astype(np.float64)
    cutoffs = np.arange(1, n + 1)
    precision = hits / (n_queries * cutoffs)
    total = float(totals.sum())
    recall = hits / total if total > 0 else np.zeros(n)
    precision_at = [(k, float(precision[k - 1])) for k in precision_ks if k <= n]
    return PrCurve(cutoffs, recall, precision, precision_at)


def distance_histogram(codes: np.ndarray) -> np.ndarray:
    """Counts of pairwise Hamming distances 0..K over all unordered pairs."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[0] < 2:
        raise ArgumentError("distance_histogram needs at least 2 codes")
    if not is_code(codes):
        raise ArgumentError("distance_histogram expects ±1 codes")
    k = codes.shape[1]
    dist = hamming_matrix(codes, codes)
    upper = dist[np.triu_indices(codes.shape[0], 1)]
    return np.bincount(upper, minlength=k + 1).astype(np.int64)


def mean_distance(hist: np.ndarray) -> float:
    hist = np.asarray(hist)
    return float(np.dot(np.arange(hist.size), hist) / hist.sum())


@dataclass(eq=False)
class MetricsReport:
    map: float
    tmap: float
    precision_at: list[tuple[int, float]]
    pr_curve: list[tuple[float, float]]
    distance_histogram: list[int]

    def __post_init__(self) -> None:
        values = [self.map, self.tmap, *(p for _, p in self.precision_at)]
        values += [v for pt in self.pr_curve for v in pt]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ArgumentError("metrics must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "tmap": self.tmap,
            "precision_at": [[k, v] for k, v in self.precision_at],
            "pr_curve": [[r, p] for r, p in self.pr_curve],
            "distance_histogram": list(self.distance_histogram),
        }


def evaluate_model(model: HashModel, queries: Dataset, database: Dataset, trigger: TriggerSpec,
                   target_label: np.ndarray, cfg: EvalConfig = EvalConfig()) -> tuple[MetricsReport, PrCurve]:
    """
    MAP on clean queries, t-MAP on triggered ones, plus curve and histogram.

    The histogram covers the codes of the clean queries.

    Returns:
        Tuple of (MetricsReport, the clean-query PrCurve)
    """
    db = encode_database(model, database)
    curve = pr_curves(model, queries, db, cfg.top_n, precision_ks=cfg.precision_ks)
    report = MetricsReport(
        map=map_score(model, queries, db, cfg.top_n),
        tmap=tmap_score(model, queries, trigger, target_label, db, cfg.top_n, cfg.exclude_target_queries),
        precision_at=curve.precision_at,
        pr_curve=curve.points(),
        distance_histogram=distance_histogram(encode_queries(model, queries)).tolist(),
    )
    return report, curve


# ===== Export =====
def write_pr_csv(curve: PrCurve, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cutoff", "recall", "precision"])
        for c, r, p in zip(curve.cutoffs, curve.recall, curve.precision):
            w.writerow([int(c), repr(float(r)), repr(float(p))])


def write_hist_csv(hist: np.ndarray | list[int], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["distance", "count"])
        for d, c in enumerate(hist):
            w.writerow([d, int(c)])


def plot_metrics(curve: PrCurve, hist: np.ndarray | list[int], out_dir: str | os.PathLike) -> list[Path]:
    """Render pr_curve.png and hist.png; matplotlib is imported only here."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(curve.recall, curve.precision)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(out_dir / "pr_curve.png")
    plt.close(fig)
    written.append(out_dir / "pr_curve.png")

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(np.arange(len(hist)), hist)
    ax.set_xlabel("Hamming distance")
    ax.set_ylabel("pairs")
    fig.tight_layout()
    fig.savefig(out_dir / "hist.png")
    plt.close(fig)
    written.append(out_dir / "hist.png")
    return written
