# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Binary-code arithmetic: Hamming distances, anchor-code voting, database ranking."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from core import ShapeError, ArgumentError, FormatError

HashCode = np.ndarray  # int8 entries in {-1, +1}


def to_code(values: np.ndarray) -> HashCode:
    """Entrywise sign with the global tie rule sign(0) = +1."""
    return np.where(np.asarray(values) >= 0, 1, -1).astype(np.int8)


def is_code(values: np.ndarray) -> bool:
    v = np.asarray(values)
    return bool(np.all((v == 1) | (v == -1)))


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"code shapes {a.shape} and {b.shape} differ")
    return a, b


def hamming_distance(a: HashCode, b: HashCode) -> int:
    a, b = _check_pair(a, b)
    return int(np.count_nonzero(a != b))


def relaxed_hamming(u: np.ndarray, v: np.ndarray) -> float:
    """
    Relaxed Hamming distance (K - u·v) / 2.

    Coincides with hamming_distance when both arguments are ±1 codes.
    """
    u, v = _check_pair(u, v)
    return float((u.size - np.dot(u.astype(np.float64), v.astype(np.float64))) / 2.0)


# ===== Packed popcount scan =====
def pack_codes(codes: np.ndarray) -> np.ndarray:
    """
    Pack ±1 codes into little-endian uint64 words, one bit per +1 entry.

    Args:
        codes: (N, K) array over {-1, +1}

    Returns:
        (N, ceil(K/64)) uint64 array; padding bits are zero
    """
    codes = np.atleast_2d(np.asarray(codes))
    n, k = codes.shape
    words = -(-k // 64)
    bits = np.zeros((n, words * 64), dtype=np.uint8)
    bits[:, :k] = codes > 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return packed.view("<u8").reshape(n, words)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs integer Hamming distances between rows of a and rows of b."""
    a = np.atleast_2d(np.asarray(a))
    b = np.atleast_2d(np.asarray(b))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"code lengths {a.shape[1]} and {b.shape[1]} differ")
    pa, pb = pack_codes(a), pack_codes(b)
    x = np.bitwise_xor(pa[:, None, :], pb[None, :, :])
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class AnchorCode:
    code: HashCode
    source_count: int


def anchor_code(codes: np.ndarray) -> AnchorCode:
    """
    Component-voting anchor code: per-bit majority of the source codes.

    The result minimizes the summed Hamming distance to the sources; tied
    columns resolve to +1.

    Args:
        codes: (n, K) ±1 codes, n >= 1

    Returns:
        AnchorCode carrying the voted code and n
    """
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ArgumentError("anchor_code needs at least one code")
    votes = codes.astype(np.int64).sum(axis=0)
    return AnchorCode(code=to_code(votes), source_count=int(codes.shape[0]))


@dataclass(frozen=True, eq=False)
class CodeDatabase:
    codes: np.ndarray   # (N, K) int8
    labels: np.ndarray  # (N, C) uint8
    ids: np.ndarray     # (N,) int64

    def __post_init__(self) -> None:
        codes = np.atleast_2d(np.asarray(self.codes, dtype=np.int8))
        labels = np.atleast_2d(np.asarray(self.labels, dtype=np.uint8))
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if not (codes.shape[0] == labels.shape[0] == ids.shape[0]):
            raise ShapeError(f"row counts differ: codes={codes.shape[0]} labels={labels.shape[0]} ids={ids.shape[0]}")
        if codes.size and not is_code(codes):
            raise ArgumentError("database codes must be ±1")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "_packed", pack_codes(codes) if codes.shape[0] else np.zeros((0, 1), np.uint64))

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def code_length(self) -> int:
        return int(self.codes.shape[1])

    def distances(self, query: HashCode) -> np.ndarray:
        query = np.asarray(query)
        if query.shape != (self.code_length,):
            raise ShapeError(f"query length {query.shape} does not match database K={self.code_length}")
        x = np.bitwise_xor(self._packed, pack_codes(query[None, :]))
        return np.bitwise_count(x).sum(axis=1, dtype=np.int64)

    def ranking(self, query: HashCode) -> tuple[np.ndarray, np.ndarray]:
        """Row order by (distance, id) ascending, plus the distances in that order."""
        if len(self) == 0:
            raise ArgumentError("cannot rank against an empty database")
        dist = self.distances(query)
        order = np.lexsort((self.ids, dist))
        return order, dist[order]


def rank_by_distance(query: HashCode, db: CodeDatabase, top_n: int) -> list[tuple[int, int]]:
    """
    Rank database entries by Hamming distance to the query.

    Args:
        query: K-length ±1 code
        db: Code database
        top_n: Number of results; values above N return everything

    Returns:
        List of (id, distance), distance ascending, ties by ascending id
    """
    if top_n < 1:
        raise ArgumentError(f"top_n must be >= 1, got {top_n}")
    order, dist = db.ranking(query)
    n = min(top_n, len(db))
    return [(int(db.ids[i]), int(d)) for i, d in zip(order[:n], dist[:n])]


# ===== CSV dump =====
def _code_str(code: np.ndarray) -> str:
    return "".join("+" if b > 0 else "-" for b in code)


def dump_database_csv(db: CodeDatabase, path: str | os.PathLike) -> None:
    """Write id, label_bits (semicolon-joined), code ('+'/'-' string) rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "label_bits", "code"])
        for i in range(len(db)):
            w.writerow([int(db.ids[i]), ";".join(str(int(b)) for b in db.labels[i]), _code_str(db.codes[i])])


def load_database_csv(path: str | os.PathLike) -> CodeDatabase:
    ids, labels, codes = [], [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        try:
            for row in reader:
                ids.append(int(row["id"]))
                labels.append([int(b) for b in row["label_bits"].split(";")])
                codes.append([1 if c == "+" else -1 for c in row["code"]])
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: malformed code-database row ({e})") from e
    if not ids:
        raise FormatError(f"{path}: no rows")
    return CodeDatabase(np.array(codes, np.int8), np.array(labels, np.uint8), np.array(ids, np.int64))


def encode_database(model, dataset) -> CodeDatabase:
    """Hash every image of a dataset with model (anything exposing logits()) into a CodeDatabase."""
    if len(dataset) == 0:
        return CodeDatabase(np.zeros((0, model.code_length), np.int8),
                            np.zeros((0, dataset.labels.shape[1]), np.uint8), np.zeros(0, np.int64))
    return CodeDatabase(to_code(model.logits(dataset.images)), dataset.labels, dataset.ids)
