# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Ablation sweeps: one pipeline run per grid point, summarized in sweep.csv."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np

from core import HplError, ConfigError, StageError, status, debug, thread_cap
from poison_pipeline import run_pipeline
from run_config import RunConfig, SWEEP_KEYS

METRIC_COLUMNS = ("map", "tmap", "clean_map", "clean_tmap")
# std columns are filled only on mean-over-target rows
SWEEP_COLUMNS = ("key", "value", *METRIC_COLUMNS, *(f"{c}_std" for c in METRIC_COLUMNS))


def parse_sweep(specs: list[str]) -> list[tuple[str, list[str]]]:
    """
    Parse repeated KEY=V1,V2,... flags into grid axes.

    Raises:
        ConfigError: malformed flag, unknown or repeated key, empty value list
    """
    axes = []
    seen = set()
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = key.strip()
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not sep or not vals:
            raise ConfigError(f"--sweep {spec!r}: expected KEY=V1,V2,...")
        if key not in SWEEP_KEYS:
            raise ConfigError(f"--sweep: unknown key {key!r}; choose from {', '.join(SWEEP_KEYS)}")
        if key in seen:
            raise ConfigError(f"--sweep: key {key!r} given twice")
        seen.add(key)
        axes.append((key, vals))
    if not axes:
        raise ConfigError("--sweep needs at least one KEY=V1,V2,... assignment")
    return axes


def sweep_points(cfg: RunConfig, axes: list[tuple[str, list[str]]]) -> list[tuple[tuple[tuple[str, str], ...], RunConfig]]:
    """Cartesian grid of overrides, each point with its own output subdirectory."""
    points = []
    for combo in product(*[[(k, v) for v in vals] for k, vals in axes]):
        point = cfg
        for k, v in combo:
            point = point.with_override(k, v)
        sub = ",".join(f"{k}={v}" for k, v in combo)
        points.append((combo, point.with_out(Path(cfg.out_dir) / sub)))
    return points


def _run_point(cfg_dict: dict) -> dict:
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        report = run_pipeline(cfg)
    except StageError:
        raise
    except HplError as e:
        raise StageError("sweep", e) from e
    metrics = report["metrics"]
    primary = metrics.get("backdoored", metrics["clean"])
    return {"map": primary["map"], "tmap": primary["tmap"],
            "clean_map": metrics["clean"]["map"], "clean_tmap": metrics["clean"]["tmap"]}


def _averaged_target_rows(keys: list[str], rows: list[dict]) -> list[dict]:
    """Mean and population std over target labels for every setting of the other keys."""
    if "target_label" not in keys:
        return []
    pos = keys.index("target_label")
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        values = row["value"].split(";")
        values[pos] = "mean"
        groups.setdefault(tuple(values), []).append(row)
    out = []
    for values, members in groups.items():
        row = {"key": ";".join(keys), "value": ";".join(values)}
        for col in METRIC_COLUMNS:
            column = np.array([m[col] for m in members])
            row[col] = float(column.mean())
            row[f"{col}_std"] = float(column.std())
        out.append(row)
    return out


def write_sweep_csv(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(SWEEP_COLUMNS))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def cmd_sweep(cfg: RunConfig, specs: list[str], jobs: int = 1) -> list[dict]:
    """
    Run the pipeline at every grid point of the --sweep axes.

    Args:
        cfg: Base config; its out_dir receives one subdirectory per point
        specs: Raw --sweep values (KEY=V1,V2,...), repeatable for a grid
        jobs: Worker processes, capped by HPL_THREADS

    Returns:
        sweep.csv rows, including mean and std over target labels when target_label is swept
    """
    axes = parse_sweep(specs)
    points = sweep_points(cfg, axes)
    keys = [k for k, _ in axes]
    workers = thread_cap(jobs)
    status(f"🚀 sweep over {' x '.join(keys)}: {len(points)} point(s), {workers} worker(s)")
    payloads = [p.to_dict() for _, p in points]
    if workers == 1:
        results = [_run_point(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, payloads))
    rows = []
    for (combo, _), res in zip(points, results):
        rows.append({"key": ";".join(keys), "value": ";".join(v for _, v in combo), **res})
        debug(f"sweep point {combo}: {res}")
    rows += _averaged_target_rows(keys, rows)
    out = Path(cfg.out_dir) / "sweep.csv"
    write_sweep_csv(rows, out)
    status(f"✅ sweep table: {out}")
    return rows
