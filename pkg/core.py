# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Core utilities shared by every hpl module: env switches, errors, artifact IO."""

from __future__ import annotations

import os, json, struct, hashlib
from pathlib import Path

import numpy as np

# ===== Env switches =====
def debug_enabled() -> bool:
    return os.getenv("HPL_DEBUG") == "1"

def quiet() -> bool:
    return os.getenv("HPL_QUIET") == "1"

def debug(msg: str) -> None:
    if debug_enabled():
        print(f"[DEBUG] {msg}")

def status(msg: str) -> None:
    """Print a user-facing status line unless HPL_QUIET=1."""
    if not quiet():
        print(msg, flush=True)

def thread_cap(requested: int) -> int:
    """
    Clamp a requested worker count to HPL_THREADS.

    Args:
        requested: Worker count asked for on the command line

    Returns:
        Effective worker count (at least 1)
    """
    cap = os.getenv("HPL_THREADS", "").strip()
    n = max(1, int(requested))
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            debug(f"ignoring non-integer HPL_THREADS={cap!r}")
    return n

# ===== Errors =====
class HplError(Exception):
    """Root of every error raised by hpl."""

class ShapeError(HplError, ValueError):
    pass

class ArgumentError(HplError, ValueError):
    pass

class NumericError(HplError, ArithmeticError):
    pass

class StateError(HplError, RuntimeError):
    pass

class FormatError(HplError, ValueError):
    pass

class ConfigMismatchError(FormatError):
    pass

class ConfigError(HplError):
    pass

class MissingArtifactError(HplError):
    def __init__(self, artifact: str | os.PathLike, stage: str):
        super().__init__(f"missing artifact {artifact}: run stage `{stage}` first")
        self.artifact = str(artifact)
        self.stage = stage

    def __reduce__(self):
        return (self.__class__, (self.artifact, self.stage))

class StageError(HplError):
    """An HplError raised inside a pipeline stage, tagged with that stage."""
    def __init__(self, stage: str, cause: HplError):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause

    def __reduce__(self):
        return (self.__class__, (self.stage, self.cause))

STAGES = ("gen-data", "train", "gen-trigger", "gen-perturb", "poison", "eval", "defend", "sweep")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_STAGE_BASE = 10

def exit_code_for(err: BaseException) -> int:
    """
    Map an exception to the documented process exit code.

    Args:
        err: Exception that reached the entry point

    Returns:
        0 never; 2 config, 3 missing artifact, 10+stage index, 1 otherwise
    """
    if isinstance(err, StageError):
        if isinstance(err.cause, MissingArtifactError):
            return EXIT_MISSING
        if err.stage in STAGES:
            return EXIT_STAGE_BASE + STAGES.index(err.stage)
        return EXIT_ERROR
    if isinstance(err, ConfigError):
        return EXIT_USAGE
    if isinstance(err, MissingArtifactError):
        return EXIT_MISSING
    return EXIT_ERROR

def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or Inf")
    return arr

# ===== Versioned binary artifacts =====
# layout: magic(4) | uint32 LE header length | UTF-8 JSON header | float64 LE arrays
_HEADER_LEN = struct.Struct("<I")
FORMAT_VERSION = 1

def write_artifact(path: str | os.PathLike, magic: bytes, header: dict, arrays: list[np.ndarray]) -> None:
    """
    Write a versioned binary artifact.

    Args:
        path: Destination file
        magic: 4-byte format tag (e.g. b'HPL1')
        header: JSON-serializable scalar fields; shapes are added automatically
        arrays: Arrays stored as little-endian float64 in the given order
    """
    if len(magic) != 4:
        raise ArgumentError(f"magic must be 4 bytes, got {magic!r}")
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["shapes"] = [list(np.shape(a)) for a in arrays]
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(_HEADER_LEN.pack(len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

def read_artifact(path: str | os.PathLike, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    """
    Read an artifact written by write_artifact.

    Args:
        path: Source file
        magic: Expected 4-byte format tag

    Returns:
        Tuple of (header dict, list of float64 arrays in stored order)

    Raises:
        FormatError: wrong magic, unsupported version, truncated or trailing bytes
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: cannot read ({e})") from e
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    (hlen,) = _HEADER_LEN.unpack_from(raw, 4)
    if len(raw) < 8 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} not supported (expected {FORMAT_VERSION})")
    arrays = []
    offset = 8 + hlen
    for shape in header.get("shapes", []):
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    return header, arrays

# ===== Digests / JSON =====
def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

def write_json(path: str | os.PathLike, payload: dict) -> None:
    """Write JSON deterministically (sorted keys, fixed indent, trailing newline)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")

def read_json(path: str | os.PathLike) -> dict:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from e

def require(path: str | os.PathLike, stage: str) -> Path:
    """Return path if it exists, else raise MissingArtifactError naming the producing stage."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(p, stage)
    return p
