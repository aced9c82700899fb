# Copyright (c) 2025 HPL Contributors
# Licensed under the MIT License. See LICENSE file in the project root for details.

"""Environment diagnostics command."""

from __future__ import annotations

import os
import sys
import platform
import importlib.metadata as _ilmd

from core import thread_cap


def _version(dist: str) -> str | None:
    try:
        return _ilmd.version(dist)
    except _ilmd.PackageNotFoundError:
        return None


def cmd_doctor() -> None:
    """
    Check the numeric stack, optional extras and HPL_* switches.

    Displays checkmarks for working components and suggestions for fixing issues.
    """
    print("🩺 hpl doctor\n")
    def mark(ok: bool) -> str: return "✅" if ok else "  "
    print(f"{mark(True)} Python    : {sys.version.split()[0]} ({platform.machine()})")
    try:
        import numpy as np
        popcount = hasattr(np, "bitwise_count")
        print(f"{mark(True)} numpy     : {np.__version__}")
        print(f"{mark(popcount)} popcount  : {'np.bitwise_count' if popcount else 'MISSING (needs numpy >= 2.0)'}")
    except Exception as e:
        print(f"{mark(False)} numpy     : (import failed) {e}")
    for dist, role in (("tqdm", "progress bars"), ("matplotlib", "optional, eval --plot"),
                       ("pytest", "tests"), ("hypothesis", "property tests")):
        ver = _version(dist)
        print(f"{mark(ver is not None)} {dist:<10}: {ver or 'MISSING'} ({role})")
    for var in ("HPL_DEBUG", "HPL_QUIET", "HPL_THREADS"):
        val = os.getenv(var)
        print(f"   {var:<11}: {val if val is not None else '(unset)'}")
    print(f"   worker cap : {thread_cap(os.cpu_count() or 1)} of {os.cpu_count()} cores")
    print("\nIf numpy and popcount show a checkmark✅, you're good to run `hpl pipeline`")
