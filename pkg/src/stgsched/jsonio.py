"""Canonical JSON helpers shared by every stage.

All files the stages hand to each other are written through canonical_dumps
so that identical inputs produce byte-identical outputs, which the pipeline
determinism contract depends on.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def canonical_dumps(obj) -> str:
    """Serialize with sorted keys and fixed separators (no trailing spaces)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def canonical_digest(obj) -> str:
    """sha256 hex digest of the canonical serialization of ``obj``."""
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()


def stable_hash64(*parts) -> int:
    """Deterministic 64-bit hash of the string forms of ``parts``.

    Unlike builtin hash() this does not depend on PYTHONHASHSEED, so values
    derived from it are reproducible across processes and platforms.
    """
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


def stable_uniform(*parts) -> float:
    """Deterministic uniform draw in [0, 1) keyed by ``parts``."""
    return stable_hash64(*parts) / 2.0**64


def read_json(path) -> object:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_dumps(obj) + "\n", encoding="utf-8")
