"""Deterministic seed derivation.

Python's built-in ``hash`` is salted per process, so sub-seeds are derived
with SHA-256: runs are reproducible from the master seed alone, and parallel
execution order cannot change any random stream.
"""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, *labels: str | int) -> int:
    material = ":".join([str(master_seed), *map(str, labels)])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
