"""Deterministic seed derivation.

All randomness in the toolkit flows from one global seed. Per-sample and
per-stage seeds are derived by hashing (seed, *tags), so parallel work is
independent of scheduling order and reruns are byte-identical.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *tags: object) -> int:
    """Derive a 63-bit seed from a global seed and a tuple of tags."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little") & (2**63 - 1)


def stable_id_hash(sample_id: str) -> int:
    """Stable across processes (unlike builtin hash); used for tie-breaking."""
    return int.from_bytes(hashlib.blake2b(sample_id.encode(), digest_size=8).digest(), "little")
