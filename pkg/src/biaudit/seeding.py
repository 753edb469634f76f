"""Deterministic seed derivation.

Every random stage of the pipeline draws from a seed derived from the
master seed plus a stage label, so adding or reordering stages never
perturbs the randomness of the others.
"""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]

_MASK63 = (1 << 63) - 1


def derive_seed(master_seed: int, *labels: object) -> int:
    """Derive a 63-bit seed from a master seed and a sequence of labels."""
    text = "|".join([str(int(master_seed))] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63
