"""Labeled sub-seed derivation.

All randomness in the package flows from one master seed; independent
streams are carved out by hashing the master seed together with a short
label, so adding a new consumer never shifts an existing stream.
"""

import hashlib


def derive_seed(master_seed: int, label: str) -> int:
    """Derive a 63-bit sub-seed from ``master_seed`` and a stream label."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
