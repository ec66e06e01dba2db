"""Seed derivation shared by every randomized component.

All randomness in a run is derived from one master seed plus string labels,
so two runs with the same configuration are bit-identical.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a master seed and a label path."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_bytes(n: int, *parts) -> bytes:
    """Stable byte string (counter-mode SHA-256 expansion)."""
    text = "/".join(str(p) for p in parts).encode("utf-8")
    out = b""
    counter = 0
    while len(out) < n:
        out += hashlib.sha256(counter.to_bytes(4, "little") + text).digest()
        counter += 1
    return out[:n]
