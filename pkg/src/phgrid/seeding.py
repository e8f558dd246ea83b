"""Named random streams derived from one run seed."""
from __future__ import annotations

import hashlib

import numpy as np


def role_key(role: str) -> int:
    return int.from_bytes(hashlib.sha256(role.encode()).digest()[:8], "little")


def stream(seed: int, role: str) -> np.random.Generator:
    """Generator for ``role``; the stream id is ``(seed, sha256(role)[:8])``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), role_key(role)]))
