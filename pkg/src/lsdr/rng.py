"""Named random substreams derived from one master seed.

Every random component draws from ``substream(master_seed, name)`` so any
stage can be re-run in isolation and whole pipelines are bit-reproducible.
Stream names are free-form strings such as ``"synth"``, ``"init"``,
``"batch"`` or ``"mc/r=17"``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 64-bit key for a stream name (platform independent)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master_seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream under ``master_seed``."""
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name)])
    return np.random.default_rng(seq)
