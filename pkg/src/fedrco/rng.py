"""Counter-based random streams.

Every random draw in a run comes from a generator keyed by
``(seed, purpose, round, client)``: the purpose tag is the CRC-32 of its
name and the key is fed to :class:`numpy.random.SeedSequence` as a spawn key,
so a stream never depends on how many draws other streams made.
Client-independent streams use ``client = -1`` (stored as ``2**32 - 1``).
"""
from __future__ import annotations

import zlib

import numpy as np

NO_CLIENT = -1
NO_ROUND = -1


def _u32(v: int) -> int:
    return v & 0xFFFFFFFF


def stream(seed: int, purpose: str, round_idx: int = NO_ROUND,
           client: int = NO_CLIENT) -> np.random.Generator:
    tag = zlib.crc32(purpose.encode("utf-8"))
    key = (tag, _u32(round_idx), _u32(client))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))
