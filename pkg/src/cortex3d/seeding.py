"""Deterministic RNG derivation.

Every random choice in the library flows from one integer seed. Sub-streams
are derived with numpy's SeedSequence, using crc32 to map string path
components to stable integers, so the same (seed, path) always yields the
same generator on every platform.
"""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Generator for the sub-stream identified by ``path`` under ``seed``.

    ``path`` components may be ints or strings, e.g.
    ``derive_rng(7, "cae", layer_index, epoch)``.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.default_rng(ss)
