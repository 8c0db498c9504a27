"""Deterministic random streams.

A stream is identified by ``(master seed, purpose tag, index...)``: the tag
is hashed with CRC-32 and, together with the indices, becomes the
``spawn_key`` of a :class:`numpy.random.SeedSequence` whose entropy is the
master seed. Work is split into fixed-size chunks with one stream per
chunk, so results do not depend on how chunks are spread over workers.
"""

from __future__ import annotations

import zlib

import numpy as np

CHUNK = 4096


def tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag_key(tag), *map(int, index)))
    return np.random.Generator(np.random.PCG64(ss))


def chunks(n: int, chunk: int = CHUNK):
    """(chunk index, start, stop) covering ``range(n)``."""
    for i, start in enumerate(range(0, n, chunk)):
        yield i, start, min(start + chunk, n)
