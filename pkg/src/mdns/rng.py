"""Named, counter-based random streams.

Every random draw in a run comes from ``stream(seed, tag, *index)``: a Philox
generator keyed by the run seed, a purpose tag and integer indices (step,
chain, ...). Identical configs therefore give identical draws regardless of
call order elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(tag_id(tag), *(int(i) for i in index)))
    return np.random.Generator(np.random.Philox(ss))


def state_digest(rng: np.random.Generator) -> str:
    """Short hex digest of a generator state (recorded in checkpoints)."""
    st = rng.bit_generator.state
    return format(zlib.crc32(repr(sorted(st.items())).encode()), "08x")
