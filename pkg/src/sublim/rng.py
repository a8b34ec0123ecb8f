"""Named, independent random streams derived from one run seed."""
import zlib

import numpy as np


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Generator for ``purpose`` (e.g. ``"init"``, ``"noise"``) under ``seed``.

    Streams for different purposes never share draws, so adding draws to one
    stage cannot perturb another.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode()), *map(int, extra)]
    return np.random.default_rng(np.random.SeedSequence(key))
