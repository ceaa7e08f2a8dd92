"""Named random streams derived from one integer seed.

``stream(seed, "init")`` and ``stream(seed, "shuffle", epoch)`` never share
state, so adding draws to one stream leaves the others untouched.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = [zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
