"""Named random substreams derived from one top-level seed.

Each consumer asks for its stream by name, so switching one subsystem off
never shifts the draws another subsystem sees.
"""
import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(key,))))
