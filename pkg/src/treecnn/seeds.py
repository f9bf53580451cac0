"""Named, reproducible random substreams derived from one master seed."""
import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def seed_sequence(master, *keys):
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key(k) for k in keys))


def substream(master, *keys):
    """Generator for e.g. ``substream(seed, "probe", stage)``."""
    return np.random.default_rng(seed_sequence(master, *keys))


def subseed(master, *keys):
    """32-bit integer seed for APIs that take a plain int."""
    return int(seed_sequence(master, *keys).generate_state(1)[0])
