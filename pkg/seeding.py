"""Named random substreams derived from one master seed.

Every consumer of randomness asks for its own stream by name, so adding a
draw in one place never shifts the numbers seen anywhere else.
"""

import hashlib

import numpy as np


def derive_seed(master_seed: int, *names: object) -> int:
    """Hash a master seed and a path of names into a 63-bit seed."""
    key = "/".join([str(int(master_seed))] + [str(name) for name in names])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def substream(master_seed: int, *names: object) -> np.random.Generator:
    """Independent generator for the stream identified by ``names``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, *names)))
