"""Named random substreams derived from one global seed."""

import hashlib

import numpy as np


def substream(seed, purpose):
    """Return a Generator unique to ``(seed, purpose)``.

    Every consumer of randomness asks for its own named stream so that adding
    a new consumer never perturbs the draws of an existing one.
    """
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    tag = int.from_bytes(digest, "little")
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])
