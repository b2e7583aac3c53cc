"""Named random substreams derived from a single root seed.

Every stochastic component draws from ``substream(root, "name", ...)`` so that
component-level tests and full pipeline runs see identical randomness.
"""

import hashlib

import numpy as np


def _name_entropy(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, *names: str) -> np.random.Generator:
    """Return a Generator keyed by the root seed and a path of names.

    The same (seed, names) pair always yields the same stream; distinct
    names yield statistically independent streams.
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_name_entropy(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
