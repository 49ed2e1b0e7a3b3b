"""Hierarchical seed derivation.

Every random stream in a run is derived from one master seed plus a path of
purpose labels, e.g. ``derive_seed(master, "trial", grid_index, reinit, k)``.
The derivation hashes the canonical text ``"<master>/<label>/<label>..."``
with SHA-256 and keeps the first 8 bytes (little-endian) as an unsigned
64-bit seed. Distinct label paths therefore give independent streams and
adding grid points or workers never shifts an existing stream.
"""

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _label(part):
    if isinstance(part, float):
        # floats are keyed by their shortest repr so 0.1 and 0.10000000000000001 agree
        return repr(float(part))
    return str(part)


def derive_seed(master, *labels):
    text = "/".join([str(int(master) & SEED_MASK)] + [_label(p) for p in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master, *labels):
    """A fresh ``numpy.random.Generator`` for the labelled stream."""
    return np.random.default_rng(derive_seed(master, *labels))
