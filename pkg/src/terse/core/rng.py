"""Counter-based random streams.

Every stochastic draw in the package is addressed by a tuple of integers
(master seed, stream id, counter, ...) rather than by the position of the
draw in a global sequence. Reordering evaluations therefore never changes
the values a given draw returns.
"""
import zlib

import numpy as np


def stream_id(name):
    """Stable 32-bit id for a string label (layer names, phase names)."""
    return zlib.crc32(name.encode("utf-8"))


def keyed_rng(*key):
    """Return a Philox generator keyed on the integer tuple ``key``."""
    words = [int(k) & 0xFFFFFFFF for k in key]
    seq = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(seq))
