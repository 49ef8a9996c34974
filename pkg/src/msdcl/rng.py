"""Counter-based random streams.

Every random draw in the package is addressed by (seed, stream, counter
words) through Philox, so any sample's randomness can be regenerated in
isolation and there is no global RNG state. The lowest counter word is
left at zero: Philox advances it as values are drawn, so distinct
(c1, c2, c3) addresses can never collide.
"""

from __future__ import annotations

import numpy as np

# Stream identifiers (second word of the Philox key).
STREAM_LABELS = 1
STREAM_LATENT = 2
STREAM_NOISE_A = 3
STREAM_NOISE_B = 4
STREAM_PROJ = 5
STREAM_AUG = 6
STREAM_SHUFFLE = 7
STREAM_VIEWS = 8
STREAM_INIT = 9
STREAM_PROBE = 10

_U64 = np.uint64


def stream(seed: int, stream_id: int, c1: int = 0, c2: int = 0, c3: int = 0) -> np.random.Generator:
    """Return a Generator for the (seed, stream_id, c1, c2, c3) address."""
    key = np.array([_U64(seed), _U64(stream_id)], dtype=np.uint64)
    counter = np.array([_U64(0), _U64(c1), _U64(c2), _U64(c3)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
