"""Counter-based randomness.

All randomness derives from one 64-bit seed through Philox4x64. The key
is ``(seed, stream)`` and the two high counter words carry the coordinates
of the draw (tensor index, block, position, ...). Streams never overlap
because draws only advance the low counter words, and any single draw can
be replayed without generating the ones before it.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# stream ids
INIT = 1
DROPOUT = 2
TOKENS = 3
COORDS = 4
PERTURB = 5


def philox(seed: int, stream: int, a: int = 0, b: int = 0) -> np.random.Generator:
    key = np.array([seed & MASK64, stream & MASK64], dtype=np.uint64)
    counter = np.array([0, 0, a & MASK64, b & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def random_tokens(seed: int, n_seqs: int, seq_len: int, vocab_size: int) -> list[np.ndarray]:
    """``n_seqs`` token sequences; sequence i only depends on (seed, i)."""
    return [
        philox(seed, TOKENS, i).integers(0, vocab_size, size=seq_len, dtype=np.int64)
        for i in range(n_seqs)
    ]
