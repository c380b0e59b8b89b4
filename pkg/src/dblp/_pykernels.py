"""Reference (non-compiled) implementations of the hot simulation kernels.

Every function here has a twin in ``_kernels.pyx`` with an identical
signature and bit-identical results; ``dblp.kernels`` picks one at import.
"""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_C1 = 0xBF58476D1CE4E5B9
MIX_C2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 output step applied to a single 64-bit word."""
    z = (z + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX_C1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_C2) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, *words: int) -> int:
    """Fold ``seed`` and any number of stream words into one 64-bit key."""
    k = mix64(seed & MASK64)
    for w in words:
        k = mix64(k ^ (w & MASK64))
    return k


def hash_stream(key: int, start: int, count: int) -> np.ndarray:
    """Return ``mix64(key ^ c)`` for counters ``c`` in ``[start, start + count)``."""
    with np.errstate(over="ignore"):
        z = np.arange(count, dtype=np.uint64) + np.uint64(start & MASK64)
        z ^= np.uint64(key & MASK64)
        z += np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_C1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_C2)
        z ^= z >> np.uint64(31)
    return z


def ingest(flags, seqs, rounds, current_round, received, needed, accepted):
    """Feed a batch of arriving chunk headers into a receiver bitmap.

    ``flags`` (uint8, one entry per chunk) and ``accepted`` (uint8, one entry
    per datagram) are written in place. Processing halts on the datagram that
    brings ``received`` up to ``needed``.

    Returns ``(received, stop_index, stale, duplicates, invalid)`` where
    ``stop_index`` is -1 if the threshold was not reached.
    """
    total = len(flags)
    fl = memoryview(flags).cast("B")
    acc = memoryview(accepted).cast("B")
    stale = dup = invalid = 0
    cur = int(current_round)
    for i, (seq, rnd) in enumerate(zip(seqs.tolist(), rounds.tolist())):
        if rnd != cur:
            stale += 1
            continue
        if seq < 0 or seq >= total:
            invalid += 1
            continue
        if fl[seq]:
            dup += 1
            continue
        fl[seq] = 1
        acc[i] = 1
        received += 1
        if received >= needed:
            return received, i, stale, dup, invalid
    return received, -1, stale, dup, invalid
