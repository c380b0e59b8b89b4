# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""

import numpy as np

from libc.stdint cimport int64_t, uint8_t, uint64_t

MASK64 = 0xFFFFFFFFFFFFFFFF


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = z + 0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def mix64(z):
    return _mix(<uint64_t>(z & MASK64))


def stream_key(seed, *words):
    cdef uint64_t k = _mix(<uint64_t>(seed & MASK64))
    for w in words:
        k = _mix(k ^ <uint64_t>(w & MASK64))
    return k


def hash_stream(key, start, Py_ssize_t count):
    out = np.empty(count, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef uint64_t k = <uint64_t>(key & MASK64)
    cdef uint64_t s = <uint64_t>(start & MASK64)
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            o[i] = _mix(k ^ (s + <uint64_t>i))
    return out


def ingest(uint8_t[::1] flags, const int64_t[::1] seqs, const uint64_t[::1] rounds,
           current_round, Py_ssize_t received, Py_ssize_t needed,
           uint8_t[::1] accepted):
    cdef Py_ssize_t total = flags.shape[0]
    cdef Py_ssize_t m = seqs.shape[0]
    cdef uint64_t cur = <uint64_t>current_round
    cdef Py_ssize_t i, stale = 0, dup = 0, invalid = 0
    cdef int64_t seq
    with nogil:
        for i in range(m):
            if rounds[i] != cur:
                stale += 1
                continue
            seq = seqs[i]
            if seq < 0 or seq >= total:
                invalid += 1
                continue
            if flags[seq]:
                dup += 1
                continue
            flags[seq] = 1
            accepted[i] = 1
            received += 1
            if received >= needed:
                with gil:
                    return received, i, stale, dup, invalid
    return received, -1, stale, dup, invalid
