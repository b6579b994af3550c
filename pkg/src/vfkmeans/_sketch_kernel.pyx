# cython: boundscheck=False, wraparound=False, cdivision=True
"""Hot loop of sketch generation: one keyed hash per (key row, id).

Must stay bit-identical to _sketch_kernel_py; both implement the same
integer-only mixer and threshold walk.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int64_t, uint16_t, uint64_t

cnp.import_array()


cdef inline uint64_t _fin(uint64_t z) nogil:
    z ^= z >> 30
    z *= <uint64_t>0xBF58476D1CE4E5B9
    z ^= z >> 27
    z *= <uint64_t>0x94D049BB133111EB
    z ^= z >> 31
    return z


cdef inline uint64_t _mix(uint64_t k0, uint64_t k1, uint64_t x) nogil:
    cdef uint64_t z = _fin(x + k0)
    return _fin(z ^ k1)


def partition_sketch_maxes(cnp.uint64_t[::1] id64,
                           cnp.int64_t[::1] assign,
                           cnp.uint64_t[:, ::1] keys,
                           cnp.uint64_t[::1] thresholds_desc,
                           int n_clusters):
    """Per (key row, cluster) max of geometric hash values; 0 for empty cells."""
    cdef Py_ssize_t n = id64.shape[0]
    cdef Py_ssize_t rows = keys.shape[0]
    cdef Py_ssize_t tlen = thresholds_desc.shape[0]
    out = np.zeros((rows, n_clusters), dtype=np.uint16)
    cdef cnp.uint16_t[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef uint64_t h53, k0, k1
    cdef int v
    cdef int64_t a
    with nogil:
        for i in range(rows):
            k0 = keys[i, 0]
            k1 = keys[i, 1]
            for j in range(n):
                h53 = _mix(k0, k1, id64[j]) >> 11
                v = 1
                while v <= tlen and h53 < thresholds_desc[v - 1]:
                    v += 1
                a = assign[j]
                if v > o[i, a]:
                    o[i, a] = <uint16_t>v
    return out


def geo_values(cnp.uint64_t[::1] id64,
               uint64_t k0,
               uint64_t k1,
               cnp.uint64_t[::1] thresholds_desc):
    """Geometric hash values of all ids under a single key."""
    cdef Py_ssize_t n = id64.shape[0]
    cdef Py_ssize_t tlen = thresholds_desc.shape[0]
    out = np.empty(n, dtype=np.uint16)
    cdef cnp.uint16_t[::1] o = out
    cdef Py_ssize_t j
    cdef uint64_t h53
    cdef int v
    with nogil:
        for j in range(n):
            h53 = _mix(k0, k1, id64[j]) >> 11
            v = 1
            while v <= tlen and h53 < thresholds_desc[v - 1]:
                v += 1
            o[j] = <uint16_t>v
    return out
