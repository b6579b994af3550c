"""Pure numpy fallback of the sketch kernel, chunked over key rows.

Bit-identical to the Cython version: same mixer, same threshold walk of the
geometric inverse CDF.
"""

from __future__ import annotations

import numpy as np

from .rng import mix64_arr

_ROW_CHUNK = 128


def partition_sketch_maxes(id64: np.ndarray, assign: np.ndarray,
                           keys: np.ndarray, thresholds_desc: np.ndarray,
                           n_clusters: int) -> np.ndarray:
    n = id64.shape[0]
    rows = keys.shape[0]
    asc = thresholds_desc[::-1].copy()
    tlen = len(asc)
    cluster_idx = [np.flatnonzero(assign == a) for a in range(n_clusters)]
    out = np.zeros((rows, n_clusters), dtype=np.uint16)
    shift = np.uint64(11)
    for lo in range(0, rows, _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, rows)
        k0 = keys[lo:hi, 0:1]
        k1 = keys[lo:hi, 1:2]
        h53 = mix64_arr(k0, k1, id64[np.newaxis, :]) >> shift
        v = tlen - np.searchsorted(asc, h53, side="right") + 1
        for a, idx in enumerate(cluster_idx):
            if idx.size:
                out[lo:hi, a] = v[:, idx].max(axis=1)
    return out


def geo_values(id64: np.ndarray, k0: int, k1: int,
               thresholds_desc: np.ndarray) -> np.ndarray:
    asc = thresholds_desc[::-1].copy()
    h53 = mix64_arr(k0, k1, id64) >> np.uint64(11)
    v = len(asc) - np.searchsorted(asc, h53, side="right") + 1
    return v.astype(np.uint16)
