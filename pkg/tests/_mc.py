"""Shared Monte Carlo decode experiments.

The stream labels and trial counts here are fixed; the module tests and the
acceptance suite both read the same memoized draws, so they always agree on
the outcome and the full computation happens once per session.
"""

import functools

import numpy as np

from vfkmeans.core import Seed
from vfkmeans.rng import StreamKey
from vfkmeans.sketch import _pow_table, calibrate_xi, sample_max_values


@functools.lru_cache(maxsize=None)
def decode_trials(n_items: int, rows: int, gamma: float, trials: int,
                  label: bytes) -> np.ndarray:
    """Relative errors of `trials` independent sketch-column decodes."""
    stream = StreamKey.from_seed(Seed(0), b"mc.decode|" + label)
    vals = sample_max_values(n_items, trials * rows, gamma,
                             stream).reshape(trials, rows)
    xi = calibrate_xi(gamma, rows)
    z = _pow_table(gamma, int(vals.max()))[vals]
    est = xi * rows / z.sum(axis=1)
    return (est - n_items) / n_items


def accuracy_within_3pct() -> tuple:
    """(hits, trials) for N=1e5, M=4096 decodes within 3% relative error."""
    rel = decode_trials(100_000, 4096, 1.0, 200,
                        b"decode-accuracy-100000-4096")
    return int((np.abs(rel) <= 0.03).sum()), rel.size


def small_sketch_rmse() -> float:
    """RMSE of N=1e3, M=256 decodes over 200 trials."""
    rel = decode_trials(1_000, 256, 1.0, 200, b"decode-rmse-1000-256")
    return float(np.sqrt((rel**2).mean()))
