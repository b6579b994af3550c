"""Differentially private FM sketches over a party's cluster partition.

A sketch cell stores the maximum geometric hash value over a set of user
ids. Privacy comes from two floors applied to that maximum: `phantoms`
synthetic draws mixed into every cell, and a hard minimum `value_floor`.
Cardinalities are decoded with a debiased harmonic estimator.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import InvalidParameter, Seed
from .rng import (
    HASH_VALUE_CAP,
    HashKey,
    StreamKey,
    geometric_thresholds,
    id_digests,
    keys_to_array,
)

_CEIL_TOL = 1e-9

# Cardinalities the decoder calibration must cover.
XI_CARDINALITY_GRID = (100, 300, 1_000, 3_000, 10_000, 30_000,
                       100_000, 300_000, 1_000_000)

# Multiplier on the per-point sample budget used by compute_xi; chosen so the
# calibration noise (~0.05% std) sits well inside the 0.5% bias band.
_XI_SAMPLES_PER_POINT = 1 << 22

_XI_SEED = Seed(0x5EED_CA11_B007_0001)


def _ceil_int(x: float) -> int:
    # tolerate float error just below an exact integer
    return int(math.ceil(x - _CEIL_TOL))


def phantom_count(eps_unit: float) -> int:
    """Number of synthetic draws mixed into every sketch cell."""
    if math.isinf(eps_unit):
        return 0
    if not (eps_unit > 0):
        raise InvalidParameter(f"eps_unit must be positive, got {eps_unit}")
    return _ceil_int(1.0 / math.expm1(eps_unit))


def floor_value(eps_unit: float, gamma: float) -> int:
    """Hard minimum reported by any sketch cell."""
    if math.isinf(eps_unit):
        return 0
    if not (eps_unit > 0):
        raise InvalidParameter(f"eps_unit must be positive, got {eps_unit}")
    # log base (1+gamma) of 1 / (1 - e^{-eps_unit})
    return _ceil_int(-math.log(-math.expm1(-eps_unit)) / math.log1p(gamma))


@dataclass(frozen=True)
class SketchParams:
    """Shape and privacy parameters of one party's sketch set.

    `eps_unit` is the per-repetition budget: the encoding budget shrinks by
    4 * sqrt(rows * ln(1/delta_encode)) because all `rows` repetitions see the
    same data. `eps_encode`/`delta_encode` are kept for ledger bookkeeping and
    are not needed to decode.
    """

    rows: int
    gamma: float
    eps_unit: float
    eps_encode: float = float("nan")
    delta_encode: float = float("nan")
    non_private: bool = False

    def __post_init__(self):
        if self.rows < 1:
            raise InvalidParameter(f"rows must be >= 1, got {self.rows}")
        if not (self.gamma > 0):
            raise InvalidParameter(f"gamma must be positive, got {self.gamma}")
        if self.non_private:
            if not math.isinf(self.eps_unit):
                raise InvalidParameter("non_private requires eps_unit = inf")
        elif not (self.eps_unit > 0 and math.isfinite(self.eps_unit)):
            raise InvalidParameter(
                f"eps_unit must be positive and finite, got {self.eps_unit}")

    @classmethod
    def from_budget(cls, rows: int, gamma: float, eps_encode: float,
                    delta_encode: float) -> "SketchParams":
        if not (eps_encode > 0):
            raise InvalidParameter(f"eps_encode must be positive, got {eps_encode}")
        if not (0 < delta_encode < 1):
            raise InvalidParameter(
                f"delta_encode must be in (0,1), got {delta_encode}")
        eps_unit = eps_encode / (4.0 * math.sqrt(rows * math.log(1.0 / delta_encode)))
        return cls(rows=rows, gamma=gamma, eps_unit=eps_unit,
                   eps_encode=eps_encode, delta_encode=delta_encode)

    @classmethod
    def non_private_mode(cls, rows: int, gamma: float) -> "SketchParams":
        """Floors disabled; exists for oracle tests and the non-private baseline."""
        return cls(rows=rows, gamma=gamma, eps_unit=float("inf"), non_private=True)

    @property
    def phantoms(self) -> int:
        return phantom_count(self.eps_unit)

    @property
    def value_floor(self) -> int:
        return floor_value(self.eps_unit, self.gamma)


@dataclass(frozen=True)
class Partition:
    """Disjoint id sets induced by nearest-center assignment."""

    clusters: tuple

    @classmethod
    def from_labels(cls, ids, labels) -> "Partition":
        k = int(np.max(labels)) + 1 if len(labels) else 0
        sets = [set() for _ in range(k)]
        for uid, a in zip(ids, labels):
            sets[a].add(uid)
        return cls(clusters=tuple(frozenset(s) for s in sets))

    @property
    def sizes(self) -> list:
        return [len(c) for c in self.clusters]


_HEADER = struct.Struct("<QQQdd")  # party, rows, local_k, gamma, eps_unit
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class SketchSet:
    """rows x local_k matrix of sketch values for one party's partition."""

    party: int
    values: np.ndarray
    params: SketchParams

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.params.rows:
            raise InvalidParameter("sketch values shape does not match params")
        if (not self.params.non_private and self.values.size
                and int(self.values.min()) < self.params.value_floor):
            raise InvalidParameter("sketch entries below the value floor")

    @property
    def local_k(self) -> int:
        return self.values.shape[1]

    def to_bytes(self) -> bytes:
        """Wire format: 40-byte header + row-major values, 8 bytes each, LE."""
        head = _HEADER.pack(self.party, self.params.rows, self.local_k,
                            self.params.gamma, self.params.eps_unit)
        return head + self.values.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SketchSet":
        if len(blob) < HEADER_BYTES:
            raise InvalidParameter("sketch payload shorter than its header")
        party, rows, local_k, gamma, eps_unit = _HEADER.unpack_from(blob)
        body = np.frombuffer(blob, dtype="<u8", offset=HEADER_BYTES)
        if body.size != rows * local_k:
            raise InvalidParameter(
                f"sketch payload has {body.size} values, expected {rows * local_k}")
        if body.size and int(body.max()) >= HASH_VALUE_CAP:
            raise InvalidParameter("sketch value exceeds the hash cap")
        if math.isinf(eps_unit):
            params = SketchParams.non_private_mode(rows, gamma)
        else:
            params = SketchParams(rows=rows, gamma=gamma, eps_unit=eps_unit)
        values = body.astype(np.uint16).reshape(rows, local_k)
        return cls(party=party, values=values, params=params)


# ---------------------------------------------------------------------------
# phantom draws
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _phantom_thresholds(n_phantom: int, gamma: float) -> np.ndarray:
    """Ascending u64 thresholds of the max-of-n_phantom-geometrics CDF.

    Entry v-1 holds round(P(max <= v) * 2^64), so a uniform 64-bit word h maps
    to the exact value via searchsorted(T, h, side="right") + 1.
    """
    q = 1.0 / (1.0 + gamma)
    top = (1 << 64) - 1
    out = []
    v = 1
    while v < HASH_VALUE_CAP:
        cdf = math.exp(n_phantom * math.log1p(-(q ** v)))
        t = min(int(round(cdf * 2.0 ** 64)), top)
        out.append(t)
        if t >= top:
            break
        v += 1
    return np.array(out, dtype=np.uint64)


def _phantom_values(n_phantom: int, gamma: float, words: np.ndarray) -> np.ndarray:
    if n_phantom == 0:
        return np.zeros(words.shape, dtype=np.uint16)
    table = _phantom_thresholds(n_phantom, gamma)
    v = np.searchsorted(table, words.ravel(), side="right") + 1
    return v.reshape(words.shape).astype(np.uint16)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def dpfm(ids, params: SketchParams, key: HashKey, seed: Seed) -> int:
    """Sketch one id set with one hash key.

    Returns max(phantom max, real max, value_floor); the real max is 0 for an
    empty set. In non_private mode the floors vanish and the result is exactly
    the FM maximum, so sketches of disjoint sets merge by elementwise max.
    """
    table = geometric_thresholds(params.gamma)
    ids = list(ids)
    if ids:
        vals = kernels.geo_values(id_digests(ids), key.k0, key.k1, table)
        a_real = int(vals.max())
    else:
        a_real = 0
    if params.non_private:
        return a_real
    word = StreamKey.from_seed(seed, b"sketch.phantoms").u64_block(1)
    a_phantom = int(_phantom_values(params.phantoms, params.gamma, word)[0])
    return max(a_phantom, a_real, params.value_floor)


def dpfmps_gen(points: np.ndarray, id64: np.ndarray, centers: np.ndarray,
               params: SketchParams, keys: list, seed: Seed,
               party: int = 0) -> SketchSet:
    """Generate the full sketch set for one party.

    Partitions ids by nearest center (ties to the lowest center index), then
    sketches every cluster under every hash key. Phantom draws come from a
    counter-mode stream keyed by `seed`: one 64-bit word per cell, mapped
    through the exact CDF of the max of `params.phantoms` geometric draws, so
    the output distribution matches drawing the phantoms one by one.

    Parameters
    ----------
    points : (n, m) array
        The party's local attribute columns.
    id64 : (n,) uint64 array
        Digests of the user ids, aligned with `points` rows.
    centers : (local_k, m) array
        Local cluster centers, local_k >= 2.
    keys : list of HashKey
        One per sketch row; shared verbatim by all parties.
    """
    from .clustering import assign_nearest  # sketch sits below clustering

    if centers.ndim != 2 or centers.shape[0] < 2:
        raise InvalidParameter("need at least 2 local centers")
    if len(keys) != params.rows:
        raise InvalidParameter(
            f"got {len(keys)} hash keys for {params.rows} sketch rows")
    if points.shape[0] != id64.shape[0]:
        raise InvalidParameter("points and id64 disagree on row count")

    local_k = centers.shape[0]
    assign = assign_nearest(points, centers).astype(np.int64)
    real = kernels.partition_sketch_maxes(
        np.ascontiguousarray(id64, dtype=np.uint64), assign,
        keys_to_array(keys), geometric_thresholds(params.gamma), local_k)
    if params.non_private:
        values = real
    else:
        words = StreamKey.from_seed(seed, b"sketch.phantoms").u64_block(
            params.rows * local_k).reshape(params.rows, local_k)
        values = np.maximum(real, _phantom_values(params.phantoms, params.gamma, words))
        np.maximum(values, np.uint16(params.value_floor), out=values)
    return SketchSet(party=party, values=values, params=params)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _pow_table(gamma: float, top: int) -> np.ndarray:
    return (1.0 + gamma) ** -np.arange(top + 1, dtype=np.float64)


def harmonic_decode(column, gamma: float, xi: float | None = None) -> float:
    """Decode one sketch column into a cardinality estimate.

    The estimate is xi * rows / sum((1+gamma)^-value). With xi = 1 a constant
    column of value v decodes to exactly (1+gamma)^v; the calibrated xi removes
    the estimator's multiplicative bias (see calibrate_xi).
    """
    column = np.asarray(column)
    if column.ndim != 1 or column.size == 0:
        raise InvalidParameter("column must be a non-empty 1-d array")
    if xi is None:
        xi = calibrate_xi(gamma, column.size)
    z = _pow_table(gamma, int(column.max()))[column]
    return float(xi * column.size / z.sum())


def harmonic_decode_matrix(values: np.ndarray, gamma: float,
                           xi: float | None = None) -> np.ndarray:
    """Column-wise harmonic_decode of a (rows, cells) matrix."""
    if values.ndim != 2:
        raise InvalidParameter("values must be 2-d")
    if xi is None:
        xi = calibrate_xi(gamma, values.shape[0])
    z = _pow_table(gamma, int(values.max()))[values]
    return xi * values.shape[0] / z.sum(axis=0)


def sample_max_values(n_items: int, count: int, gamma: float,
                      stream: StreamKey, start: int = 0) -> np.ndarray:
    """Draw `count` values of max-of-n_items geometric hashes, exactly.

    Inverts P(max <= t) = (1 - q^t)^n in one shot instead of hashing n items,
    which makes decoder calibration and accuracy trials O(rows) per sketch.
    """
    if n_items < 0:
        raise InvalidParameter("n_items must be nonnegative")
    if n_items == 0:
        return np.zeros(count, dtype=np.uint16)
    q = 1.0 / (1.0 + gamma)
    u = stream.uniforms(count, start)
    x = -np.expm1(np.log(u) / n_items)
    v = np.ceil(np.log(x) / math.log(q))
    return np.clip(v, 1, HASH_VALUE_CAP - 1).astype(np.uint16)


def compute_xi(gamma: float, rows: int) -> float:
    """Monte Carlo calibration of the harmonic decoder's debias constant.

    Measures the raw (xi = 1) expected estimate-to-truth ratio on a grid of
    cardinalities spanning 1e2..1e6 and returns the minimax constant
    2 / (min + max), which centers the worst-case multiplicative bias. The
    stream is fixed, so recomputing always reproduces the frozen table.
    """
    if rows < 1:
        raise InvalidParameter(f"rows must be >= 1, got {rows}")
    base = StreamKey.from_seed(
        _XI_SEED, b"sketch.xi|" + struct.pack("<dQ", gamma, rows))
    trials = max(512, -(-_XI_SAMPLES_PER_POINT // rows))
    ratios = []
    for n_items in XI_CARDINALITY_GRID:
        stream = base.child(struct.pack("<Q", n_items))
        vals = sample_max_values(n_items, trials * rows, gamma, stream)
        z = _pow_table(gamma, int(vals.max()))[vals.reshape(trials, rows)]
        est = rows / z.sum(axis=1)
        ratios.append(float(est.mean()) / n_items)
    return 2.0 / (min(ratios) + max(ratios))


@functools.lru_cache(maxsize=64)
def _computed_xi(gamma: float, rows: int) -> float:
    return compute_xi(gamma, rows)


def calibrate_xi(gamma: float, rows: int) -> float:
    """Debias constant for harmonic_decode, frozen table first.

    Table misses fall back to compute_xi (cached per process); the table is
    regenerated with `vfkm calibrate --write` and must match recomputation
    bit for bit.
    """
    from ._xi_table import XI_TABLE

    key = (float(gamma), int(rows))
    hit = XI_TABLE.get(key)
    if hit is not None:
        return hit
    return _computed_xi(*key)
