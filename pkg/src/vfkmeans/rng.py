"""Counter-mode keyed randomness and the shared geometric-value hash.

All parties must hash ids to bit-identical values, and both sketch-kernel
backends must agree exactly, so the hot path is integer-only: a blake2b id
digest, a splitmix64-style keyed mixer, and a precomputed inverse-CDF
threshold table for the geometric values.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import InvalidParameter, Seed, UserId

_MASK = (1 << 64) - 1
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB

# Hash values are capped so they fit u16 storage; the cap is unreachable for
# any realistic cardinality (P < 2^-53 per element at gamma=1).
HASH_VALUE_CAP = 1 << 16


def _fin64(z: int) -> int:
    z ^= z >> 30
    z = (z * _C1) & _MASK
    z ^= z >> 27
    z = (z * _C2) & _MASK
    z ^= z >> 31
    return z


def mix64(k0: int, k1: int, x: int) -> int:
    """Keyed 64-bit mixer: two finalizer rounds keyed by a 128-bit key."""
    z = _fin64((x + k0) & _MASK)
    return _fin64(z ^ k1)


_NP_C1 = np.uint64(_C1)
_NP_C2 = np.uint64(_C2)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)


def _fin64_arr(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> _S30)
    z = z * _NP_C1
    z = z ^ (z >> _S27)
    z = z * _NP_C2
    return z ^ (z >> _S31)


def mix64_arr(k0, k1, x: np.ndarray) -> np.ndarray:
    """Vectorized mix64; k0/k1 may be scalars or arrays broadcastable to x."""
    z = _fin64_arr(np.asarray(x, dtype=np.uint64) + np.uint64(k0))
    return _fin64_arr(z ^ np.uint64(k1))


def id_digest(uid: UserId) -> int:
    """8-byte blake2b digest of an id; shared by all parties."""
    return int.from_bytes(
        hashlib.blake2b(uid, digest_size=8, person=b"vfkm.id64").digest(), "little")


def id_digests(ids) -> np.ndarray:
    return np.array([id_digest(u) for u in ids], dtype=np.uint64)


@dataclass(frozen=True)
class StreamKey:
    """128-bit key for a counter-mode uniform stream.

    Child streams are derived by label so parties, mechanisms and restarts all
    draw from independent streams without coordination.
    """

    k0: int
    k1: int

    @classmethod
    def from_seed(cls, seed: Seed, label: bytes) -> "StreamKey":
        raw = hashlib.blake2b(
            seed.value.to_bytes(8, "little") + label, digest_size=16).digest()
        return cls(int.from_bytes(raw[:8], "little"), int.from_bytes(raw[8:], "little"))

    def child(self, label) -> "StreamKey":
        if isinstance(label, int):
            label = label.to_bytes(8, "little", signed=False)
        raw = hashlib.blake2b(
            self.k0.to_bytes(8, "little") + self.k1.to_bytes(8, "little") + label,
            digest_size=16).digest()
        return StreamKey(int.from_bytes(raw[:8], "little"),
                         int.from_bytes(raw[8:], "little"))

    def u64(self, counter: int) -> int:
        return mix64(self.k0, self.k1, counter)

    def u64_block(self, count: int, start: int = 0) -> np.ndarray:
        ctr = np.arange(start, start + count, dtype=np.uint64)
        return mix64_arr(self.k0, self.k1, ctr)

    def uniform(self, counter: int) -> float:
        # (0, 1) exclusive on both ends, safe for logs
        return ((self.u64(counter) >> 11) + 0.5) * 2.0 ** -53

    def uniforms(self, count: int, start: int = 0) -> np.ndarray:
        h = self.u64_block(count, start)
        return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def laplace(self, scale: float, counter: int) -> float:
        u = self.uniform(counter) - 0.5
        return -scale * math.copysign(1.0, u) * math.log1p(-2.0 * abs(u))

    def laplaces(self, scale: float, count: int, start: int = 0) -> np.ndarray:
        u = self.uniforms(count, start) - 0.5
        return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def normals(self, count: int, start: int = 0) -> np.ndarray:
        return ndtri(self.uniforms(count, start))

    def randint(self, bound: int, counter: int) -> int:
        # modulo bias is < bound / 2^64, irrelevant at our bounds
        return self.u64(counter) % bound


def derive_seed(seed: Seed, label: bytes) -> Seed:
    raw = hashlib.blake2b(
        seed.value.to_bytes(8, "little") + label, digest_size=8).digest()
    return Seed(int.from_bytes(raw, "little"))


@dataclass(frozen=True)
class HashKey:
    """128-bit key of the shared geometric-value hash.

    Identical across all parties within one run and never serialized into any
    message sent to the server.
    """

    raw: bytes

    def __post_init__(self):
        if len(self.raw) != 16:
            raise InvalidParameter("hash key must be 16 bytes")

    @property
    def k0(self) -> int:
        return int.from_bytes(self.raw[:8], "little")

    @property
    def k1(self) -> int:
        return int.from_bytes(self.raw[8:], "little")


def derive_keys(shared_seed: Seed, count: int) -> list[HashKey]:
    """Derive `count` hash keys from the seed all parties share.

    Deterministic, so every party obtains the same list without sending key
    material anywhere.
    """
    if count < 1:
        raise InvalidParameter("need at least one hash key")
    stream = StreamKey.from_seed(shared_seed, b"rng.hash-keys")
    words = stream.u64_block(2 * count)
    return [
        HashKey(int(words[2 * i]).to_bytes(8, "little")
                + int(words[2 * i + 1]).to_bytes(8, "little"))
        for i in range(count)
    ]


def keys_to_array(keys: list[HashKey]) -> np.ndarray:
    """(count, 2) uint64 view of the key list for the kernels."""
    out = np.empty((len(keys), 2), dtype=np.uint64)
    for i, k in enumerate(keys):
        out[i, 0] = k.k0
        out[i, 1] = k.k1
    return out


@functools.lru_cache(maxsize=32)
def geometric_thresholds(gamma: float) -> np.ndarray:
    """Descending 53-bit thresholds encoding the geometric inverse CDF.

    For u = (h53 + 1) / 2^53 the hash value is 1 + floor(ln(u) / ln(q)) with
    q = 1 / (1 + gamma), which equals 1 + #{v : h53 < floor(q^v * 2^53)}.
    """
    if not (gamma > 0):
        raise InvalidParameter(f"gamma must be positive, got {gamma}")
    q = 1.0 / (1.0 + gamma)
    out = []
    for v in range(1, HASH_VALUE_CAP):
        t = math.floor(q**v * 2.0**53)
        if t <= 0:
            break
        out.append(t)
    return np.array(out, dtype=np.uint64)


@dataclass(frozen=True)
class GeometricHash:
    """Keyed hash whose values follow Geometric(gamma / (1 + gamma))."""

    key: HashKey
    gamma: float

    def __post_init__(self):
        if not (self.gamma > 0):
            raise InvalidParameter(f"gamma must be positive, got {self.gamma}")


def geo_hash(h: GeometricHash, uid: UserId) -> int:
    """Geometric hash value of one id; a pure function of (key, id)."""
    h53 = mix64(h.key.k0, h.key.k1, id_digest(uid)) >> 11
    table = geometric_thresholds(h.gamma)
    v = 1
    n = len(table)
    while v <= n and h53 < int(table[v - 1]):
        v += 1
    return v


def geo_hash_many(h: GeometricHash, id64: np.ndarray) -> np.ndarray:
    """Vectorized geo_hash over precomputed id digests; returns uint16."""
    h53 = mix64_arr(h.key.k0, h.key.k1, id64) >> np.uint64(11)
    table = geometric_thresholds(h.gamma)
    asc = table[::-1].copy()
    cnt = len(asc) - np.searchsorted(asc, h53, side="right")
    return (cnt + 1).astype(np.uint16)
