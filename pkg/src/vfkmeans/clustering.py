"""Local DP clustering and the server-side weighted k-means.

Parties cluster their own columns under half of their epsilon (DPLSF by
default, DPLloyd as an alternative); the server clusters the weighted center
grid with plain weighted Lloyd. All data is assumed normalized to [-1, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .core import BudgetLedger, InvalidParameter, LengthMismatch, Seed
from .rng import StreamKey, derive_seed
from .sketch import Partition

LSH_BITS = 20
CONVERGENCE_SHIFT = 1e-6


def assign_nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center per point; ties go to the lowest index."""
    if points.shape[1] != centers.shape[1]:
        raise InvalidParameter("points and centers disagree on dimension")
    return np.argmin(cdist(points, centers, "sqeuclidean"), axis=1)


@dataclass(frozen=True)
class WeightedPoints:
    """Points with nonnegative weights, coordinates in [-1, 1]."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.weights.shape != (self.points.shape[0],):
            raise InvalidParameter("weights must be one per point row")
        if np.any(self.weights < 0):
            raise InvalidParameter("weights must be nonnegative")
        if self.points.size and np.abs(self.points).max() > 1.0 + 1e-9:
            raise InvalidParameter("coordinates must lie in [-1, 1]")


@dataclass(frozen=True)
class LocalModel:
    """One party's local centers and the id partition they induce."""

    centers: np.ndarray
    partition: Partition


@dataclass
class LshTrieNode:
    prefix: tuple
    noisy_count: float
    children: tuple | None = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None


def weighted_loss(points: np.ndarray, weights: np.ndarray,
                  centers: np.ndarray) -> float:
    """Sum over points of weight times squared distance to the nearest center."""
    d = cdist(points, centers, "sqeuclidean").min(axis=1)
    return float(np.dot(weights, d))


def _weighted_choice(weights: np.ndarray, u: float) -> int:
    c = np.cumsum(weights)
    return int(np.searchsorted(c, u * c[-1], side="right").clip(0, len(weights) - 1))


def _kmeanspp(points: np.ndarray, weights: np.ndarray, k: int,
              stream: StreamKey) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    ctr = 0
    centers[0] = points[_weighted_choice(weights, stream.uniform(ctr))]
    ctr += 1
    d2 = cdist(points, centers[0:1], "sqeuclidean").ravel()
    for j in range(1, k):
        mass = weights * d2
        if mass.sum() > 0:
            idx = _weighted_choice(mass, stream.uniform(ctr))
        else:
            # all remaining mass at distance 0 (k > distinct points); any pick works
            idx = _weighted_choice(weights, stream.uniform(ctr))
        ctr += 1
        centers[j] = points[idx]
        d2 = np.minimum(d2, cdist(points, centers[j:j + 1], "sqeuclidean").ravel())
    return centers


def weighted_kmeans(data: WeightedPoints, k: int, seed: Seed,
                    iters: int = 100, restarts: int = 5) -> np.ndarray:
    """Weighted Lloyd's algorithm with weight-aware k-means++ seeding.

    Runs `restarts` independent k-means++ initializations and keeps the
    lowest-loss result. Lloyd stops when the largest center shift falls below
    1e-6 or after `iters` rounds; a cluster that ends up with zero weight is
    reseeded at the point currently paying the highest weighted cost.

    Returns a (k, m) center array.
    """
    if k < 1:
        raise InvalidParameter(f"k must be >= 1, got {k}")
    pts, w = data.points, data.weights
    if pts.shape[0] == 0 or w.sum() <= 0:
        raise InvalidParameter("need at least one positive weight")
    base = StreamKey.from_seed(seed, b"clustering.kmeans")
    best, best_loss = None, math.inf
    for r in range(restarts):
        centers = _kmeanspp(pts, w, k, base.child(r))
        for _ in range(iters):
            d2 = cdist(pts, centers, "sqeuclidean")
            labels = np.argmin(d2, axis=1)
            new = centers.copy()
            for j in range(k):
                mask = labels == j
                wj = w[mask]
                if wj.sum() > 0:
                    new[j] = np.average(pts[mask], axis=0, weights=wj)
                else:
                    cost = w * d2[np.arange(len(labels)), labels]
                    new[j] = pts[int(np.argmax(cost))]
            shift = float(np.abs(new - centers).max())
            centers = new
            if shift < CONVERGENCE_SHIFT:
                break
        loss = weighted_loss(pts, w, centers)
        if loss < best_loss:
            best, best_loss = centers, loss
    return best


# ---------------------------------------------------------------------------
# local DP clustering
# ---------------------------------------------------------------------------

def _hash_bits(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return points @ normals.T >= 0.0


def trie_threshold(n: int, m: int, local_k: int, sum_scale: float) -> float:
    """Branching threshold: noise-scaled unless the n/(2k) head-count cap wins."""
    sigma = math.sqrt(2.0) * sum_scale
    return min(10.0 * sigma * math.sqrt(m), float(n // (2 * local_k)))


def dplsf(points: np.ndarray, ids, local_k: int, eps_cluster: float, seed: Seed,
          ledger: BudgetLedger | None = None, party: int | None = None,
          count_share: float = 0.5) -> LocalModel:
    """Locality-sensitive local clustering under `eps_cluster`.

    Hashes every point to 20 sign bits of random hyperplane projections and
    grows a prefix trie over the bit strings: a node whose noisy count exceeds
    3*theta splits, everything else becomes a leaf. Leaves with positive noisy
    counts yield noisy per-dimension means, and weighted k-means over those
    leaf means gives the `local_k` centers. The budget is split count_share
    for the trie counts (spread over the 21 levels, parallel within a level)
    and the rest for the leaf sums (spread over the dimensions).

    theta = min(10 * sigma * sqrt(m), floor(n / (2 * local_k))) where sigma is
    the std of the Laplace noise added to one leaf-sum coordinate.

    If no leaf has a positive noisy count the trie carries no signal; the
    party falls back to `local_k` random centers and warns.
    """
    if not (eps_cluster > 0):
        raise InvalidParameter(f"eps_cluster must be positive, got {eps_cluster}")
    if not (0 < count_share < 1):
        raise InvalidParameter("count_share must be in (0,1)")
    if local_k < 1:
        raise InvalidParameter(f"local_k must be >= 1, got {local_k}")
    n, m = points.shape
    stream = StreamKey.from_seed(seed, b"clustering.dplsf")
    normals = stream.child(b"hyperplanes").normals(LSH_BITS * m).reshape(LSH_BITS, m)
    bits = _hash_bits(points, normals)

    eps_counts = count_share * eps_cluster
    eps_sums = eps_cluster - eps_counts
    count_scale = (LSH_BITS + 1) / eps_counts
    sum_scale = m / eps_sums
    theta = trie_threshold(n, m, local_k, sum_scale)

    count_stream = stream.child(b"counts")
    ctr = 0
    root = LshTrieNode(prefix=(), noisy_count=n + count_stream.laplace(count_scale, ctr))
    ctr += 1
    level = [(root, np.arange(n))]
    leaves = []
    for depth in range(LSH_BITS):
        nxt = []
        for node, idx in level:
            if node.noisy_count <= 3.0 * theta:
                leaves.append((node, idx))
                continue
            right = bits[idx, depth]
            kids = []
            for bit, sub in ((0, idx[~right]), (1, idx[right])):
                child = LshTrieNode(
                    prefix=node.prefix + (bit,),
                    noisy_count=len(sub) + count_stream.laplace(count_scale, ctr))
                ctr += 1
                kids.append(child)
                nxt.append((child, sub))
            node.children = tuple(kids)
        level = nxt
    leaves.extend(level)

    sum_stream = stream.child(b"sums")
    means, counts = [], []
    sctr = 0
    for node, idx in leaves:
        noise = sum_stream.laplaces(sum_scale, m, sctr)
        sctr += m
        if node.noisy_count <= 0:
            continue
        s = points[idx].sum(axis=0) + noise
        means.append(np.clip(s / node.noisy_count, -1.0, 1.0))
        counts.append(node.noisy_count)

    if ledger is not None:
        ledger.spend(party, "dplsf.counts", eps_counts)
        ledger.spend(party, "dplsf.sums", eps_sums)

    if not means:
        warnings.warn("degenerate LSH trie: falling back to random local centers")
        centers = stream.child(b"fallback").uniforms(local_k * m).reshape(local_k, m)
        centers = centers * 2.0 - 1.0
    else:
        grid = WeightedPoints(np.array(means), np.array(counts))
        centers = weighted_kmeans(grid, local_k, derive_seed(seed, b"dplsf.kmeans"))
    centers = np.clip(centers, -1.0, 1.0)
    labels = assign_nearest(points, centers)
    return LocalModel(centers=centers, partition=Partition.from_labels(ids, labels))


def dplloyd(points: np.ndarray, ids, local_k: int, eps_cluster: float, seed: Seed,
            iters: int = 5, ledger: BudgetLedger | None = None,
            party: int | None = None,
            init: np.ndarray | None = None) -> LocalModel:
    """Lloyd iterations with per-iteration Laplace noise on counts and sums.

    Each of the `iters` rounds gets eps_cluster/iters, half on the cluster
    counts and half on the coordinate sums (split over dimensions; data in
    [-1,1] keeps per-dimension sensitivity 1). Clusters whose noisy count is
    nonpositive keep their previous center.
    """
    if not (eps_cluster > 0):
        raise InvalidParameter(f"eps_cluster must be positive, got {eps_cluster}")
    n, m = points.shape
    stream = StreamKey.from_seed(seed, b"clustering.dplloyd")
    if init is None:
        centers = stream.child(b"init").uniforms(local_k * m).reshape(local_k, m)
        centers = centers * 2.0 - 1.0
    else:
        centers = np.array(init, dtype=float)
    count_scale = 2.0 * iters / eps_cluster
    sum_scale = 2.0 * m * iters / eps_cluster
    noise = stream.child(b"noise")
    ctr = 0
    for _ in range(iters):
        labels = assign_nearest(points, centers)
        for j in range(local_k):
            mask = labels == j
            c = mask.sum() + noise.laplace(count_scale, ctr)
            ctr += 1
            s = points[mask].sum(axis=0) + noise.laplaces(sum_scale, m, ctr)
            ctr += m
            if c > 0:
                centers[j] = np.clip(s / c, -1.0, 1.0)
    if ledger is not None:
        ledger.spend(party, "dplloyd.counts", eps_cluster / 2.0)
        ledger.spend(party, "dplloyd.sums", eps_cluster / 2.0)
    labels = assign_nearest(points, centers)
    return LocalModel(centers=centers, partition=Partition.from_labels(ids, labels))


# ---------------------------------------------------------------------------
# clustering quality
# ---------------------------------------------------------------------------

def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def vscore(labels_true, labels_pred) -> float:
    """Harmonic mean of homogeneity and completeness, in [0, 1].

    homogeneity = 1 - H(class|cluster)/H(class) (1 when H(class) = 0) and
    completeness is the mirror image; the score is 0 when both vanish.
    """
    lt = np.asarray(labels_true)
    lp = np.asarray(labels_pred)
    if lt.shape != lp.shape or lt.ndim != 1 or lt.size == 0:
        raise LengthMismatch("label arrays must be equal-length and non-empty")
    _, ti = np.unique(lt, return_inverse=True)
    _, pi = np.unique(lp, return_inverse=True)
    joint = np.zeros((ti.max() + 1, pi.max() + 1))
    np.add.at(joint, (ti, pi), 1.0)
    n = joint.sum()
    h_class = _entropy(joint.sum(axis=1))
    h_clust = _entropy(joint.sum(axis=0))
    nz = joint > 0
    h_joint = float(-(joint[nz] / n * np.log(joint[nz] / n)).sum())
    h_class_given = h_joint - h_clust
    h_clust_given = h_joint - h_class
    h = 1.0 if h_class == 0 else 1.0 - h_class_given / h_class
    c = 1.0 if h_clust == 0 else 1.0 - h_clust_given / h_clust
    if h + c == 0:
        return 0.0
    return float(2.0 * h * c / (h + c))
