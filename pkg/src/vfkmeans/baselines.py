"""Baseline weight estimators: independence products and local DP reports.

IND-LAP multiplies per-party noisy histograms, which is exact when parties'
partitions are independent and collapses structure when they are not.
LDP-AGG has every user randomize their cluster index locally (generalized
randomized response, or hashing first when the index domain is too wide),
and the server inverts the randomization's transition structure.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BudgetLedger,
    InvalidParameter,
    LengthMismatch,
    Seed,
    SingularTransition,
)
from .rng import StreamKey, mix64, mix64_arr
from .weights import (
    PairwiseGrids,
    UpdateSchedule,
    WeightGrid,
    _outer_product,
    enforce_consistency,
    refine_grid,
)

# fixed second key half of the report hash; the per-user seed is the first
_OLH_K1 = 0xA5A5_5A5A_9E37_79B9


@dataclass(frozen=True)
class NoisyHistogram:
    """Per-cluster counts with Laplace(1/eps) noise per bin."""

    counts: np.ndarray
    eps: float


@dataclass(frozen=True)
class LdpReport:
    """One user's randomized report for one party.

    kind "grr": value is a cluster index. kind "olh": value is an index in the
    reduced hash domain and hash_seed identifies the user's public hash.
    """

    party: int
    user: int
    kind: str
    value: int
    hash_seed: int | None = None


def noisy_histogram(labels, local_k: int, eps: float, seed: Seed,
                    ledger: BudgetLedger | None = None,
                    party: int | None = None) -> NoisyHistogram:
    """Partition histogram under eps; one record moves one bin by one."""
    if not (eps > 0):
        raise InvalidParameter(f"eps must be positive, got {eps}")
    counts = np.bincount(np.asarray(labels), minlength=local_k).astype(float)
    noise = StreamKey.from_seed(seed, b"baselines.histogram").laplaces(
        1.0 / eps, local_k)
    if ledger is not None:
        ledger.spend(party, "ind-lap.histogram", eps)
    return NoisyHistogram(counts=counts + noise, eps=eps)


def ind_lap(nhat: float, histograms: list) -> WeightGrid:
    """Independence-product grid from per-party noisy histograms."""
    if len(histograms) < 2:
        raise InvalidParameter("need histograms from at least 2 parties")
    freqs = [np.asarray(h.counts, dtype=float) for h in histograms]
    raw = _outer_product(freqs) / nhat ** (len(freqs) - 1)
    return enforce_consistency(raw, nhat)


# ---------------------------------------------------------------------------
# local randomized reports
# ---------------------------------------------------------------------------

def response_probs(local_k: int, eps: float) -> tuple:
    """(kind, p, q, domain): support probabilities of one report.

    Direct randomized response keeps the true index with probability p; when
    local_k > 3*e^eps + 2 hashing into domain floor(e^eps + 1) first gives a
    better p/q tradeoff, with q = 1/domain for every non-true index.
    """
    if local_k < 2:
        raise InvalidParameter(f"local_k must be >= 2, got {local_k}")
    if not (eps > 0):
        raise InvalidParameter(f"eps must be positive, got {eps}")
    e = math.exp(eps)
    if local_k > 3.0 * e + 2.0:
        g = int(math.floor(e + 1.0))
        return "olh", e / (e + g - 1.0), 1.0 / g, g
    return "grr", e / (e + local_k - 1.0), 1.0 / (e + local_k - 1.0), local_k


def olh_hash(hash_seed: int, x: int, domain: int) -> int:
    return mix64(hash_seed, _OLH_K1, x) % domain


def _olh_hash_all(hash_seeds: np.ndarray, local_k: int, domain: int) -> np.ndarray:
    # (n, local_k) hashed value of every candidate index under every user's hash
    xs = np.arange(local_k, dtype=np.uint64)[None, :]
    return (mix64_arr(hash_seeds[:, None], _OLH_K1, xs)
            % np.uint64(domain)).astype(np.int64)


def ldp_encode(partition_index: int, local_k: int, eps: float,
               seed: Seed, party: int = 0, user: int = 0) -> LdpReport:
    """Randomize one user's cluster index under eps-local-DP."""
    kind, p, _, g = response_probs(local_k, eps)
    stream = StreamKey.from_seed(seed, b"baselines.ldp")
    if kind == "olh":
        hash_seed = stream.child(b"olh-seeds").u64(user)
        true_val = olh_hash(hash_seed, partition_index, g)
    else:
        hash_seed = None
        true_val = partition_index
    flip = stream.child(b"flip")
    if flip.uniform(2 * user) < p:
        value = true_val
    else:
        other = int(flip.uniform(2 * user + 1) * (g - 1))
        value = (true_val + 1 + other) % g
    return LdpReport(party=party, user=user, kind=kind, value=value,
                     hash_seed=hash_seed)


def ldp_encode_batch(labels, local_k: int, eps: float, seed: Seed,
                     party: int = 0,
                     ledger: BudgetLedger | None = None) -> list:
    """One report per user, same stream layout as per-user ldp_encode."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    kind, p, _, g = response_probs(local_k, eps)
    stream = StreamKey.from_seed(seed, b"baselines.ldp")
    if kind == "olh":
        seeds = stream.child(b"olh-seeds").u64_block(n)
        hashed = _olh_hash_all(seeds, local_k, g)
        true_vals = hashed[np.arange(n), labels]
    else:
        seeds = None
        true_vals = labels
    flip = stream.child(b"flip")
    u = flip.uniforms(2 * n).reshape(n, 2)
    keep = u[:, 0] < p
    others = (u[:, 1] * (g - 1)).astype(np.int64)
    values = np.where(keep, true_vals, (true_vals + 1 + others) % g)
    if ledger is not None:
        ledger.spend(party, "ldp.encode", eps)
    return [
        LdpReport(party=party, user=i, kind=kind, value=int(values[i]),
                  hash_seed=int(seeds[i]) if seeds is not None else None)
        for i in range(n)
    ]


def report_to_json(r: LdpReport) -> str:
    obj = {"party": r.party, "user": r.user, "kind": r.kind, "value": r.value}
    if r.hash_seed is not None:
        obj["seed"] = r.hash_seed
    return json.dumps(obj, sort_keys=True)


def reports_from_jsonl(text: str) -> list:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(LdpReport(party=obj["party"], user=obj["user"],
                             kind=obj["kind"], value=obj["value"],
                             hash_seed=obj.get("seed")))
    return out


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _support_matrix(reports: list, local_k: int, domain: int) -> np.ndarray:
    """(n, local_k) 0/1 matrix: which indices each report supports."""
    reports = sorted(reports, key=lambda r: r.user)
    n = len(reports)
    values = np.array([r.value for r in reports], dtype=np.int64)
    if reports[0].kind == "grr":
        out = np.zeros((n, local_k))
        out[np.arange(n), values] = 1.0
        return out
    seeds = np.array([r.hash_seed for r in reports], dtype=np.uint64)
    return (_olh_hash_all(seeds, local_k, domain) == values[:, None]).astype(float)


def _transition_inverse(local_k: int, p: float, q: float) -> np.ndarray:
    # (a*I + b*J)^-1 = (I - b/(a + k*b) * J) / a with a = p - q, b = q
    a = p - q
    if a == 0:
        raise SingularTransition("support probabilities are degenerate")
    j = np.full((local_k, local_k), q / (a + local_k * q))
    return (np.eye(local_k) - j) / a


def _joint_support_counts(supports: list) -> np.ndarray:
    letters = "abcdefgh"
    s = len(supports)
    if s > len(letters):
        raise InvalidParameter("too many parties for the support contraction")
    spec = ",".join(f"z{letters[i]}" for i in range(s))
    return np.einsum(f"{spec}->{''.join(letters[:s])}", *supports, optimize=True)


def ldp_decode(nhat: float, reports_per_party: list, eps: float, local_k: int,
               dense_oracle: bool = False) -> WeightGrid:
    """Joint weight grid from every party's randomized reports.

    Counts, for every grid cell, the users whose reports support all of the
    cell's indices, then removes the randomization bias. The transition matrix
    factorizes over parties, so the correction is one small solve per axis;
    dense_oracle instead inverts the full Kronecker product (test crosscheck,
    exponential in the party count).
    """
    if len(reports_per_party) < 2:
        raise InvalidParameter("need reports from at least 2 parties")
    n = len(reports_per_party[0])
    if n == 0 or any(len(r) != n for r in reports_per_party):
        raise LengthMismatch("all parties must report the same users")
    _, p, q, g = response_probs(local_k, eps)
    supports = [_support_matrix(r, local_k, g) for r in reports_per_party]
    counts = _joint_support_counts(supports)
    inv = _transition_inverse(local_k, p, q)
    if dense_oracle:
        dense = inv
        for _ in range(len(supports) - 1):
            dense = np.kron(dense, inv)
        raw = (dense @ counts.ravel()).reshape(counts.shape)
    else:
        raw = counts
        for axis in range(len(supports)):
            raw = np.moveaxis(np.tensordot(inv, raw, axes=(1, axis)), 0, axis)
    return enforce_consistency(raw, nhat)


def ldp_marginal(nhat: float, reports: list, eps: float,
                 local_k: int) -> np.ndarray:
    """Single-party cluster cardinalities from that party's reports."""
    _, p, q, g = response_probs(local_k, eps)
    support = _support_matrix(reports, local_k, g)
    est = _transition_inverse(local_k, p, q) @ support.sum(axis=0)
    est = np.clip(est, 0.0, None)
    if est.sum() == 0:
        est = np.full(est.shape, nhat / est.size)
    return est


def ldp_agg_2pest(nhat: float, reports_per_party: list, eps: float,
                  local_k: int,
                  schedule: UpdateSchedule | None = None) -> WeightGrid:
    """Pairwise-refined variant: decode pairs, refine the independence init."""
    if schedule is None:
        schedule = UpdateSchedule()
    s = len(reports_per_party)
    marginals = [ldp_marginal(nhat, r, eps, local_k) for r in reports_per_party]
    init = _outer_product(marginals) / nhat ** (s - 1)
    pairs = {}
    for l1, l2 in itertools.combinations(range(s), 2):
        pairs[(l1, l2)] = ldp_decode(
            nhat, [reports_per_party[l1], reports_per_party[l2]],
            eps, local_k).weights
    return refine_grid(init, PairwiseGrids(pairs=pairs, total=nhat), nhat, schedule)
