"""Server-side estimation of the weighted center grid.

Every user belongs to exactly one local cluster per party, so the weight of a
grid cell is the cardinality of an intersection of per-party clusters. That
intersection equals the complement of the union of all *other* clusters, and
unions are exactly what max-mergeable sketches estimate: the basic estimator
decodes one union per grid cell, the two-phase estimator refines an
independence initialization against all pairwise estimates.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import IncompatibleSketches, InvalidParameter, Seed
from .rng import StreamKey
from .sketch import SketchParams, SketchSet, _pow_table, calibrate_xi

DEFAULT_RHO = 0.649
CONSISTENCY_TOL = 1e-6


@dataclass(frozen=True)
class WeightGrid:
    """Nonnegative weights over the Cartesian product of local clusters."""

    dims: tuple
    weights: np.ndarray
    total: float

    def __post_init__(self):
        if self.weights.shape != self.dims:
            raise InvalidParameter("weight tensor shape does not match dims")
        if np.any(self.weights < 0):
            raise InvalidParameter("weights must be nonnegative")
        if abs(float(self.weights.sum()) - self.total) > CONSISTENCY_TOL * self.total:
            raise InvalidParameter("weights do not sum to the total")

    def to_json(self) -> str:
        return json.dumps({
            "dims": list(self.dims),
            "total": self.total,
            "weights": self.weights.ravel().tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "WeightGrid":
        obj = json.loads(text)
        dims = tuple(obj["dims"])
        w = np.array(obj["weights"], dtype=float).reshape(dims)
        return cls(dims=dims, weights=w, total=float(obj["total"]))


@dataclass(frozen=True)
class PairwiseGrids:
    """One k x k weight matrix per unordered party pair."""

    pairs: dict
    total: float


@dataclass(frozen=True)
class SigmaModel:
    """Standard-deviation model of one intersection-cardinality estimate.

    sigma = rho*(n - w)/sqrt(rows) + 4*rho*s*(local_k - 1)*sqrt(ln(1/delta))/eps,
    where w is the cardinality being estimated and s the number of parties
    intersected. rho is the decoder spread constant the auto-k rule was tuned
    with; it is a model input, not a measured property of this decoder.
    """

    rows: int
    eps_encode: float
    delta: float
    rho: float = DEFAULT_RHO

    def sigma(self, nhat: float, wstar: float, local_k: int, s: int = 2) -> float:
        spread = self.rho * (nhat - wstar) / math.sqrt(self.rows)
        floor = (4.0 * self.rho * s * (local_k - 1)
                 * math.sqrt(math.log(1.0 / self.delta)) / self.eps_encode)
        return spread + floor


@dataclass(frozen=True)
class UpdateSchedule:
    """Iteration schedule of the pairwise refinement loop.

    sweeps defaults to 200 * parties**2; the step size is eta_first for the
    first half of the sweeps and eta_second after; the loop stops early once
    the worst pair's L1 residual drops below stop_frac * total. Pair order is
    round-robin unless random_pairs, which draws pairs from `seed`.
    """

    sweeps: int | None = None
    eta_first: float = 1.0
    eta_second: float = 0.5
    stop_frac: float = 1e-4
    random_pairs: bool = False
    seed: Seed | None = None


def enforce_consistency(raw: np.ndarray, total: float) -> WeightGrid:
    """Clip negatives, rescale to `total`; uniform if everything clipped to 0."""
    if not (total > 0):
        raise InvalidParameter(f"total must be positive, got {total}")
    w = np.clip(np.asarray(raw, dtype=float), 0.0, None)
    s = float(w.sum())
    if s > 0:
        w = w * (total / s)
    else:
        w = np.full(w.shape, total / w.size)
    return WeightGrid(dims=w.shape, weights=w, total=total)


def _check_compatible(params: SketchParams, sketches: list) -> None:
    if len(sketches) < 2:
        raise InvalidParameter("need sketch sets from at least 2 parties")
    for ss in sketches:
        p = ss.params
        if (p.rows != params.rows or p.gamma != params.gamma
                or p.eps_unit != params.eps_unit):
            raise IncompatibleSketches(
                f"sketch set of party {ss.party} disagrees on rows/gamma/eps_unit")


def _complement_max(values: np.ndarray) -> np.ndarray:
    """Per row: max over all columns except one, for every excluded column."""
    top2 = np.partition(values, values.shape[1] - 2, axis=1)[:, -2:]
    full, second = top2[:, 1], top2[:, 0]
    am = np.argmax(values, axis=1)
    out = np.repeat(full[:, None], values.shape[1], axis=1)
    out[np.arange(values.shape[0]), am] = second
    return out


def basic_est(nhat: float, params: SketchParams, sketches: list) -> WeightGrid:
    """Estimate the full weight grid, one union decode per grid cell.

    For cell (a_1..a_s) the union sketch over all clusters other than a_l of
    every party l is the elementwise max of the parties' column maxes, which
    decodes to n - w(cell) plus the phantom load sum(k_l - 1) * phantoms.
    Weights then pass through enforce_consistency.
    """
    _check_compatible(params, sketches)
    rows = params.rows
    comp = [_complement_max(ss.values) for ss in sketches]
    dims = tuple(c.shape[1] for c in comp)
    u = None
    for axis, c in enumerate(comp):
        shape = [rows] + [1] * len(comp)
        shape[1 + axis] = c.shape[1]
        c = c.reshape(shape)
        u = c if u is None else np.maximum(u, c)
    flat = u.reshape(rows, -1)
    xi = calibrate_xi(params.gamma, rows)
    z = _pow_table(params.gamma, int(flat.max()))[flat]
    union = xi * rows / z.sum(axis=0)
    union -= params.phantoms * sum(d - 1 for d in dims)
    raw = (nhat - union).reshape(dims)
    return enforce_consistency(raw, nhat)


def _project_tensor(w: np.ndarray, l1: int, l2: int) -> np.ndarray:
    axes = tuple(i for i in range(w.ndim) if i not in (l1, l2))
    mat = w.sum(axis=axes) if axes else w.copy()
    return mat.T if l1 > l2 else mat


def project_pair(grid: WeightGrid, l1: int, l2: int) -> np.ndarray:
    """Marginal matrix of the grid onto the (l1, l2) party pair."""
    if l1 == l2:
        raise InvalidParameter("project_pair needs two distinct parties")
    return _project_tensor(grid.weights, l1, l2)


def marginal_cardinalities(nhat: float, params: SketchParams,
                           sketch: SketchSet) -> np.ndarray:
    """Per-cluster cardinality estimates for one party, phantom-corrected.

    Clipped at zero; an all-zero result degrades to the uniform nhat/k vector
    so the independence initialization never collapses.
    """
    xi = calibrate_xi(params.gamma, params.rows)
    z = _pow_table(params.gamma, int(sketch.values.max()))[sketch.values]
    est = xi * params.rows / z.sum(axis=0) - params.phantoms
    est = np.clip(est, 0.0, None)
    if est.sum() == 0:
        est = np.full(est.shape, nhat / est.size)
    return est


def pairwise_targets(nhat: float, params: SketchParams,
                     sketches: list) -> PairwiseGrids:
    """basic_est on every unordered party pair."""
    pairs = {}
    for l1, l2 in itertools.combinations(range(len(sketches)), 2):
        pairs[(l1, l2)] = basic_est(nhat, params, [sketches[l1], sketches[l2]]).weights
    return PairwiseGrids(pairs=pairs, total=nhat)


def refine_grid(init: np.ndarray, targets: PairwiseGrids, nhat: float,
                schedule: UpdateSchedule) -> WeightGrid:
    """Iteratively reconcile a full grid with pairwise marginal targets.

    Each update spreads the current pair's marginal error evenly over the
    cells it covers. Intermediate negatives are allowed on purpose: clipping
    inside the loop would break the linearity the updates rely on. Clipping
    and rescaling happen once, at the end.
    """
    w = np.array(init, dtype=float)
    dims = w.shape
    parties = len(dims)
    pair_list = sorted(targets.pairs)
    sweeps = schedule.sweeps if schedule.sweeps is not None else 200 * parties**2
    cells = w.size
    pick = None
    if schedule.random_pairs:
        if schedule.seed is None:
            raise InvalidParameter("random_pairs needs a seed")
        pick = StreamKey.from_seed(schedule.seed, b"weights.pair-order")
    ctr = 0
    for t in range(sweeps):
        eta = schedule.eta_first if t < sweeps // 2 else schedule.eta_second
        if pick is not None:
            order = [pair_list[pick.randint(len(pair_list), ctr + i)]
                     for i in range(len(pair_list))]
            ctr += len(pair_list)
        else:
            order = pair_list
        for l1, l2 in order:
            delta = _project_tensor(w, l1, l2) - targets.pairs[(l1, l2)]
            covered = cells // (dims[l1] * dims[l2])
            shape = [1] * parties
            shape[l1], shape[l2] = dims[l1], dims[l2]
            w -= eta * delta.reshape(shape) / covered
        worst = _worst_residual(w, targets)
        if worst < schedule.stop_frac * nhat:
            break
    return enforce_consistency(w, nhat)


def _worst_residual(w: np.ndarray, targets: PairwiseGrids) -> float:
    worst = 0.0
    for (l1, l2), tgt in targets.pairs.items():
        worst = max(worst, float(np.abs(_project_tensor(w, l1, l2) - tgt).sum()))
    return worst


def two_phase_est(nhat: float, params: SketchParams, sketches: list,
                  schedule: UpdateSchedule | None = None) -> WeightGrid:
    """Pairwise-refined weight grid.

    Phase one estimates each party's cluster cardinalities and every pairwise
    grid; phase two starts from the independence product of the marginals and
    runs refine_grid against the pairwise targets. With two parties the single
    target is reproduced exactly, so this coincides with basic_est.
    """
    _check_compatible(params, sketches)
    if schedule is None:
        schedule = UpdateSchedule()
    marginals = [marginal_cardinalities(nhat, params, ss) for ss in sketches]
    init = _outer_product(marginals) / nhat ** (len(sketches) - 1)
    targets = pairwise_targets(nhat, params, sketches)
    return refine_grid(init, targets, nhat, schedule)


def _outer_product(vectors: list) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def auto_kprime(nhat: float, k: int, parties: int, model: SigmaModel,
                k_max: int = 16) -> int:
    """Data-driven local cluster count.

    Picks the smallest k0 >= 2 whose expected estimation noise is at least
    half the typical cell weight (2*sigma(k0) >= nhat/k0**2, with the cell
    weight approximated by nhat/k0**2), then returns
    max(k0, ceil(k**(1/parties))) clamped to [2, k_max]. Below the clamp floor
    everything degenerates; above it the grid outgrows its usefulness.
    """
    if k_max < 2:
        raise InvalidParameter(f"k_max must be >= 2, got {k_max}")
    if not (nhat > 0) or k < 1:
        raise InvalidParameter("need positive nhat and k >= 1")
    k0 = k_max
    for cand in range(2, k_max + 1):
        wstar = nhat / cand**2
        if 2.0 * model.sigma(nhat, wstar, cand, s=2) >= wstar:
            k0 = cand
            break
    growth = math.ceil(k ** (1.0 / parties) - 1e-9)
    return max(2, min(k_max, max(k0, growth)))
