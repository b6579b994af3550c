import itertools
import math

import numpy as np
import pytest

from vfkmeans.core import (
    BudgetLedger,
    InvalidParameter,
    LengthMismatch,
    Seed,
    SingularTransition,
)
from vfkmeans.baselines import (
    LdpReport,
    NoisyHistogram,
    ind_lap,
    ldp_agg_2pest,
    ldp_decode,
    ldp_encode,
    ldp_encode_batch,
    ldp_marginal,
    noisy_histogram,
    report_to_json,
    reports_from_jsonl,
    response_probs,
)
from vfkmeans.baselines import (
    _joint_support_counts,
    _support_matrix,
    _transition_inverse,
)


def exact_joint(label_arrays, dims):
    out = np.zeros(dims)
    for cell in itertools.product(*(range(d) for d in dims)):
        mask = np.ones(len(label_arrays[0]), dtype=bool)
        for labs, a in zip(label_arrays, cell):
            mask &= labs == a
        out[cell] = mask.sum()
    return out


# ---------------------------------------------------------------------------
# response probabilities
# ---------------------------------------------------------------------------

def test_response_probs_direct_branch():
    kind, p, q, g = response_probs(2, math.log(3.0))
    assert kind == "grr"
    assert p == pytest.approx(0.75)
    assert q == pytest.approx(0.25)
    assert g == 2


def test_response_probs_hashing_branch():
    # 12 > 3*e^eps + 2 = 11 at eps = ln 3; hash domain floor(e^eps + 1) = 4
    kind, p, q, g = response_probs(12, math.log(3.0))
    assert kind == "olh"
    assert g == 4
    assert p == pytest.approx(0.5)
    assert q == pytest.approx(0.25)
    kind11, _, _, _ = response_probs(11, math.log(3.0))
    assert kind11 == "grr"


def test_response_probs_sum_to_one():
    # exact on the direct branch; the hashing branch's q is a support
    # probability (1/domain), not a slice of the report distribution
    for k in (2, 3, 5, 9):
        for eps in (0.25, 1.0, 4.0):
            kind, p, q, g = response_probs(k, eps)
            e = math.exp(eps)
            if kind == "grr":
                assert p + (k - 1) * q == pytest.approx(1.0, abs=1e-12)
            else:
                assert p == pytest.approx(e / (e + g - 1))
                assert q == pytest.approx(1.0 / g)


def test_response_probs_validation():
    with pytest.raises(InvalidParameter):
        response_probs(1, 1.0)
    with pytest.raises(InvalidParameter):
        response_probs(5, 0.0)


def test_grr_report_frequencies():
    # one-cluster input isolates the (p, q) distribution of a single report
    n, k, eps = 1_000_000, 5, 1.0
    kind, p, q, _ = response_probs(k, eps)
    assert kind == "grr"
    reports = ldp_encode_batch(np.full(n, 2), k, eps, Seed(31))
    freq = np.bincount([r.value for r in reports], minlength=k) / n
    want = np.full(k, q)
    want[2] = p
    assert np.abs(freq - want).max() <= 0.003


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_batch_encode_matches_per_user():
    rng = np.random.default_rng(12)
    labels = rng.integers(0, 5, size=50)
    for k, eps in ((5, 1.0), (12, math.log(3.0))):
        batch = ldp_encode_batch(labels % k, k, eps, Seed(77), party=3)
        single = [ldp_encode(int(v), k, eps, Seed(77), party=3, user=i)
                  for i, v in enumerate(labels % k)]
        assert batch == single


def test_encode_spends_budget_once_per_party():
    ledger = BudgetLedger()
    ldp_encode_batch([0, 1, 2], 3, 0.5, Seed(1), party=2, ledger=ledger)
    eps, delta = ledger.total()
    assert eps == 0.5 and delta == 0.0


def test_report_jsonl_roundtrip():
    reports = [
        LdpReport(party=0, user=0, kind="grr", value=3),
        LdpReport(party=1, user=1, kind="olh", value=2, hash_seed=12345),
    ]
    text = "\n".join(report_to_json(r) for r in reports) + "\n"
    assert reports_from_jsonl(text) == reports
    assert "seed" not in report_to_json(reports[0])


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def test_transition_inverse_is_inverse():
    for k, eps in ((3, 0.5), (5, 1.0)):
        _, p, q, _ = response_probs(k, eps)
        m = (p - q) * np.eye(k) + q * np.ones((k, k))
        assert np.allclose(_transition_inverse(k, p, q) @ m, np.eye(k),
                           atol=1e-12)


def test_transition_inverse_rejects_degenerate():
    with pytest.raises(SingularTransition):
        _transition_inverse(4, 0.25, 0.25)


def test_decode_noiseless_limit_recovers_counts():
    rng = np.random.default_rng(3)
    n, k = 400, 3
    labels = [rng.integers(0, k, size=n) for _ in range(2)]
    reports = [ldp_encode_batch(labels[p], k, 50.0, Seed(p), party=p)
               for p in range(2)]
    grid = ldp_decode(float(n), reports, 50.0, k)
    assert np.allclose(grid.weights, exact_joint(labels, (k, k)), atol=1e-6)


def test_decode_dense_oracle_agrees():
    rng = np.random.default_rng(21)
    n, k = 500, 4
    for parties in (2, 3):
        labels = [rng.integers(0, k, size=n) for _ in range(parties)]
        reports = [ldp_encode_batch(labels[p], k, 1.0, Seed(40 + p), party=p)
                   for p in range(parties)]
        fast = ldp_decode(float(n), reports, 1.0, k)
        dense = ldp_decode(float(n), reports, 1.0, k, dense_oracle=True)
        assert np.allclose(fast.weights, dense.weights, atol=1e-9 * n)


def test_decode_is_unbiased():
    n, k, eps, trials = 10000, 5, 1.0, 50
    rng = np.random.default_rng(100)
    labels = [rng.integers(0, k, size=n) for _ in range(2)]
    exact = exact_joint(labels, (k, k))
    errs = []
    for t in range(trials):
        reports = [ldp_encode_batch(labels[p], k, eps, Seed(1000 + 2 * t + p),
                                    party=p) for p in range(2)]
        errs.append(ldp_decode(float(n), reports, eps, k).weights - exact)
    errs = np.array(errs)
    z = np.abs(errs.mean(axis=0)) / (errs.std(axis=0, ddof=1) / math.sqrt(trials))
    assert z.max() <= 3.0


def test_decode_validates_report_shapes():
    reports = [ldp_encode_batch([0, 1], 2, 1.0, Seed(0))]
    with pytest.raises(InvalidParameter):
        ldp_decode(2.0, reports, 1.0, 2)
    uneven = [ldp_encode_batch([0, 1], 2, 1.0, Seed(0)),
              ldp_encode_batch([0, 1, 1], 2, 1.0, Seed(1))]
    with pytest.raises(LengthMismatch):
        ldp_decode(3.0, uneven, 1.0, 2)


def test_olh_marginals_recover_cluster_sizes():
    n, k = 20000, 12
    eps = math.log(3.0)
    rng = np.random.default_rng(9)
    labels = rng.integers(0, k, size=n)
    sizes = np.bincount(labels, minlength=k).astype(float)
    for s in range(3):
        reports = ldp_encode_batch(labels, k, eps, Seed(500 + s))
        est = ldp_marginal(float(n), reports, eps, k)
        assert np.abs(est - sizes).max() <= 0.05 * n


def raw_decode(reports_per_party, eps, k):
    # decode without the final clip/rescale; censoring at zero would mask the
    # noise magnitude this is used to measure
    _, p, q, g = response_probs(k, eps)
    supports = [_support_matrix(r, k, g) for r in reports_per_party]
    raw = _joint_support_counts(supports)
    inv = _transition_inverse(k, p, q)
    for axis in range(len(supports)):
        raw = np.moveaxis(np.tensordot(inv, raw, axes=(1, axis)), 0, axis)
    return raw


def test_decode_variance_scales_with_budget():
    # halving eps multiplies the per-cell variance by about 2**(2*S)
    n, k, parties, trials = 10000, 3, 4, 24
    rng = np.random.default_rng(55)
    labels = [rng.integers(0, k, size=n) for _ in range(parties)]
    stds = {}
    for eps in (0.5, 1.0):
        grids = []
        for t in range(trials):
            reports = [ldp_encode_batch(labels[p], k, eps,
                                        Seed(7000 + 10 * t + p), party=p)
                       for p in range(parties)]
            grids.append(raw_decode(reports, eps, k))
        stds[eps] = np.array(grids).std(axis=0, ddof=1)
    var_ratio = np.median((stds[0.5] / stds[1.0]) ** 2)
    scale = 2.0 ** (2 * parties)
    assert 0.5 * scale <= var_ratio <= 2.0 * scale


# ---------------------------------------------------------------------------
# independence-product baseline
# ---------------------------------------------------------------------------

def test_noisy_histogram_noise_and_ledger():
    ledger = BudgetLedger()
    labels = [0] * 30 + [1] * 10
    hist = noisy_histogram(labels, 2, 2.0, Seed(6), ledger=ledger, party=0)
    assert hist.counts.shape == (2,)
    assert np.abs(hist.counts - [30, 10]).max() < 10.0
    assert ledger.total() == (2.0, 0.0)
    with pytest.raises(InvalidParameter):
        noisy_histogram(labels, 2, 0.0, Seed(6))


def test_ind_lap_exact_on_independent_partitions():
    rng = np.random.default_rng(14)
    n, k = 10000, 3
    labels = [rng.integers(0, k, size=n) for _ in range(2)]
    hists = [NoisyHistogram(np.bincount(l, minlength=k).astype(float), math.inf)
             for l in labels]
    grid = ind_lap(float(n), hists)
    assert np.abs(grid.weights - exact_joint(labels, (k, k))).max() <= 0.03 * n


def test_ind_lap_collapses_correlated_partitions():
    # the known failure mode: identical halves give n/4 everywhere while the
    # truth is n/2 on the diagonal
    n = 1000
    hist = NoisyHistogram(np.array([n / 2, n / 2]), math.inf)
    grid = ind_lap(float(n), [hist, hist])
    assert np.allclose(grid.weights, n / 4)


def test_ind_lap_uniform_histograms_give_uniform_grid():
    n, k = 900.0, 3
    hists = [NoisyHistogram(np.full(k, n / k), 1.0) for _ in range(3)]
    grid = ind_lap(n, hists)
    assert np.allclose(grid.weights, n / k**3)
    with pytest.raises(InvalidParameter):
        ind_lap(n, hists[:1])


# ---------------------------------------------------------------------------
# pairwise-refined variant
# ---------------------------------------------------------------------------

def test_ldp_agg_2pest_reduces_to_decode_for_two_parties():
    rng = np.random.default_rng(33)
    n, k, eps = 2000, 3, 1.0
    labels = [rng.integers(0, k, size=n) for _ in range(2)]
    reports = [ldp_encode_batch(labels[p], k, eps, Seed(90 + p), party=p)
               for p in range(2)]
    direct = ldp_decode(float(n), reports, eps, k)
    refined = ldp_agg_2pest(float(n), reports, eps, k)
    assert np.abs(direct.weights - refined.weights).max() <= 1e-6 * n


def test_ldp_agg_2pest_output_is_consistent():
    rng = np.random.default_rng(44)
    n, k, eps, parties = 3000, 3, 1.0, 3
    labels = [rng.integers(0, k, size=n) for _ in range(parties)]
    reports = [ldp_encode_batch(labels[p], k, eps, Seed(60 + p), party=p)
               for p in range(parties)]
    grid = ldp_agg_2pest(float(n), reports, eps, k)
    assert grid.dims == (k,) * parties
    assert np.all(grid.weights >= 0)
    assert float(grid.weights.sum()) == pytest.approx(n, rel=1e-6)
