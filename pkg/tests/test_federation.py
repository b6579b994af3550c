import math
import struct

import numpy as np
import pytest

from vfkmeans.core import (
    BudgetLedger,
    ConfigInvalid,
    IdMismatch,
    InvalidParameter,
    PrivacyBudget,
    Seed,
    split_budget,
)
from vfkmeans.data import DatasetView, SplitSpec, gen_mixed_gaussian, vsplit
from vfkmeans.federation import (
    ESTIMATORS,
    MSG_CENTERS,
    MSG_COUNT,
    MSG_ENCODING,
    ProtocolMessage,
    RunConfig,
    estimate_n,
    run_protocol,
)
from vfkmeans.rng import StreamKey, derive_keys, derive_seed
from vfkmeans.sketch import HEADER_BYTES
from vfkmeans.weights import SigmaModel, auto_kprime


def small_problem(n=600, m=4, k=3, parties=2, seed=11):
    view, labels = gen_mixed_gaussian(n, m, k, seed=Seed(seed))
    return vsplit(view, SplitSpec(parties=parties), Seed(seed)), labels


def cfg(**kw):
    base = dict(estimator="DPFMPS-2P", k=3, local_k=3, epsilon=1.0,
                delta=1e-4, rows=128, single_thread=True)
    base.update(kw)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_validation_rejects_bad_combinations():
    with pytest.raises(ConfigInvalid):
        cfg(estimator="MAGIC").validate()
    with pytest.raises(ConfigInvalid):
        cfg(k=0).validate()
    with pytest.raises(ConfigInvalid):
        cfg(local_k=1).validate()
    with pytest.raises(ConfigInvalid):
        cfg(local_k="magic").validate()
    with pytest.raises(ConfigInvalid):
        cfg(local_alg="kmedians").validate()
    with pytest.raises(ConfigInvalid):
        cfg(rows=0).validate()
    with pytest.raises(ConfigInvalid):
        cfg(gamma=0.0).validate()
    with pytest.raises(ConfigInvalid):
        cfg(epsilon=0.0).validate()
    with pytest.raises(ConfigInvalid):
        cfg(delta=None).validate()
    with pytest.raises(ConfigInvalid):
        cfg(delta=1.0).validate()


def test_config_budget_share_rules_per_estimator():
    # LDP spends everything locally; the others must fund the count query
    cfg(estimator="LDP-AGG", frac=1.0).validate()
    with pytest.raises(ConfigInvalid):
        cfg(estimator="LDP-AGG", frac=0.98).validate()
    with pytest.raises(ConfigInvalid):
        cfg(estimator="DPFMPS-Basic", frac=1.0).validate()
    cfg(estimator="NON-PRIVATE", epsilon=0.0, delta=None).validate()


def test_config_auto_local_k_needs_a_noise_model():
    cfg(local_k="auto").validate()
    for est in ("LDP-AGG", "LDP-AGG-2P"):
        with pytest.raises(ConfigInvalid):
            cfg(estimator=est, frac=1.0, local_k="auto").validate()
    with pytest.raises(ConfigInvalid):
        cfg(estimator="NON-PRIVATE", local_k="auto").validate()


def test_config_dict_roundtrip_and_unknown_keys():
    c = cfg(sweeps=12, random_pairs=True)
    assert RunConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigInvalid):
        RunConfig.from_dict({**c.to_dict(), "verbosity": 3})
    with pytest.raises(ConfigInvalid):
        RunConfig.from_dict({"estimator": "DPFMPS-2P", "k": 3})


# ---------------------------------------------------------------------------
# the count query
# ---------------------------------------------------------------------------

def test_estimate_n_moments():
    vals = [estimate_n(20000, 0.02, Seed(i)) for i in range(200)]
    bound = 3.0 * (math.sqrt(2.0) / 0.02) / math.sqrt(200)
    assert abs(np.mean(vals) - 20000) <= bound


def test_estimate_n_edge_cases():
    assert estimate_n(2, 1e-6, Seed(0)) == 1.0
    assert estimate_n(500, 1e9, Seed(1)) == pytest.approx(500.0, abs=1e-6)
    with pytest.raises(InvalidParameter):
        estimate_n(500, 0.0, Seed(0))


def test_protocol_message_checks_byte_len():
    with pytest.raises(InvalidParameter):
        ProtocolMessage(kind=MSG_COUNT, sender=0, payload=b"12345678", byte_len=7)


# ---------------------------------------------------------------------------
# end-to-end runs
# ---------------------------------------------------------------------------

def test_run_rejects_mismatched_ids():
    views, _ = small_problem()
    other = DatasetView(ids=tuple(b"z" + u for u in views[1].ids),
                        matrix=views[1].matrix, names=views[1].names)
    with pytest.raises(IdMismatch):
        run_protocol(cfg(), [views[0], other], Seed(0))
    with pytest.raises(ConfigInvalid):
        run_protocol(cfg(), [views[0]], Seed(0))


def test_non_private_run_reproduces_exact_grid():
    views, labels = small_problem()
    c = cfg(estimator="NON-PRIVATE", epsilon=0.0, delta=None)
    centers, report = run_protocol(c, views, Seed(5), true_labels=labels)
    assert centers.shape == (3, sum(v.m for v in views))
    assert report.rel_intersection_error == 0.0
    assert 0.0 <= report.vscore <= 1.0
    _, quiet = run_protocol(c, views, Seed(5))
    assert quiet.vscore is None


def test_every_estimator_completes_and_respects_budget():
    views, labels = small_problem()
    for est in ESTIMATORS:
        private = est != "NON-PRIVATE"
        frac = 1.0 if est.startswith("LDP") else 0.98
        c = cfg(estimator=est,
                epsilon=2.0 if private else 0.0,
                delta=1e-4 if private else None,
                frac=frac if private else 0.98)
        ledger = BudgetLedger()
        centers, report = run_protocol(c, views, Seed(7), true_labels=labels,
                                       ledger=ledger)
        assert centers.shape[0] == 3
        assert report.normalized_loss >= 0
        eps, delta = ledger.total()
        if private:
            assert eps == pytest.approx(2.0, abs=1e-9)
            assert delta <= 1e-4 + 1e-12
        else:
            assert (eps, delta) == (0.0, 0.0)


def test_ledger_totals_itemized():
    views, _ = small_problem()
    ledger = BudgetLedger()
    run_protocol(cfg(epsilon=1.0, delta=1e-4), views, Seed(3), ledger=ledger)
    split = split_budget(PrivacyBudget(1.0, 1e-4), 2, 0.98)
    by_label = {}
    for e in ledger.entries:
        by_label.setdefault(e["label"], []).append(e)
    assert len(by_label["count-query"]) == 1
    assert by_label["count-query"][0]["eps"] == pytest.approx(split.eps_count)
    assert len(by_label["sketch.encode"]) == 2
    for e in by_label["sketch.encode"]:
        assert e["eps"] == pytest.approx(split.eps_encode)
        assert e["delta"] == pytest.approx(split.delta_encode)
    cluster_eps = sum(e["eps"] for lbl, es in by_label.items()
                      if lbl.startswith("dplsf") for e in es)
    assert cluster_eps == pytest.approx(2 * split.eps_cluster)


def test_threaded_and_single_thread_agree():
    views, labels = small_problem()
    base = dict(estimator="DPFMPS-2P", k=3, local_k=3, epsilon=1.0,
                delta=1e-4, rows=128)
    c1, r1 = run_protocol(RunConfig(single_thread=True, **base), views,
                          Seed(9), true_labels=labels)
    c2, r2 = run_protocol(RunConfig(single_thread=False, **base), views,
                          Seed(9), true_labels=labels)
    assert np.array_equal(c1, c2)
    # configs differ only in the threading flag, which is part of the echo
    assert r1.to_dict(include_timing=False)["normalized_loss"] == \
        r2.to_dict(include_timing=False)["normalized_loss"]
    assert r1.rel_intersection_error == r2.rel_intersection_error


def test_repeat_runs_are_byte_identical():
    views, labels = small_problem()
    c = cfg()
    _, r1 = run_protocol(c, views, Seed(21), true_labels=labels)
    _, r2 = run_protocol(c, views, Seed(21), true_labels=labels)
    assert r1.canonical_bytes() == r2.canonical_bytes()
    _, r3 = run_protocol(c, views, Seed(22), true_labels=labels)
    assert r3.normalized_loss != r1.normalized_loss


# ---------------------------------------------------------------------------
# what crosses the trust boundary
# ---------------------------------------------------------------------------

def capture_run(config, seed=13, n=2000, parties=2):
    views, labels = small_problem(n=n, parties=parties)
    tap = []
    centers, report = run_protocol(config, views, Seed(seed),
                                   true_labels=labels, message_tap=tap.append)
    return views, tap, report


def test_exactly_one_encoding_message_per_party():
    for est, frac in (("DPFMPS-2P", 0.98), ("IND-LAP", 0.98),
                      ("LDP-AGG", 1.0)):
        c = cfg(estimator=est, frac=frac)
        views, tap, _ = capture_run(c, n=600)
        enc = [m for m in tap if m.kind == MSG_ENCODING]
        assert sorted(m.sender for m in enc) == [0, 1]
        counts = [m for m in tap if m.kind == MSG_COUNT]
        assert len(counts) == (0 if est == "LDP-AGG" else 1)
        assert {m.kind for m in tap} <= {MSG_COUNT, MSG_CENTERS, MSG_ENCODING}


def test_no_raw_rows_or_hash_keys_in_any_payload():
    views, tap, _ = capture_run(cfg(), n=2000)
    payloads = [m.payload for m in tap]
    keys = derive_keys(derive_seed(Seed(13), b"federation.shared-secret"), 128)
    key_bytes = [k.raw for k in keys]
    key_bytes += [struct.pack("<Q", k.k0) for k in keys]
    for payload in payloads:
        for view in views:
            for r in range(0, view.n, 97):
                row = view.matrix[r].astype("<f8").tobytes()
                assert payload.find(row) < 0
        for kb in key_bytes:
            assert payload.find(kb) < 0


def test_message_sizes_follow_wire_formats():
    c = cfg(rows=128, local_k=3)
    views, tap, report = capture_run(c, n=600)
    m_by_kind = {}
    for m in tap:
        m_by_kind.setdefault(m.kind, []).append(m)
    assert all(m.byte_len == 8 for m in m_by_kind[MSG_COUNT])
    for m in m_by_kind[MSG_CENTERS]:
        assert m.byte_len == 16 + 3 * views[m.sender].m * 8
    for m in m_by_kind[MSG_ENCODING]:
        assert m.byte_len == HEADER_BYTES + 128 * 3 * 8
    want = [0, 0]
    for m in tap:
        want[m.sender] += m.byte_len
    assert list(report.bytes_per_party) == want


def test_auto_local_k_matches_the_rule():
    views, labels = small_problem(n=3000, k=5, seed=11)
    c = RunConfig(estimator="DPFMPS-2P", k=5, local_k="auto", epsilon=4.0,
                  delta=1e-4, rows=256, single_thread=True)
    tap = []
    run_protocol(c, views, Seed(11), message_tap=tap.append)
    split = split_budget(PrivacyBudget(4.0, 1e-4), 2, 0.98)
    chosen = StreamKey.from_seed(Seed(11), b"federation.count-party").randint(2, 0)
    pseed = derive_seed(Seed(11), b"federation.party-%d" % chosen)
    nhat = estimate_n(3000, split.eps_count, derive_seed(pseed, b"count"))
    want = auto_kprime(nhat, 5, 2, SigmaModel(rows=256,
                                              eps_encode=split.eps_encode,
                                              delta=1e-4))
    enc = [m for m in tap if m.kind == MSG_ENCODING]
    got = (enc[0].byte_len - HEADER_BYTES) // (256 * 8)
    assert got == want == 4


def test_three_party_ldp_refinement_runs():
    views, labels = small_problem(n=900, parties=3)
    c = cfg(estimator="LDP-AGG-2P", frac=1.0, epsilon=3.0)
    ledger = BudgetLedger()
    centers, report = run_protocol(c, views, Seed(2), true_labels=labels,
                                   ledger=ledger)
    assert centers.shape == (3, sum(v.m for v in views))
    assert ledger.total()[0] == pytest.approx(3.0)
