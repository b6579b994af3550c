import copy
import json
import statistics

import pytest

from vfkmeans.core import ConfigInvalid, Seed
from vfkmeans.data import gen_mixed_gaussian, write_csv
from vfkmeans.experiments import (
    RESULT_COLUMNS,
    cell_config,
    cell_list,
    load_experiment,
    preset,
    run_cell,
    run_matrix,
    summarize,
    validate_experiment,
    write_outputs,
)


def tiny_experiment(**data_extra):
    return {
        "name": "tiny",
        "data": {"kind": "mixed-gaussian", "n": 400, "m": 4, "k": 3,
                 **data_extra},
        "base": {"k": 3, "local_k": 3, "delta": 1e-4, "rows": 64,
                 "gamma": 1.0, "frac": 0.98, "local_alg": "dplsf"},
        "estimators": ["NON-PRIVATE", "DPFMPS-2P"],
        "epsilons": [1.0, 4.0],
        "parties": [2],
        "seeds": [0, 1],
    }


# ---------------------------------------------------------------------------
# experiment documents
# ---------------------------------------------------------------------------

def test_preset_is_valid():
    exp = preset("mixed-gaussian-table")
    validate_experiment(exp)
    assert exp["seeds"] == list(range(10))
    with pytest.raises(ConfigInvalid):
        preset("unheard-of")


def test_validate_rejects_malformed_documents():
    good = tiny_experiment()
    validate_experiment(good)
    bad = {**good, "surprise": 1}
    with pytest.raises(ConfigInvalid, match="unknown experiment keys"):
        validate_experiment(bad)
    with pytest.raises(ConfigInvalid, match="missing"):
        validate_experiment({k: v for k, v in good.items() if k != "base"})
    with pytest.raises(ConfigInvalid, match="unknown estimator"):
        validate_experiment({**good, "estimators": ["K-MEANS++"]})
    with pytest.raises(ConfigInvalid, match="override"):
        validate_experiment({**good, "overrides": {"MAGIC": {}}})
    with pytest.raises(ConfigInvalid, match="data kind"):
        validate_experiment({**good, "data": {"kind": "parquet"}})
    with pytest.raises(ConfigInvalid, match="non-empty"):
        validate_experiment({**good, "seeds": []})


def test_load_experiment_roundtrip(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(tiny_experiment()))
    assert load_experiment(p) == tiny_experiment()


def test_cell_list_collapses_epsilon_for_non_private():
    cells = cell_list(tiny_experiment())
    np_cells = [c for c in cells if c[0] == "NON-PRIVATE"]
    dp_cells = [c for c in cells if c[0] == "DPFMPS-2P"]
    assert [c[1] for c in np_cells] == [None, None]
    assert sorted({c[1] for c in dp_cells}) == [1.0, 4.0]
    assert len(cells) == 2 + 4


def test_cell_list_applies_base_seed_offset():
    cells = cell_list(tiny_experiment(), base_seed=100)
    assert sorted({c[3] for c in cells}) == [100, 101]


def test_cell_config_applies_overrides():
    exp = preset("mixed-gaussian-table")
    assert cell_config(exp, "LDP-AGG-2P", 1.0).frac == 1.0
    assert cell_config(exp, "DPFMPS-2P", 1.0).frac == 0.98
    assert cell_config(exp, "NON-PRIVATE", None).estimator == "NON-PRIVATE"


# ---------------------------------------------------------------------------
# running matrices
# ---------------------------------------------------------------------------

def test_matrix_outputs_are_byte_identical(tmp_path):
    exp = tiny_experiment()
    a, b = tmp_path / "a", tmp_path / "b"
    rows1, fail1 = run_matrix(exp, out_dir=a)
    rows2, fail2 = run_matrix(exp, out_dir=b)
    assert fail1 == fail2 == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    header = (a / "results.csv").read_text().splitlines()[0]
    assert header == ",".join(RESULT_COLUMNS)


def test_matrix_worker_pool_matches_serial(tmp_path):
    exp = tiny_experiment()
    exp["estimators"] = ["NON-PRIVATE"]
    a, b = tmp_path / "serial", tmp_path / "pool"
    run_matrix(exp, out_dir=a, workers=1)
    run_matrix(exp, out_dir=b, workers=2)
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_matrix_base_seed_shifts_every_cell(tmp_path):
    exp = tiny_experiment()
    exp["estimators"] = ["NON-PRIVATE"]
    rows0, _ = run_matrix(exp)
    rows9, _ = run_matrix(exp, base_seed=9)
    assert [r["seed"] for r in rows0] == [0, 1]
    assert [r["seed"] for r in rows9] == [9, 10]
    assert rows0[0]["normalized_loss"] != rows9[0]["normalized_loss"]


def test_failing_cells_are_isolated(tmp_path):
    exp = tiny_experiment()
    # base frac 0.98 conflicts with LDP-AGG's all-local budget rule
    exp["estimators"] = ["NON-PRIVATE", "LDP-AGG"]
    rows, failures = run_matrix(exp, out_dir=tmp_path)
    ldp = [r for r in rows if r["estimator"] == "LDP-AGG"]
    ok = [r for r in rows if r["estimator"] == "NON-PRIVATE"]
    assert failures == len(ldp) == 4
    assert all(r["status"] == "error" for r in ldp)
    assert all(r["error"].startswith("ConfigInvalid") for r in ldp)
    assert all(r["status"] == "ok" for r in ok)
    text = (tmp_path / "results.csv").read_text()
    assert "error,ConfigInvalid" in text


def test_csv_data_cells_carry_labels(tmp_path):
    view, labels = gen_mixed_gaussian(120, 4, 3, seed=Seed(3))
    f = tmp_path / "d.csv"
    write_csv(f, view, labels=labels)
    exp = tiny_experiment()
    exp["data"] = {"kind": "csv", "path": str(f), "id_column": "id",
                   "label_column": "label",
                   "columns": ["x0", "x1", "x2", "x3"]}
    exp["estimators"] = ["NON-PRIVATE"]
    row = run_cell(exp, ("NON-PRIVATE", None, 2, 0))
    assert row["status"] == "ok"
    assert row["vscore"] is not None


def test_summary_equals_recomputation():
    exp = tiny_experiment()
    rows, _ = run_matrix(exp)
    summary = summarize(rows)
    for s in summary:
        group = [r for r in rows
                 if (r["estimator"], r["epsilon"], r["parties"])
                 == (s["estimator"], s["epsilon"], s["parties"])
                 and r["status"] == "ok"]
        assert s["runs"] == len(group)
        losses = [r["normalized_loss"] for r in group]
        assert s["median_loss"] == statistics.median(losses)
        assert s["mean_loss"] == statistics.fmean(losses)
        assert s["median_rel_err"] == statistics.median(
            r["rel_intersection_error"] for r in group)


def test_summary_skips_failed_rows():
    exp = tiny_experiment()
    exp["estimators"] = ["NON-PRIVATE"]
    rows, _ = run_matrix(exp)
    broken = copy.deepcopy(rows)
    broken[0]["status"] = "error"
    broken[0]["normalized_loss"] = None
    summary = summarize(broken)
    assert summary[0]["runs"] == len(rows) - 1
    all_bad = [dict(r, status="error") for r in copy.deepcopy(rows)]
    empty = summarize(all_bad)
    assert empty[0]["runs"] == 0
    assert empty[0]["median_loss"] is None


def test_results_json_embeds_full_reports(tmp_path):
    exp = tiny_experiment()
    exp["estimators"] = ["NON-PRIVATE"]
    rows, _ = run_matrix(exp, out_dir=tmp_path)
    payload = json.loads((tmp_path / "results.json").read_text())
    assert payload["experiment"] == exp
    report = payload["rows"][0]["report"]
    assert report["config"]["estimator"] == "NON-PRIVATE"
    assert "wall_time_sec" in report
