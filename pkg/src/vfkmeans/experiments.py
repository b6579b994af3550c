"""Experiment matrices: grids over estimator, epsilon, party count and seed.

An experiment is a flat JSON document; every cell of the grid is fully
determined by its (estimator, epsilon, parties, seed) coordinates, so cells
can run in any order or in a worker pool without changing the outputs. Cell
failures are recorded as flagged rows and never abort the matrix.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor

from .core import ConfigInvalid, Seed
from .data import SplitSpec, gen_mixed_gaussian, ingest_csv, vsplit
from .federation import ESTIMATORS, RunConfig, run_protocol

_EXPERIMENT_KEYS = {"name", "data", "base", "estimators", "epsilons",
                    "parties", "seeds", "overrides"}

RESULT_COLUMNS = ("estimator", "epsilon", "parties", "seed",
                  "normalized_loss", "vscore", "rel_intersection_error",
                  "bytes_max", "status", "error")
SUMMARY_COLUMNS = ("estimator", "epsilon", "parties", "runs", "median_loss",
                   "mean_loss", "median_rel_err", "mean_vscore",
                   "mean_bytes_max")


def preset(name: str) -> dict:
    """Built-in experiment documents addressable by name."""
    if name == "mixed-gaussian-table":
        return {
            "name": "mixed-gaussian-table",
            "data": {"kind": "mixed-gaussian", "n": 20000, "m": 8, "k": 5},
            "base": {"k": 5, "local_k": 5, "delta": 5e-5, "rows": 4096,
                     "gamma": 1.0, "frac": 0.98, "local_alg": "dplsf"},
            "overrides": {"LDP-AGG": {"frac": 1.0},
                          "LDP-AGG-2P": {"frac": 1.0}},
            "estimators": ["NON-PRIVATE", "DPFMPS-Basic", "DPFMPS-2P",
                           "IND-LAP", "LDP-AGG-2P"],
            "epsilons": [1.0, 4.0],
            "parties": [2, 4],
            "seeds": list(range(10)),
        }
    raise ConfigInvalid(f"unknown preset {name!r}")


def load_experiment(path) -> dict:
    with open(path) as fh:
        exp = json.load(fh)
    validate_experiment(exp)
    return exp


def validate_experiment(exp: dict) -> None:
    if not isinstance(exp, dict):
        raise ConfigInvalid("experiment file must hold a JSON object")
    extra = set(exp) - _EXPERIMENT_KEYS
    if extra:
        raise ConfigInvalid(f"unknown experiment keys: {sorted(extra)}")
    missing = {"name", "data", "base", "estimators", "epsilons", "parties",
               "seeds"} - set(exp)
    if missing:
        raise ConfigInvalid(f"experiment file missing keys: {sorted(missing)}")
    for est in exp["estimators"]:
        if est not in ESTIMATORS:
            raise ConfigInvalid(f"unknown estimator {est!r}")
    for extra_est in exp.get("overrides", {}):
        if extra_est not in ESTIMATORS:
            raise ConfigInvalid(f"override for unknown estimator {extra_est!r}")
    kind = exp["data"].get("kind")
    if kind not in ("mixed-gaussian", "csv"):
        raise ConfigInvalid(f"unknown data kind {kind!r}")
    if not exp["epsilons"] or not exp["parties"] or not exp["seeds"]:
        raise ConfigInvalid("epsilons, parties and seeds must be non-empty")
    if len(exp["estimators"]) == 0:
        raise ConfigInvalid("estimators must be non-empty")


def cell_list(exp: dict, base_seed: int = 0) -> list:
    """Grid coordinates in output order.

    The file's seeds are offsets added to base_seed, so one experiment file
    reruns under a fresh master seed without edits. NON-PRIVATE ignores
    epsilon and contributes one cell per (parties, seed) with epsilon
    recorded as None.
    """
    cells = []
    for est in exp["estimators"]:
        eps_axis = [None] if est == "NON-PRIVATE" else exp["epsilons"]
        for eps in eps_axis:
            for s in exp["parties"]:
                for seed in exp["seeds"]:
                    cells.append((est, eps, int(s), base_seed + int(seed)))
    return cells


def _load_cell_data(spec: dict, seed: int):
    if spec["kind"] == "mixed-gaussian":
        kwargs = {"n": spec["n"], "m": spec["m"], "k": spec["k"]}
        if "spread" in spec:
            kwargs["spread"] = spec["spread"]
        return gen_mixed_gaussian(seed=Seed(seed), **kwargs)
    view, _ = ingest_csv(spec["path"], columns=spec.get("columns"),
                         clip_quantile=spec.get("clip_quantile"),
                         id_column=spec.get("id_column"))
    labels = None
    label_column = spec.get("label_column")
    if label_column is not None:
        with open(spec["path"], newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            j = header.index(label_column)
            labels = [int(float(row[j])) for row in reader]
    return view, labels


def cell_config(exp: dict, estimator: str, epsilon) -> RunConfig:
    base = dict(exp["base"])
    base.update(exp.get("overrides", {}).get(estimator, {}))
    base["estimator"] = estimator
    if epsilon is not None:
        base["epsilon"] = float(epsilon)
    cfg = RunConfig.from_dict(base)
    return cfg


def run_cell(exp: dict, cell: tuple) -> dict:
    """One grid cell; exceptions become a flagged row, not a crash."""
    est, eps, parties, seed = cell
    row = {"estimator": est, "epsilon": eps, "parties": parties, "seed": seed,
           "normalized_loss": None, "vscore": None,
           "rel_intersection_error": None, "bytes_max": None,
           "status": "ok", "error": None, "report": None}
    try:
        config = cell_config(exp, est, eps)
        view, labels = _load_cell_data(exp["data"], seed)
        views = vsplit(view, SplitSpec(parties=parties), Seed(seed))
        _, report = run_protocol(config, views, Seed(seed), true_labels=labels)
        row["normalized_loss"] = report.normalized_loss
        row["vscore"] = report.vscore
        row["rel_intersection_error"] = report.rel_intersection_error
        row["bytes_max"] = max(report.bytes_per_party)
        row["report"] = report.to_dict()
    except Exception as exc:  # noqa: BLE001 - cell isolation contract
        row["status"] = "error"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _cell_worker(args):
    exp, cell = args
    return run_cell(exp, cell)


def run_matrix(exp: dict, out_dir=None, workers: int = 1,
               base_seed: int = 0):
    """Run every cell; optionally write results under out_dir.

    Returns (rows, failure_count). Row order always follows cell_list, so
    outputs are byte-identical across reruns and worker counts.
    """
    validate_experiment(exp)
    cells = cell_list(exp, base_seed)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell_worker, [(exp, c) for c in cells]))
    else:
        rows = [run_cell(exp, c) for c in cells]
    failures = sum(r["status"] != "ok" for r in rows)
    if out_dir is not None:
        write_outputs(exp, rows, out_dir)
    return rows, failures


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_outputs(exp: dict, rows: list, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in summarize(rows):
            writer.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    payload = {"experiment": exp, "rows": rows}
    with open(os.path.join(out_dir, "results.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def summarize(rows: list) -> list:
    """Medians/means per (estimator, epsilon, parties) over successful rows."""
    groups: dict = {}
    order = []
    for row in rows:
        key = (row["estimator"], row["epsilon"], row["parties"])
        if key not in groups:
            groups[key] = []
            order.append(key)
        if row["status"] == "ok":
            groups[key].append(row)
    out = []
    for key in order:
        ok = groups[key]
        est, eps, parties = key
        summary = {"estimator": est, "epsilon": eps, "parties": parties,
                   "runs": len(ok), "median_loss": None, "mean_loss": None,
                   "median_rel_err": None, "mean_vscore": None,
                   "mean_bytes_max": None}
        if ok:
            losses = [r["normalized_loss"] for r in ok]
            summary["median_loss"] = statistics.median(losses)
            summary["mean_loss"] = statistics.fmean(losses)
            summary["median_rel_err"] = statistics.median(
                r["rel_intersection_error"] for r in ok)
            scores = [r["vscore"] for r in ok if r["vscore"] is not None]
            if scores:
                summary["mean_vscore"] = statistics.fmean(scores)
            summary["mean_bytes_max"] = statistics.fmean(
                r["bytes_max"] for r in ok)
        out.append(summary)
    return out
