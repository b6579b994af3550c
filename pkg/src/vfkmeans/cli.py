"""Command-line entry points.

Verbs: gen-data (synthetic CSV + manifest), run (one protocol run), matrix
(experiment grid), eval (metrics from saved artifacts), calibrate (decoder
debias constants). Exit codes: 0 success, 2 bad configuration, 3 data or
file problems, 4 matrix finished but some cells failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .core import (
    ConfigInvalid,
    DataFormatError,
    InvalidParameter,
    Seed,
    SplitSpecInvalid,
    VfkmError,
)
from .data import (
    DEFAULT_SPREAD,
    gen_mixed_gaussian,
    ingest_csv,
    SplitSpec,
    vsplit,
    write_csv,
    write_manifest,
)
from .experiments import load_experiment, preset, run_matrix
from .federation import ESTIMATORS, LOCAL_ALGS, RunConfig, run_protocol
from .metrics import normalized_loss
from .clustering import assign_nearest, vscore
from .sketch import compute_xi

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CELLS = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--estimator", required=True, choices=ESTIMATORS)
    p.add_argument("--k", type=int, required=True,
                   help="number of final centers")
    p.add_argument("--local-k", default="auto",
                   help="per-party cluster count, or 'auto' (default)")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--frac", type=float, default=None,
                   help="party share of epsilon (default 0.98; LDP needs 1.0)")
    p.add_argument("--rows", type=int, default=4096,
                   help="sketch rows per cluster")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--local-alg", default="dplsf", choices=LOCAL_ALGS)
    p.add_argument("--sweeps", type=int, default=None)
    p.add_argument("--random-pairs", action="store_true")
    p.add_argument("--single-thread", action="store_true")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--id-column", default=None)
    p.add_argument("--label-column", default=None,
                   help="reference classes for the V-score; never clustered")
    p.add_argument("--columns", default=None,
                   help="comma-separated feature columns (default: all others)")
    p.add_argument("--clip-quantile", type=float, default=None)
    p.add_argument("--gen", nargs=3, type=int, metavar=("N", "M", "K"),
                   help="generate a mixed-Gaussian table instead of reading CSV")
    p.add_argument("--spread", type=float, default=DEFAULT_SPREAD)


def _config_from_args(args) -> RunConfig:
    local_k = args.local_k if args.local_k == "auto" else int(args.local_k)
    frac = args.frac
    if frac is None:
        frac = 1.0 if args.estimator in ("LDP-AGG", "LDP-AGG-2P") else 0.98
    return RunConfig(
        estimator=args.estimator, k=args.k, local_k=local_k,
        epsilon=args.epsilon, delta=args.delta, frac=frac, rows=args.rows,
        gamma=args.gamma, local_alg=args.local_alg, sweeps=args.sweeps,
        random_pairs=args.random_pairs, single_thread=args.single_thread)


def _load_dataset(args, seed: int):
    if (args.gen is None) == (args.data is None):
        raise ConfigInvalid("give exactly one of --data or --gen")
    if args.gen is not None:
        n, m, k = args.gen
        return gen_mixed_gaussian(n, m, k, spread=args.spread, seed=Seed(seed))
    columns = args.columns.split(",") if args.columns else None
    if columns is None and args.label_column is not None:
        with open(args.data, newline="") as fh:
            header = next(csv.reader(fh))
        columns = [c for c in header
                   if c != args.label_column and c != args.id_column]
    view, _ = ingest_csv(args.data, columns=columns,
                         clip_quantile=args.clip_quantile,
                         id_column=args.id_column)
    labels = None
    if args.label_column is not None:
        with open(args.data, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            j = header.index(args.label_column)
            labels = [int(float(row[j])) for row in reader]
    return view, labels


def cmd_gen_data(args) -> int:
    view, labels = gen_mixed_gaussian(args.n, args.m, args.k,
                                      spread=args.spread, seed=Seed(args.seed))
    write_csv(args.out + ".csv", view, labels)
    write_manifest(args.out + ".manifest.json", {
        "kind": "mixed-gaussian", "n": args.n, "m": args.m, "k": args.k,
        "spread": args.spread, "seed": args.seed,
        "id_column": "id", "label_column": "label",
        "columns": list(view.names),
    })
    print(f"wrote {args.out}.csv and {args.out}.manifest.json")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _config_from_args(args)
    view, labels = _load_dataset(args, args.seed)
    views = vsplit(view, SplitSpec(parties=args.parties), Seed(args.seed))
    centers, report = run_protocol(config, views, Seed(args.seed),
                                   true_labels=labels)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    if args.centers_out:
        # saved centers follow the input column order, not the split order
        split_names = [name for v in views for name in v.names]
        perm = [split_names.index(name) for name in view.names]
        with open(args.centers_out, "w") as fh:
            json.dump(centers[:, perm].tolist(), fh)
            fh.write("\n")
    return EXIT_OK


def cmd_matrix(args) -> int:
    if (args.experiment is None) == (args.preset is None):
        raise ConfigInvalid("give exactly one of --experiment or --preset")
    exp = preset(args.preset) if args.preset else load_experiment(args.experiment)
    _, failures = run_matrix(exp, out_dir=args.out_dir, workers=args.workers,
                             base_seed=args.seed)
    note = f" ({failures} failed cells)" if failures else ""
    print(f"{exp['name']}: wrote results to {args.out_dir}{note}")
    return EXIT_CELLS if failures else EXIT_OK


def cmd_eval(args) -> int:
    view, labels = _load_dataset(args, seed=args.seed)
    with open(args.centers) as fh:
        centers = np.asarray(json.load(fh), dtype=float)
    out = {"normalized_loss": normalized_loss(view.matrix, centers)}
    if labels is not None:
        out["vscore"] = vscore(labels, assign_nearest(view.matrix, centers))
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _write_xi_table(entries: dict) -> None:
    from . import _xi_table

    lines = [
        '"""Frozen harmonic-decoder calibration constants.',
        "",
        "Auto-generated by `vfkm calibrate --write`; do not edit by hand. Keys are",
        "(gamma, rows); values must equal compute_xi(gamma, rows) exactly.",
        '"""',
        "",
        "XI_TABLE = {",
    ]
    for (gamma, rows), xi in sorted(entries.items()):
        lines.append(f"    ({gamma!r}, {rows}): {xi!r},")
    lines.append("}")
    with open(_xi_table.__file__, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_calibrate(args) -> int:
    from ._xi_table import XI_TABLE

    if args.write:
        entries = dict(XI_TABLE)
        buckets = sorted({rows for (_, rows) in entries} or
                         {8, 64, 256, 1024, 4096, 16384})
        if args.rows not in buckets:
            buckets.append(args.rows)
        for rows in sorted(buckets):
            key = (float(args.gamma), int(rows))
            entries[key] = compute_xi(*key)
            print(f"gamma={key[0]} rows={key[1]} xi={entries[key]!r}")
        _write_xi_table(entries)
        print("rewrote the frozen table")
    else:
        xi = compute_xi(float(args.gamma), int(args.rows))
        frozen = XI_TABLE.get((float(args.gamma), int(args.rows)))
        print(f"xi={xi!r}" + ("" if frozen is None else
                              f" (frozen table: {frozen!r})"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vfkm",
        description="Differentially private vertical federated k-means")
    sub = ap.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic CSV + manifest")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--spread", type=float, default=DEFAULT_SPREAD)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output path prefix")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="one end-to-end protocol run")
    _add_config_flags(r)
    _add_data_flags(r)
    r.add_argument("--parties", type=int, required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", default=None, help="report JSON path (default stdout)")
    r.add_argument("--centers-out", default=None)
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("matrix", help="run an experiment grid")
    m.add_argument("--experiment", default=None, help="experiment JSON file")
    m.add_argument("--preset", default=None, help="built-in experiment name")
    m.add_argument("--out-dir", required=True)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--seed", type=int, required=True,
                   help="master seed added to every cell's seed offset")
    m.set_defaults(func=cmd_matrix)

    e = sub.add_parser("eval", help="metrics for saved centers on a dataset")
    _add_data_flags(e)
    e.add_argument("--centers", required=True, help="JSON array of centers")
    e.add_argument("--seed", type=int, default=0,
                   help="only used when the dataset comes from --gen")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", help="harmonic-decoder debias constant")
    c.add_argument("--gamma", type=float, default=1.0)
    c.add_argument("--rows", type=int, default=4096)
    c.add_argument("--write", action="store_true",
                   help="recompute the standard buckets and rewrite the table")
    c.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, InvalidParameter, SplitSpecInvalid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VfkmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
