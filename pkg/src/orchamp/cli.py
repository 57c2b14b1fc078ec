"""Command-line interface: ``orchamp {rank,fit,query,simulate}``.

Exit codes: 0 success, 2 usage error, 3 bad or unreadable input,
4 numerical failure (subcritical spike, rank-deficient design, divergence).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

from .errors import DataError, NumericalError, OrchAMPError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        w.writerows(rows)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_embedding(path, M):
    np.savetxt(path, np.atleast_2d(M.T).T, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_rank(args):
    from .dataset_io import load_matrix
    from .spectral import estimate_rank

    X = load_matrix(args.input)
    # gamma always comes from the matrix shape; the flag documents that.
    r = estimate_rank(X / np.sqrt(X.shape[0]), args.tol)
    print(r)
    return EXIT_OK


def cmd_fit(args):
    from .amp import run_config
    from .dataset_io import load_config, save_model

    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    res = run_config(cfg)
    for h, M in res.Ubar.items():
        _write_embedding(os.path.join(args.out, f"embeddings_{h}.csv"), M)
    for l, M in res.Ut.items():
        _write_embedding(os.path.join(args.out, f"embeddings_{l}.csv"), M)
    save_model(res.bundle, args.out)
    _write_csv(os.path.join(args.out, "se_record.csv"), ["t", "modality", "matrix", "row", "col", "value"],
               [(t, h, name, i, j, _fmt(v)) for t, h, name, i, j, v in res.record.rows()])
    print(f"fitted {len(res.Ubar)} high-dimensional and {len(res.Ut)} low-dimensional modalities "
          f"over {cfg.iterations + 1} iterations; outputs in {args.out}")
    return EXIT_OK


def cmd_query(args):
    from .dataset_io import load_model, save_matrix
    from .predict import load_query, predict_set

    bundle = load_model(args.model)
    query = load_query(args.query)
    ps = predict_set(bundle, query, args.alpha, M=args.samples, seed=args.seed,
                     keep_samples=args.save_samples)
    out = args.out if args.out is not None else (
        args.model if os.path.isdir(args.model) else os.path.dirname(os.path.abspath(args.model)))
    os.makedirs(out, exist_ok=True)
    lay = bundle.coords()
    doc = {
        "alpha": args.alpha,
        "center": [float(x) for x in ps.center],
        "layout": {k: [int(i) for i in np.arange(ps.center.size)[v]] for k, v in lay.items()},
        "mc_samples": args.samples,
        "radius": ps.radius,
        "seed": args.seed,
    }
    if args.save_samples:
        save_matrix(os.path.join(out, "query_samples.bin"), ps.samples)
        doc["samples"] = "query_samples.bin"
    _write_json(os.path.join(out, "query_result.json"), doc)
    print(json.dumps({"center": doc["center"], "radius": ps.radius}))
    return EXIT_OK


def cmd_simulate(args):
    from .amp import run
    from .dataset_io import save_matrix
    from .synthetic import coverage_experiment, oracle_for, parse_scenario, scenario_data, se_report

    try:
        with open(args.scenario) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.scenario}: invalid JSON ({exc})") from exc
    sc = parse_scenario(doc)
    os.makedirs(args.out, exist_ok=True)
    ds, truth = scenario_data(sc)
    for h, X in ds.high.items():
        save_matrix(os.path.join(args.out, f"data_{h}.bin"), X * np.sqrt(ds.N))
    for l, X in ds.low.items():
        save_matrix(os.path.join(args.out, f"data_{l}.bin"), X)
    for h in truth.D:
        save_matrix(os.path.join(args.out, f"truth_U_{h}.bin"), truth.U[h])
        save_matrix(os.path.join(args.out, f"truth_V_{h}.bin"), truth.V[h])
    for l in truth.L:
        save_matrix(os.path.join(args.out, f"truth_U_{l}.bin"), truth.Ut[l])
    res = run(ds, iterations=sc.iterations, ranks={h: d.size for h, d in sc.D.items()},
              seed=sc.seed, keep_history=True)
    oracle = oracle_for(sc, truth)
    _write_csv(os.path.join(args.out, "oracle_se.csv"), ["t", "modality", "matrix", "row", "col", "value"],
               [(t, k, name, i, j, _fmt(v)) for t, k, name, i, j, v in oracle.rows()])
    rows = se_report(res, oracle, truth)
    cols = ["t", "modality", "sigma_L_empirical", "sigma_L_oracle", "sigma_L_maxdiff",
            "mse_empirical", "mse_oracle"]

    def cell(v):
        if isinstance(v, list):
            return json.dumps(v)
        if isinstance(v, float):
            return _fmt(v)
        return v

    _write_csv(os.path.join(args.out, "se_report.csv"), cols, [[cell(r[c]) for c in cols] for r in rows])
    worst = max((r["sigma_L_maxdiff"] for r in rows if r["modality"] in sc.D), default=float("nan"))
    print(f"state evolution: max |Sigma_L empirical - oracle| = {worst:.4f}")
    cov = sc.coverage
    if cov and int(cov.get("queries", 0)) > 0:
        c, radii, hits = coverage_experiment(
            res.bundle, truth, cov.get("observe", {next(iter(sc.D)): 0.5}), int(cov["queries"]),
            float(cov.get("alpha", 0.1)), int(cov.get("mc_samples", 100_000)), sc.seed)
        _write_csv(os.path.join(args.out, "coverage_report.csv"), ["query", "covered", "radius"],
                   [(q, int(hit), _fmt(rad)) for q, (hit, rad) in enumerate(zip(hits, radii))])
        print(f"coverage: {c:.4f} (nominal {1 - float(cov.get('alpha', 0.1)):.2f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _alpha(s):
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return v


def _samples(s):
    v = int(s)
    if v < 1000:
        raise argparse.ArgumentTypeError("need at least 1000 samples")
    return v


def _nonneg(s):
    v = float(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


def _seed(s):
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def build_parser():
    from . import __version__

    p = argparse.ArgumentParser(prog="orchamp", description="Orchestrated AMP for multimodal low-rank data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rank", help="estimate the number of spikes above the noise bulk")
    r.add_argument("--input", required=True, help="raw N x p matrix (CSV or binary)")
    r.add_argument("--gamma-from-shape", action="store_true",
                   help="take gamma = p / N from the matrix shape (always the case)")
    r.add_argument("--tol", type=_nonneg, default=0.02, help="relative margin above the bulk edge")
    r.set_defaults(func=cmd_rank)

    f = sub.add_parser("fit", help="run the full pipeline from a JSON config")
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("query", help="prediction set for a partially observed subject")
    q.add_argument("--model", required=True, help="bundle directory or bundle.json")
    q.add_argument("--query", required=True, help="query JSON")
    q.add_argument("--alpha", type=_alpha, default=0.1)
    q.add_argument("--samples", type=_samples, default=100_000, help="Monte Carlo draws for the radius")
    q.add_argument("--seed", type=_seed, default=0)
    q.add_argument("--out", default=None, help="output directory (default: the model directory)")
    q.add_argument("--save-samples", action="store_true", help="also write the posterior draws")
    q.set_defaults(func=cmd_query)

    s = sub.add_parser("simulate", help="synthetic data, oracle comparison and coverage report")
    s.add_argument("--scenario", required=True, help="scenario JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)
    return p


def exit_code(exc):
    """Numerical failures map to 4; everything else about the inputs maps to 3."""
    return EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_DATA


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (OrchAMPError, OSError) as exc:
        print(f"orchamp {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
