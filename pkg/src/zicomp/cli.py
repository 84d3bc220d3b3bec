"""Command-line entry point: simulate, fit, diagnose, summarize.

Config values merge as defaults < --config JSON < explicit flags, and
the merged config is echoed into the output directory for provenance.
Exit codes: 0 success, 2 usage or I/O error, 3 numeric abort (a
checkpoint path is printed), 4 missing input artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import diagnostics as dg
from . import harness as hz
from .comp import NumericsError
from .model import load_dataset_csv, state_to_json
from .sampler import ChainAbort, ChainConfig, load_output, run_chain, save_output
from .spatial import GraphFormatError, basis_for_graph, load_graph, save_graph

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

_PRESETS = {
    "desk-full": ("full", dict(dims=(10, 10), T=6, q_true=10, q_fit=20)),
    "desk-const": ("const_dispersion", dict(dims=(10, 10), T=6, q_true=10, q_fit=20)),
    "desk-fixed": ("fixed_only", dict(dims=(10, 10), T=6, q_true=10, q_fit=20)),
    "desk-covariate": ("covariate_only", dict(dims=(10, 10), T=6, q_true=10, q_fit=20)),
    "paper-full": ("full", dict(dims=(30, 30), T=24, q_true=25, q_fit=50)),
    "paper-const": ("const_dispersion", dict(dims=(30, 30), T=24, q_true=25, q_fit=50)),
    "paper-fixed": ("fixed_only", dict(dims=(30, 30), T=24, q_true=25, q_fit=50)),
    "paper-covariate": ("covariate_only", dict(dims=(30, 30), T=24, q_true=25, q_fit=50)),
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zicomp")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a synthetic dataset from a scenario")
    sim.add_argument("--preset", choices=sorted(_PRESETS))
    sim.add_argument("--scenario", choices=hz.SCENARIO_IDS)
    sim.add_argument("--rows", type=int, default=10)
    sim.add_argument("--cols", type=int, default=10)
    sim.add_argument("--periods", type=int, default=6)
    sim.add_argument("--q-true", type=int, default=10)
    sim.add_argument("--q-fit", type=int, default=20)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--replicate", type=int, default=0)
    sim.add_argument("--out", required=True)

    fit = sub.add_parser("fit", help="run the sampler on a dataset")
    fit.add_argument("--data", required=True)
    fit.add_argument("--graph", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--config")
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--burn-in", type=int)
    fit.add_argument("--thin", type=int)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--q", type=int)
    fit.add_argument("--rho", type=float)
    fit.add_argument("--zip", action="store_true", default=None,
                     help="freeze dispersion at nu=1 (Poisson count process)")
    fit.add_argument("--method", choices=("exchange", "tractable"))
    fit.add_argument("--indicator-period", type=int)
    fit.add_argument("--indicator-mode", choices=("every_k", "random_m"))
    fit.add_argument("--reference-month", type=int)
    fit.add_argument("--standardize", action="store_true", default=None)
    fit.add_argument("--checkpoint-every", type=int)
    fit.add_argument("--resume", help="checkpoint file to continue from")
    fit.add_argument("--threads", type=int, default=1,
                     help="worker processes for replicate-level tools; "
                          "a single chain always runs one thread")

    diag = sub.add_parser("diagnose", help="residuals and predictive summaries")
    diag.add_argument("--fit", required=True, help="fit output directory or samples.npz")
    diag.add_argument("--data", required=True)
    diag.add_argument("--graph", required=True)
    diag.add_argument("--out", required=True)
    diag.add_argument("--rqr", action="store_true")
    diag.add_argument("--predictive-draws", type=int, default=10_000)
    diag.add_argument("--seed", type=int, default=0)
    diag.add_argument("--reference-month", type=int, default=0)

    summ = sub.add_parser("summarize", help="posterior summary table")
    summ.add_argument("--fit", required=True)
    summ.add_argument("--out", required=True)
    summ.add_argument("--level", type=float, default=0.95)
    return p


def _ensure_out(path) -> None:
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write_probe")
    with open(probe, "w") as fh:
        fh.write("")
    os.remove(probe)


def _echo_config(out_dir, config: dict) -> None:
    with open(os.path.join(out_dir, "config_used.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _samples_path(fit_arg) -> str:
    if os.path.isdir(fit_arg):
        return os.path.join(fit_arg, "samples.npz")
    return fit_arg


def _cmd_simulate(args) -> int:
    if args.preset:
        scenario_id, kw = _PRESETS[args.preset]
        scenario = hz.make_scenario(scenario_id, seed=args.seed, **kw)
    elif args.scenario:
        scenario = hz.make_scenario(
            args.scenario,
            dims=(args.rows, args.cols),
            T=args.periods,
            q_true=args.q_true,
            q_fit=args.q_fit,
            seed=args.seed,
        )
    else:
        print("simulate: need --preset or --scenario", file=sys.stderr)
        return EXIT_USAGE
    _ensure_out(args.out)
    data, truth, _ = hz.replicate_dataset(scenario, args.replicate)
    from .model import save_dataset_csv

    save_dataset_csv(data, os.path.join(args.out, "data.csv"))
    save_graph(data.graph, os.path.join(args.out, "graph.txt"))
    with open(os.path.join(args.out, "truth.json"), "w") as fh:
        fh.write(
            json.dumps(
                {
                    "scenario": json.loads(hz.scenario_to_json(scenario)),
                    "state": json.loads(state_to_json(truth)),
                },
                indent=2,
            )
        )
    _echo_config(
        args.out,
        {
            "command": "simulate",
            "preset": args.preset,
            "scenario": json.loads(hz.scenario_to_json(scenario)),
            "replicate": args.replicate,
            "seed": args.seed,
        },
    )
    print(f"simulate: wrote {data.observed.sum()} cells to {args.out}")
    return EXIT_OK


_FIT_DEFAULTS = {
    "iterations": 10_000,
    "burn_in": None,
    "thin": 1,
    "seed": 0,
    "q": 20,
    "rho": 0.99,
    "zip": False,
    "method": None,
    "indicator_period": 10,
    "indicator_mode": "every_k",
    "reference_month": 0,
    "standardize": False,
    "checkpoint_every": 0,
}


def _merge_fit_config(args) -> dict:
    merged = dict(_FIT_DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            print(f"fit: config file not found: {args.config}", file=sys.stderr)
            raise FileNotFoundError(args.config)
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in merged:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            merged[key] = flag_val
    return merged


def _cmd_fit(args) -> int:
    for path, label in ((args.data, "dataset"), (args.graph, "graph")):
        if not os.path.exists(path):
            print(f"fit: missing {label} file: {path}", file=sys.stderr)
            return EXIT_MISSING
    if args.resume and not os.path.exists(args.resume):
        print(f"fit: missing checkpoint: {args.resume}", file=sys.stderr)
        return EXIT_MISSING
    try:
        merged = _merge_fit_config(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"fit: bad config: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _ensure_out(args.out)
    except OSError as err:
        print(f"fit: cannot write to {args.out}: {err}", file=sys.stderr)
        return EXIT_USAGE
    log_path = os.path.join(args.out, "progress.log")
    handler = logging.FileHandler(log_path, mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    logging.getLogger("zicomp.sampler").addHandler(handler)
    logging.getLogger("zicomp.sampler").setLevel(logging.INFO)
    try:
        graph = load_graph(args.graph)
        data = load_dataset_csv(
            args.data,
            graph,
            reference_month=merged["reference_month"],
            standardize=merged["standardize"],
        )
    except (GraphFormatError, ValueError) as err:
        print(f"fit: {err}", file=sys.stderr)
        return EXIT_USAGE
    method = merged["method"]
    if method is None:
        method = "tractable" if merged["zip"] else "exchange"
    cfg = ChainConfig(
        n_iterations=merged["iterations"],
        burn_in=merged["burn_in"],
        thin=merged["thin"],
        seed=merged["seed"],
        method=method,
        zip_constrained=merged["zip"],
        indicator_period=merged["indicator_period"],
        indicator_mode=merged["indicator_mode"],
        q=merged["q"],
        rho=merged["rho"],
        checkpoint_every=merged["checkpoint_every"],
        checkpoint_path=os.path.join(args.out, "checkpoint.npz"),
    )
    merged["method"] = method
    _echo_config(args.out, {"command": "fit", **merged})
    try:
        basis = basis_for_graph(graph, cfg.q, cfg.rho, cache_dir=args.out)
        out = run_chain(data, basis, cfg, resume_from=args.resume)
    except ChainAbort as err:
        print(f"fit: numeric abort: {err} (checkpoint: {err.checkpoint_path})",
              file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        # e.g. a checkpoint whose run configuration disagrees with this one
        print(f"fit: {err}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        logging.getLogger("zicomp.sampler").removeHandler(handler)
        handler.close()
    save_output(out, os.path.join(args.out, "samples.npz"))
    print(
        f"fit: kept {out.n_kept} samples over {cfg.n_iterations} iterations; "
        f"outputs in {args.out}"
    )
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    samples_path = _samples_path(args.fit)
    for path, label in (
        (samples_path, "fit output"),
        (args.data, "dataset"),
        (args.graph, "graph"),
    ):
        if not os.path.exists(path):
            print(f"diagnose: missing {label}: {path}", file=sys.stderr)
            return EXIT_MISSING
    try:
        _ensure_out(args.out)
        graph = load_graph(args.graph)
        data = load_dataset_csv(args.data, graph, reference_month=args.reference_month)
        out = load_output(samples_path)
    except (GraphFormatError, ValueError) as err:
        print(f"diagnose: {err}", file=sys.stderr)
        return EXIT_USAGE
    if out.n_kept == 0:
        print("diagnose: fit has no retained samples", file=sys.stderr)
        return EXIT_MISSING
    _echo_config(
        args.out,
        {
            "command": "diagnose",
            "fit": args.fit,
            "rqr": bool(args.rqr),
            "predictive_draws": args.predictive_draws,
            "seed": args.seed,
        },
    )
    basis = basis_for_graph(graph, out.config.q, out.config.rho, cache_dir=args.out)
    rng = np.random.default_rng(args.seed)
    try:
        inc_g, mg = dg.inclusion_probabilities(out.samples["ind_gamma"])
        inc_d, md = dg.inclusion_probabilities(out.samples["ind_delta"])
        dg.write_inclusion_csv(inc_g, mg, inc_d, md, os.path.join(args.out, "inclusion.csv"))
        mean, err = dg.posterior_predictive_mean(
            out.samples, data, basis, args.predictive_draws, rng
        )
        dg.write_predictive_csv(mean, err, data, os.path.join(args.out, "predictive_mean.csv"))
        if args.rqr:
            from .model import compute_predictors

            state = dg.point_state_from_samples(out.samples, data, basis.q)
            pred = compute_predictors(state, data, basis)
            res = dg.rqr(data, pred, rng, tol=out.config.normalizer_tol, seed=args.seed)
            dg.write_rqr_csv(res, data, os.path.join(args.out, "rqr.csv"))
            print(f"diagnose: rqr infinite count = {res.n_infinite}")
    except NumericsError as err:
        print(f"diagnose: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    dg.write_schema(os.path.join(args.out, "schema.json"))
    print(f"diagnose: outputs in {args.out}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    samples_path = _samples_path(args.fit)
    if not os.path.exists(samples_path):
        print(f"summarize: missing fit output: {samples_path}", file=sys.stderr)
        return EXIT_MISSING
    if not 0.0 < args.level < 1.0:
        print("summarize: --level must lie in (0,1)", file=sys.stderr)
        return EXIT_USAGE
    try:
        _ensure_out(args.out)
        out = load_output(samples_path)
    except (ValueError, OSError) as err:
        print(f"summarize: {err}", file=sys.stderr)
        return EXIT_USAGE
    if out.n_kept == 0:
        print("summarize: fit has no retained samples", file=sys.stderr)
        return EXIT_MISSING
    _echo_config(args.out, {"command": "summarize", "fit": args.fit, "level": args.level})
    rows = dg.summary_table(out.samples, level=args.level)
    dg.write_summary_csv(rows, os.path.join(args.out, "summary.csv"))
    dg.write_schema(os.path.join(args.out, "schema.json"))
    print(f"summarize: wrote {len(rows)} parameter rows to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "diagnose":
            return _cmd_diagnose(args)
        return _cmd_summarize(args)
    except OSError as err:
        print(f"{args.command}: I/O error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
