"""Command-line entry point: ``partial-options <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import taxi
from .affordances import HEURISTIC_SETS, AffordanceSet, model_intents, taxi_heuristic_affordances
from .bounds import bound_report, certify_bounds, random_smdp
from .harness import (ExperimentConfig, SEED_ENV, run_experiment, run_learned_affordance_sweep, seed_from_env,
                      sweep_summary, transitions_to_success, write_results, write_set_sizes)
from .mdp_core import random_mdp, value_iteration
from .option_models import enumerate_trajectories, exact_option_model
from .options import primitive_options, pretrain_taxi_options, random_options
from .planner import smdp_qvi


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _root_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    return seed_from_env() if SEED_ENV in os.environ else None


def _config(args, defaults: dict[str, str] | None = None) -> ExperimentConfig:
    overrides = _overrides(args.set)
    if args.config:
        config = ExperimentConfig.from_file(args.config, overrides, defaults)
    else:
        config = ExperimentConfig.from_mapping({**(defaults or {}), **overrides})
    root = _root_seed(args)
    if root is not None:
        # the root seed shifts the whole seed tuple, keeping its length
        config = config.replace(seeds=tuple(root + i for i in range(len(config.seeds))))
    return config


def _open_out(path: str | None):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


# --- subcommands -----------------------------------------------------------------

def cmd_pretrain_options(args) -> int:
    mdp = taxi.build_taxi_mdp(args.gamma)
    options = pretrain_taxi_options(mdp)
    fh = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("option_id", "name", "state", "action", "beta"))
        for o in options:
            for s in range(mdp.n_states):
                w.writerow((o.id, o.name, s, int(o.policy[s]), repr(float(o.termination[s]))))
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.out not in (None, "-"):
        print(f"wrote {len(options)} options over {mdp.n_states} states to {args.out}")
    return 0


def _print_summary(results, out=None) -> None:
    out = sys.stderr if out is None else out
    for r in results:
        status = f"diverged ({r.divergence})" if r.diverged else "ok"
        final = r.rows[-1].success_rate if r.rows else float("nan")
        print(f"seed {r.seed}: {len(r.rows)} evaluations, final success {final:.3f}, "
              f"transitions to 0.9: {transitions_to_success(r):g}, {status}", file=out)


def cmd_run_experiment(args) -> int:
    config = _config(args)
    results = run_experiment(config)
    fh = _open_out(args.out)
    try:
        write_results([row for r in results for row in r.rows], fh)
    finally:
        if fh is not sys.stdout:
            fh.close()
    _print_summary(results)
    return 1 if any(r.diverged for r in results) and args.fail_on_divergence else 0


def cmd_learned_affordances(args) -> int:
    config = _config(args, {"train_set": "pickup_drop_at_goal"})
    ks = tuple(float(k) for k in args.ks.split(",")) if args.ks else None
    sweep = run_learned_affordance_sweep(config, ks)
    fh = _open_out(args.out)
    try:
        rows = []
        for results in sweep.values():
            rows.extend(row for r in results for row in r.rows)
        write_results(rows, fh)
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.sizes_out:
        with open(args.sizes_out, "w", newline="") as sf:
            write_set_sizes(sweep, sf)
    for entry in sweep_summary(sweep):
        print(f"k={entry['k']:.2f}  final set size {entry['final_set_size']:.0f}  "
              f"transitions to 0.9 {entry['transitions_to_success']:g}  diverged {entry['diverged']}",
              file=sys.stderr)
    return 0


def cmd_compute_bounds(args) -> int:
    if args.instance == "taxi":
        mdp = taxi.build_taxi_mdp(args.gamma or taxi.DEFAULT_GAMMA)
        options = pretrain_taxi_options(mdp)
        affordances = taxi_heuristic_affordances(args.affordances)
    else:
        inst = random_smdp(np.random.default_rng(_root_seed(args) or 0), gamma=args.gamma or 0.9)
        mdp, options = inst.mdp, inst.options
        affordances = AffordanceSet(np.ones((mdp.n_states, len(options)), bool), "everything")
    model = exact_option_model(mdp, options)
    return_bound = float(np.max(np.abs(mdp.reward))) / (1.0 - mdp.gamma)
    report = bound_report(model, model_intents(model), affordances, mdp.gamma, return_bound,
                          n=args.n, delta=args.delta, eps=args.eps, terminal_mask=mdp.terminal_mask)
    print(report.to_json() if args.json else report.to_text().rstrip("\n"))
    if args.certify:
        cert = certify_bounds(args.certify, np.random.default_rng(_root_seed(args) or 0), delta=args.delta)
        print(cert.to_json() if args.json else cert.to_text())
    return 0


def cmd_certify_bounds(args) -> int:
    rng = np.random.default_rng(_root_seed(args) or 0)
    report = certify_bounds(args.trials, rng, delta=args.delta, n=args.n)
    print(report.to_json() if args.json else report.to_text())
    rates = report.pass_rates()
    return 0 if all(v >= 1.0 - args.delta for v in rates.values()) else 1


def verify_oracles(n_instances: int = 50, seed: int = 0) -> dict[str, float]:
    """Largest disagreement between the exact solvers and their brute-force oracles."""
    rng = np.random.default_rng(seed)
    horizon = 64
    enum_err = 0.0
    for _ in range(n_instances):
        mdp = random_mdp(6, 3, 0.7, rng)
        options = random_options(mdp, 3, rng, (0.3, 1.0))
        model = exact_option_model(mdp, options)
        dense = model.dense()
        for o, opt in enumerate(options):
            for s in range(mdp.n_states):
                traj = enumerate_trajectories(mdp, opt, s, horizon)
                enum_err = max(enum_err, float(np.max(np.abs(traj.discounted_distribution() - dense[s, o]))),
                               abs(traj.expected_return() - float(model.R[s, o])))
    vi_err = 0.0
    for _ in range(n_instances):
        mdp = random_mdp(int(rng.integers(3, 12)), int(rng.integers(2, 5)), float(rng.uniform(0.5, 0.95)), rng)
        model = exact_option_model(mdp, primitive_options(mdp))
        q = smdp_qvi(model, np.ones(model.reward.shape, bool), tol=1e-12, terminal_mask=mdp.terminal_mask)
        vi = value_iteration(mdp, tol=1e-12)
        vi_err = max(vi_err, float(np.max(np.abs(q.state_values - vi.values))))
    return {"exact_vs_enumeration": enum_err, "primitive_qvi_vs_value_iteration": vi_err}


def cmd_verify_oracles(args) -> int:
    t0 = time.perf_counter()
    errors = verify_oracles(args.instances, _root_seed(args) or 0)
    limits = {"exact_vs_enumeration": 1e-6, "primitive_qvi_vs_value_iteration": 1e-8}
    ok = True
    for key, err in errors.items():
        passed = err <= limits[key]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {key}: max error {err:.3e} (limit {limits[key]:g})")
    print(f"{time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


# --- parser ------------------------------------------------------------------------

def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--out", help="result table path (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partial-options",
                                     description="Partial option models and affordances on Taxi.")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"root seed (default: ${SEED_ENV}, else the configured seeds)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-options", help="build the 75 taxi options and write their tables")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--gamma", type=float, default=taxi.DEFAULT_GAMMA)
    p.set_defaults(func=cmd_pretrain_options)

    p = sub.add_parser("run-experiment", help="heuristic-affordance learning curves")
    _experiment_args(p)
    p.add_argument("--fail-on-divergence", action="store_true")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("learned-affordances", help="learned-affordance threshold sweep")
    _experiment_args(p)
    p.add_argument("--ks", help="comma-separated thresholds (default: the config's k_sweep)")
    p.add_argument("--sizes-out", help="learned set-size table path")
    p.set_defaults(func=cmd_learned_affordances)

    p = sub.add_parser("compute-bounds", help="bound report for an exact-model instance")
    p.add_argument("--instance", choices=("taxi", "random"), default="taxi")
    p.add_argument("--affordances", choices=HEURISTIC_SETS, default="everything")
    p.add_argument("--gamma", type=float, default=None, help="discount (default: 0.99 taxi, 0.9 random)")
    p.add_argument("--n", type=int, default=1000, help="samples per afforded pair")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--certify", type=int, default=0, metavar="TRIALS", help="append a certification run")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compute_bounds)

    p = sub.add_parser("certify-bounds", help="check the bounds on random small SMDPs")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_certify_bounds)

    p = sub.add_parser("verify-oracles", help="exact solvers against brute-force oracles")
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_verify_oracles)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
