"""Command-line entry point: ``probf {train,test,experiment,validate}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConditioningError, ConfigError, SolverStall
from .episodic import train_episodic, write_logs
from .experiments import (ExperimentConfig, emit_report, emit_trajectories, evaluate,
                          run_experiment, draw_test_points)
from .gp import GPResidualModel

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _load_config(args) -> ExperimentConfig:
    base = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.system:
        changes["system"] = args.system
    if args.delta is not None:
        changes["delta"] = args.delta
    if args.seed is not None:
        changes["base_seed"] = args.seed
        changes["seeds"] = None
    if args.out:
        changes["out_dir"] = args.out
    try:
        return dataclasses.replace(base, **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir or f"runs/{config.system}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    config = _load_config(args)
    setup = config.setup()
    seed = config.run_seeds[0]
    out = _out_dir(config)
    gp, logs = train_episodic(setup, config.episode_config(setup, seed))
    write_logs(logs, out / "episodes.jsonl")
    gp.save(out / "model.json")
    for rec in logs:
        print(json.dumps(rec.to_dict()))
    print(f"model written to {out / 'model.json'}")
    return EXIT_OK


def cmd_test(args) -> int:
    config = _load_config(args)
    setup = config.setup()
    seed = config.run_seeds[0]
    out = _out_dir(config)
    if args.model:
        gp = GPResidualModel.load(args.model)
    else:
        gp, _ = train_episodic(setup, config.episode_config(setup, seed))
    points = np.vstack([setup.region.center, draw_test_points(setup, seed, config.n_test_points)])
    trajs = {}
    violations = 0
    for k, x0 in enumerate(points):
        traj, outcome = evaluate(setup, gp, x0, config.delta, config.threshold, config.backoff())
        trajs[(seed, f"delta{config.delta:g}", k)] = traj
        violations += outcome.violated
        label = "center" if k == 0 else f"test {k}"
        print(f"{label}: min h = {outcome.min_h:.4f} violated={outcome.violated} "
              f"backoffs={outcome.backoff_events}")
    emit_trajectories(trajs, out)
    print(f"delta={config.delta:g}: {violations}/{len(points)} violations; "
          f"trajectories in {out / 'trajectories'}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _load_config(args)
    out = _out_dir(config)

    def progress(run):
        if run.excluded:
            print(f"seed {run.seed}: excluded ({run.reason})", flush=True)
        else:
            parts = ", ".join(f"{m} {r.violations}/{len(r.outcomes)}" for m, r in run.methods.items())
            print(f"seed {run.seed}: {parts}", flush=True)

    report = run_experiment(config, keep_trajectories=True, progress=progress)
    path = emit_report(report, out)
    summary = report.summary()
    for method in ("probf", "mean"):
        s = summary[method]
        print(f"{method}: {s['mean_pct']:.1f} +/- {s['std_pct']:.1f} % violations "
              f"({s['warnings']} runs with backoff warnings)")
    print(f"included {summary['included_runs']}, excluded {summary['excluded_runs']}; report at {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validation import gp_oracle_suite, socp_oracle_suite

    seed = args.seed or 0
    results = [gp_oracle_suite(seed=seed)] + socp_oracle_suite(seed=seed)
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, help_text in [
        ("train", cmd_train, "episodic training for one seed; writes model.json"),
        ("test", cmd_test, "filtered test rollouts at one delta"),
        ("experiment", cmd_experiment, "multi-seed probabilistic vs GP-mean filter comparison"),
        ("validate", cmd_validate, "oracle self-checks for the GP and the cone solver"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment JSON config")
        p.add_argument("--seed", type=int)
        p.add_argument("--delta", type=float)
        p.add_argument("--system", choices=("segway", "quadrotor"))
        p.add_argument("--out", help="output directory")
        if name == "test":
            p.add_argument("--model", help="trained model.json (trains first when omitted)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConditioningError, SolverStall) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
