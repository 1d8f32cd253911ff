"""Planar quadrotor: train each seed episodically, then compare the probabilistic filter
(delta from the config) with the GP-mean filter (delta = 0) on shared test points.

    python3 scripts/run_quadrotor.py [--runs N] [--out DIR]
"""

import argparse
import dataclasses
import time
from pathlib import Path

from probf.experiments import ExperimentConfig, emit_report, run_experiment

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "quadrotor.json"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs", type=int, help="number of seeds (config default otherwise)")
    parser.add_argument("--out", default="runs/quadrotor")
    args = parser.parse_args()
    config = ExperimentConfig.from_json(CONFIG)
    if args.runs:
        config = dataclasses.replace(config, n_runs=args.runs)

    def progress(run):
        if run.excluded:
            print(f"seed {run.seed}: excluded ({run.reason})", flush=True)
            return
        counts = ", ".join(f"{m} {r.violations}/{len(r.outcomes)}" for m, r in run.methods.items())
        print(f"seed {run.seed}: {counts}", flush=True)

    start = time.perf_counter()
    report = run_experiment(config, keep_trajectories=True, progress=progress)
    path = emit_report(report, args.out)
    summary = report.summary()
    for method in ("probf", "mean"):
        s = summary[method]
        print(f"{method}: {s['mean_pct']:.1f} +/- {s['std_pct']:.1f} % violations")
    print(f"{summary['included_runs']} runs kept, {summary['excluded_runs']} excluded, "
          f"{(time.perf_counter() - start) / 60:.1f} min; report at {path}")


if __name__ == "__main__":
    main()
