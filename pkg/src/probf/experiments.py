"""Seeded multi-run comparison of the probabilistic filter against the GP-mean filter."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dynamics import Trajectory, rollout
from .episodic import EpisodeConfig, TrainingDiverged, train_episodic
from .errors import ConfigError, IntegrationBlowup
from .gp import FitConfig, GPResidualModel
from .safety_filter import BackoffSchedule, ProbfController
from .systems import SystemSetup, make_setup

METHODS = ("probf", "mean")
TEST_STREAM = 1_000_003
BOUNDARY_SAMPLES = 256


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "segway"
    n_runs: int = 10
    n_test_points: int = 10
    n_episodes: Optional[int] = None
    delta: float = 1.0
    threshold: float = -0.05
    seeds: Optional[tuple] = None
    base_seed: int = 0
    out_dir: Optional[str] = None
    horizon: Optional[float] = None
    dt: Optional[float] = None
    stride: int = 5
    max_points: int = 600
    fit_restarts: int = 2
    fit_max_iter: int = 50
    backoff_factor: float = 0.5
    backoff_attempts: int = 6
    keep_delta_for_episode: bool = True
    matched: bool = False
    workers: int = 1
    system_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system not in ("segway", "quadrotor"):
            raise ConfigError(f"unknown system {self.system!r}")
        if self.n_runs < 1 or self.n_test_points < 1:
            raise ConfigError("n_runs and n_test_points must be >= 1")
        if self.n_episodes is not None and self.n_episodes < 1:
            raise ConfigError("n_episodes must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.delta < 0 or not math.isfinite(self.delta):
            raise ConfigError("delta must be finite and >= 0")
        if self.seeds is not None:
            seeds = tuple(int(s) for s in self.seeds)
            if len(seeds) != self.n_runs:
                raise ConfigError("need exactly n_runs seeds")
            object.__setattr__(self, "seeds", seeds)

    @property
    def run_seeds(self) -> tuple:
        return self.seeds if self.seeds is not None else tuple(
            self.base_seed + k for k in range(self.n_runs))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def setup(self) -> SystemSetup:
        kwargs = dict(self.system_params)
        if self.horizon is not None:
            kwargs["horizon"] = self.horizon
        if self.dt is not None:
            kwargs["dt"] = self.dt
        try:
            return make_setup(self.system, matched=self.matched, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad system_params: {exc}") from exc

    def episode_config(self, setup: SystemSetup, seed: int) -> EpisodeConfig:
        return EpisodeConfig.for_setup(
            setup, n_episodes=self.n_episodes or setup.n_episodes, delta=self.delta,
            backoff=self.backoff(), seed=seed, stride=self.stride, max_points=self.max_points,
            fit=FitConfig(restarts=self.fit_restarts, max_iter=self.fit_max_iter, seed=seed),
        )

    def backoff(self) -> BackoffSchedule:
        return BackoffSchedule(self.backoff_factor, self.backoff_attempts,
                               self.keep_delta_for_episode)


# --------------------------------------------------------------------------
# Results


def count_violation(traj: Trajectory, threshold: float = -0.05) -> bool:
    """True iff h drops strictly below ``threshold`` somewhere on the trajectory."""
    if traj.h_values is None or len(traj.h_values) == 0:
        raise ValueError("trajectory has no recorded barrier values")
    return bool(np.min(traj.h_values) < threshold)


@dataclass
class RolloutOutcome:
    min_h: float
    violated: bool
    backoff_events: int
    infeasible_steps: int
    blowup: bool = False


@dataclass
class MethodResult:
    delta: float
    outcomes: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(o.violated for o in self.outcomes)

    @property
    def violation_pct(self) -> float:
        return 100.0 * self.violations / len(self.outcomes) if self.outcomes else 0.0

    @property
    def warnings(self) -> int:
        return sum(o.infeasible_steps > 0 for o in self.outcomes)


@dataclass
class RunResult:
    seed: int
    excluded: bool = False
    reason: str = ""
    points_sha256: str = ""
    methods: dict = field(default_factory=dict)
    episode_logs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "excluded": self.excluded, "reason": self.reason,
            "points_sha256": self.points_sha256,
            "methods": {
                name: {"delta": res.delta, "violations": res.violations,
                       "violation_pct": res.violation_pct, "warnings": res.warnings,
                       "outcomes": [asdict(o) for o in res.outcomes]}
                for name, res in self.methods.items()
            },
            "episode_logs": [rec.to_dict() for rec in self.episode_logs],
        }


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    runs: list = field(default_factory=list)
    trajectories: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    @property
    def included(self) -> list:
        return [r for r in self.runs if not r.excluded]

    def percentages(self, method: str) -> np.ndarray:
        return np.array([r.methods[method].violation_pct for r in self.included], dtype=float)

    def summary(self) -> dict:
        out = {}
        for method in METHODS:
            pct = self.percentages(method)
            out[method] = {
                "mean_pct": float(np.mean(pct)) if len(pct) else 0.0,
                "std_pct": float(np.std(pct)) if len(pct) else 0.0,
                "warnings": int(sum(r.methods[method].warnings for r in self.included)),
            }
        out["included_runs"] = len(self.included)
        out["excluded_runs"] = len(self.runs) - len(self.included)
        return out

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "summary": self.summary(),
                "runs": [r.to_dict() for r in self.runs]}


# --------------------------------------------------------------------------
# Protocol


def draw_test_points(setup: SystemSetup, seed: int, n: int) -> np.ndarray:
    """Fresh starts from the training region on a stream disjoint from training."""
    return setup.region.sample(np.random.default_rng([seed, TEST_STREAM]), n)


def points_digest(points: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(points, dtype="<f8").tobytes()).hexdigest()


def evaluate(setup: SystemSetup, gp: GPResidualModel, x0, delta: float, threshold: float,
             backoff: BackoffSchedule = BackoffSchedule()):
    """Filtered test rollout; a blowup counts as a violation."""
    controller = ProbfController(setup.barrier, setup.model, gp, setup.desired, delta=delta,
                                 backoff=backoff)
    blowup = False
    try:
        traj = rollout(setup.model, controller, x0, setup.horizon, setup.dt, barrier=setup.barrier)
    except IntegrationBlowup as exc:
        traj, blowup = exc.trajectory, True
    infeasible = sum(not m.feasible_at_requested_delta for m in traj.filter_meta)
    outcome = RolloutOutcome(min_h=traj.min_h, violated=blowup or count_violation(traj, threshold),
                          backoff_events=controller.backoff_events, infeasible_steps=infeasible,
                          blowup=blowup)
    return traj, outcome


def run_seed(config: ExperimentConfig, seed: int, keep_trajectories: bool = False):
    """Train one seed and test both methods on its points.

    Returns (run, trajectories, model); the model is None for an excluded run.
    """
    setup = config.setup()
    run = RunResult(seed=seed)
    points = draw_test_points(setup, seed, config.n_test_points)
    run.points_sha256 = points_digest(points)
    trajectories = {}
    try:
        gp, run.episode_logs = train_episodic(setup, config.episode_config(setup, seed))
    except TrainingDiverged as exc:
        run.excluded, run.reason, run.episode_logs = True, f"training diverged: {exc}", exc.logs
        return run, trajectories, None
    deltas = {"probf": config.delta, "mean": 0.0}
    for method in METHODS:
        res = MethodResult(delta=deltas[method])
        for k, x0 in enumerate(points):
            traj, outcome = evaluate(setup, gp, x0, deltas[method], config.threshold,
                                     config.backoff())
            res.outcomes.append(outcome)
            if keep_trajectories:
                trajectories[(seed, method, k)] = traj
        run.methods[method] = res
    return run, trajectories, gp


def run_experiment(config: ExperimentConfig, keep_trajectories: bool = False,
                   keep_models: bool = False, progress=None) -> ExperimentReport:
    """All seeds of ``config``; with ``workers > 1`` seeds run in separate processes.

    Results are assembled in seed order, so the report does not depend on ``workers``.
    """
    config.setup()  # surface config errors before any work starts
    report = ExperimentReport(config)
    seeds = config.run_seeds
    if config.workers > 1:
        pool = ProcessPoolExecutor(max_workers=config.workers)
        results = pool.map(run_seed, [config] * len(seeds), seeds, [keep_trajectories] * len(seeds))
    else:
        pool = None
        results = (run_seed(config, seed, keep_trajectories) for seed in seeds)
    try:
        for run, trajectories, gp in results:
            report.runs.append(run)
            report.trajectories.update(trajectories)
            if keep_models and gp is not None:
                report.models[run.seed] = gp
            if progress:
                progress(run)
    finally:
        if pool is not None:
            pool.shutdown()
    return report


# --------------------------------------------------------------------------
# Output


def safe_set_boundary(setup: SystemSetup, n: int = BOUNDARY_SAMPLES) -> np.ndarray:
    """Boundary samples in the plotted coordinate pair."""
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    p = setup.barrier.params
    if setup.name == "segway":
        r = p["theta_max"]
        return np.column_stack([p["theta_eq"] + r * np.cos(t), r * np.sin(t)])
    cx, cy = p["center"]
    r = math.sqrt(p["radius_sq"])
    return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])


def phase_columns(setup: SystemSetup):
    """State indices and names of the plotted pair."""
    if setup.name == "segway":
        return (1, 3), ("theta", "theta_dot")
    return (0, 1), ("x", "y")


def emit_trajectories(trajectories: dict, out_dir) -> list:
    out = Path(out_dir) / "trajectories"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for (seed, method, k), traj in sorted(trajectories.items()):
        paths.append(traj.to_csv(out / f"seed{seed}_{method}_{k}.csv"))
    return paths


def emit_report(report: ExperimentReport, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        with (out / "summary.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "method", "delta", "excluded", "violations", "n_tests",
                             "violation_pct", "warnings"])
            for run in report.runs:
                for method in METHODS:
                    res = run.methods.get(method)
                    if res is None:
                        writer.writerow([run.seed, method, "", 1, "", "", "", ""])
                    else:
                        writer.writerow([run.seed, method, res.delta, 0, res.violations,
                                         len(res.outcomes), res.violation_pct, res.warnings])
        setup = report.config.setup()
        np.savetxt(out / "boundary.csv", safe_set_boundary(setup), delimiter=",",
                   header="a,b", comments="")
        if report.trajectories:
            emit_trajectories(report.trajectories, out)
            (i, j), (na, nb) = phase_columns(setup)
            with (out / "phase.csv").open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["seed", "method", "test_index", na, nb])
                for (seed, method, k), traj in sorted(report.trajectories.items()):
                    for row in traj.states:
                        writer.writerow([seed, method, k, repr(float(row[i])), repr(float(row[j]))])
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return out / "report.json"


def two_pass_stats(values: Sequence[float]):
    """Mean and population std by the two-pass formula."""
    values = list(values)
    if not values:
        return 0.0, 0.0
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)
