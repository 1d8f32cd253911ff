"""Episodic learning: roll out the current safe controller, harvest residual labels, retrain."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .barrier import BarrierSpec, barrier_constants, chain_value
from .dynamics import ControlAffineModel, Trajectory, rollout
from .errors import ConditioningError, ConfigError, IntegrationBlowup
from .gp import (FitConfig, GPResidualModel, ResidualDataset, fit_hyperparams,
                 log_marginal_likelihood, stack_datasets, train)
from .safety_filter import BackoffSchedule, NominalFilter, ProbfController
from .systems import StateRegion, SystemSetup


@dataclass(frozen=True)
class EpisodeConfig:
    n_episodes: int
    region: StateRegion
    dt: float
    horizon: float
    delta: float = 1.0
    backoff: BackoffSchedule = field(default_factory=BackoffSchedule)
    seed: int = 0
    stride: int = 5
    max_points: int = 600
    fit: FitConfig = field(default_factory=FitConfig)
    warm_start: bool = True

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigError("n_episodes must be >= 1")
        if self.stride < 1 or self.max_points < 2:
            raise ConfigError("stride must be >= 1 and max_points >= 2")
        if not self.dt > 0 or self.horizon <= 0:
            raise ConfigError("dt and horizon must be positive")

    @classmethod
    def for_setup(cls, setup: SystemSetup, **overrides) -> "EpisodeConfig":
        base = dict(n_episodes=setup.n_episodes, region=setup.region, dt=setup.dt,
                    horizon=setup.horizon)
        base.update(overrides)
        return cls(**base)


@dataclass
class EpisodeRecord:
    episode: int
    n_points: int
    mll: float
    min_h: float
    violated: bool
    delta_events: int
    blowup: bool = False

    def to_dict(self) -> dict:
        return {"episode": self.episode, "n_points": self.n_points, "mll": self.mll,
                "min_h": self.min_h, "violated": self.violated,
                "delta_events": self.delta_events, "blowup": self.blowup}


class TrainingDiverged(ConditioningError):
    """GP training failed mid-run; ``logs`` holds the episodes completed so far."""

    def __init__(self, message, logs=None, jitter=None):
        super().__init__(message, jitter=jitter)
        self.logs = logs or []


def residual_label(traj: Trajectory, spec: BarrierSpec, model: ControlAffineModel) -> ResidualDataset:
    """Finite-difference labels of the final chain stage's derivative minus its nominal value.

    d_i = (psi(x_{i+1}) - psi(x_i)) / dt - [c_a(x_i)^T u_i + c_b(x_i) - gamma psi(x_i)]
    """
    n = len(traj.controls)
    if n < 1:
        return ResidualDataset.empty(model.state_dim, model.control_dim)
    dt = traj.dt
    psi = np.array([chain_value(spec, model, x) for x in traj.states[: n + 1]])
    labels = np.empty(n)
    for i in range(n):
        cc = barrier_constants(spec, model, traj.states[i])
        nominal_rate = cc.value(traj.controls[i]) - spec.final_gain * psi[i]
        labels[i] = (psi[i + 1] - psi[i]) / dt - nominal_rate
    return ResidualDataset(traj.states[:n].copy(), traj.controls.copy(), labels)


def _episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, episode])


def collect_episode(setup: SystemSetup, gp: Optional[GPResidualModel], config: EpisodeConfig,
                    episode: int):
    """One rollout from a seeded random start; returns (trajectory, labels, controller, blowup)."""
    x0 = config.region.sample(_episode_rng(config.seed, episode))
    if gp is None:
        controller = NominalFilter(setup.barrier, setup.model, setup.desired)
    else:
        controller = ProbfController(setup.barrier, setup.model, gp, setup.desired,
                                     delta=config.delta, backoff=config.backoff)
    blowup = False
    try:
        traj = rollout(setup.model, controller, x0, config.horizon, config.dt, barrier=setup.barrier)
    except IntegrationBlowup as exc:
        traj, blowup = exc.trajectory, True
    labels = residual_label(traj, setup.barrier, setup.model)
    return traj, labels.subset(slice(None, None, config.stride)), controller, blowup


def aggregate(datasets: Sequence[ResidualDataset], cap: Optional[int] = None) -> ResidualDataset:
    """Concatenate in order; above ``cap`` rows, thin uniformly keeping the first and last."""
    data = stack_datasets(datasets)
    if cap is None or len(data) <= cap:
        return data
    index = np.unique(np.round(np.linspace(0, len(data) - 1, cap)).astype(int))
    return data.subset(index)


def fit_and_train(data: ResidualDataset, fit: FitConfig,
                  previous: Optional[GPResidualModel] = None) -> GPResidualModel:
    """Fit hyperparameters (warm-started from ``previous`` when given) and train."""
    init = previous.hyperparams if previous is not None else None
    hp = fit_hyperparams(data, fit, init=init)
    return train(data, hp)


def train_episodic(setup: SystemSetup, config: EpisodeConfig, log_path=None):
    """Alternate rollouts and GP refits; returns (model, episode logs).

    An episode that blows up is logged but contributes no labels.
    """
    datasets: list[ResidualDataset] = []
    logs: list[EpisodeRecord] = []
    gp: Optional[GPResidualModel] = None
    for ep in range(config.n_episodes):
        traj, labels, controller, blowup = collect_episode(setup, gp, config, ep)
        # finite differences along a runaway trajectory say nothing about the residual
        if len(labels) and not blowup:
            datasets.append(labels)
        if not datasets:
            raise TrainingDiverged("no usable labels collected", logs=logs)
        data = aggregate(datasets, config.max_points)
        try:
            gp = fit_and_train(data, config.fit, gp if config.warm_start else None)
            mll = log_marginal_likelihood(data, gp.hyperparams)
        except ConditioningError as exc:
            raise TrainingDiverged(f"episode {ep}: {exc}", logs=logs, jitter=exc.jitter) from exc
        logs.append(EpisodeRecord(
            episode=ep, n_points=len(data), mll=mll, min_h=traj.min_h,
            violated=bool(traj.min_h < 0.0),
            delta_events=getattr(controller, "backoff_events", 0), blowup=blowup,
        ))
    if log_path is not None:
        write_logs(logs, log_path)
    return gp, logs


def write_logs(logs: Sequence[EpisodeRecord], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rec in logs:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    return path
