"""Ready-made experiment systems: model, barrier, desired controller and start region."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import barrier as B
from . import dynamics as D
from .controllers import QuadrotorFlatness, SegwayPD
from .errors import ConfigError


@dataclass(frozen=True)
class StateRegion:
    """Axis-aligned box of initial states."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.low, dtype=float)
        hi = np.asarray(self.high, dtype=float)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ConfigError("region bounds must have equal shape with high >= low")
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = self.low.shape if n is None else (n,) + self.low.shape
        return rng.uniform(self.low, self.high, size=size)


@dataclass(frozen=True)
class SystemSetup:
    name: str
    model: D.ControlAffineModel
    barrier: B.BarrierSpec
    desired: Callable
    region: StateRegion
    horizon: float
    dt: float = 0.01
    n_episodes: int = 5
    extras: dict = field(default_factory=dict)


def segway_setup(gamma: float = B.SEGWAY_GAMMA, goal_position: float = 2.0,
                 control_weight: float = 3.0, horizon: float = 10.0, dt: float = 0.01,
                 matched: bool = False) -> SystemSetup:
    model = D.make_segway()
    if matched:
        model = model.matched()
    theta_e = B.SEGWAY_THETA_EQ
    region = StateRegion(low=[-0.1, theta_e - 0.05, -0.05, -0.1],
                         high=[0.1, theta_e + 0.05, 0.05, 0.1])
    desired = SegwayPD.design(model, goal_position=goal_position, control_weight=control_weight)
    return SystemSetup(name="segway", model=model, barrier=B.segway_barrier(gamma=gamma),
                       desired=desired, region=region, horizon=horizon, dt=dt, n_episodes=5)


def quadrotor_setup(gains=(4.0, 4.0, 4.0, 4.0), poles=(0.7, 1.6), horizon: float = 12.0,
                    dt: float = 0.01, matched: bool = False) -> SystemSetup:
    model = D.make_quadrotor_extended()
    if matched:
        model = model.matched()
    hover = model.params_nominal["mass"] * model.params_nominal["gravity"]
    low = np.array([1.8, 1.8, 0.0, 0.0, 0.0, 0.0, hover, 0.0])
    high = np.array([2.2, 2.2, 0.0, 0.0, 0.0, 0.0, hover, 0.0])
    desired = QuadrotorFlatness.for_model(model, poles=tuple(poles))
    return SystemSetup(name="quadrotor", model=model, barrier=B.quadrotor_barrier(gains=tuple(gains)),
                       desired=desired, region=StateRegion(low, high), horizon=horizon, dt=dt,
                       n_episodes=10)


def make_setup(system: str, **kwargs) -> SystemSetup:
    if system == "segway":
        return segway_setup(**kwargs)
    if system == "quadrotor":
        return quadrotor_setup(**kwargs)
    raise ConfigError(f"unknown system {system!r}")
