"""Desired (performance) controllers that the safety filter projects.

Both controllers are designed on the NOMINAL parameters; the plant they end up
driving is the true one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_are

from .dynamics import ControlAffineModel


def _linearize(model: ControlAffineModel, x0: np.ndarray, which: str = "nominal", eps=1e-6):
    f0, g0 = model.f_g(x0, which)
    A = np.empty((model.state_dim, model.state_dim))
    for i in range(model.state_dim):
        dx = np.zeros(model.state_dim)
        dx[i] = eps
        fp, _ = model.f_g(x0 + dx, which)
        fm, _ = model.f_g(x0 - dx, which)
        A[:, i] = (fp - fm) / (2 * eps)
    return A, g0


def lqr_gain(model: ControlAffineModel, x_eq, Q, R) -> np.ndarray:
    A, B = _linearize(model, np.asarray(x_eq, dtype=float))
    P = solve_continuous_are(A, B, np.diag(Q), np.atleast_2d(R))
    return np.linalg.solve(np.atleast_2d(R), B.T @ P)


@dataclass
class SegwayPD:
    """Proportional-derivative law on position and pitch: u = -K (x - x_goal).

    The four gains act on (p, theta, p_dot, theta_dot) errors, i.e. a PD
    term for each of the two configuration coordinates. ``gains`` default to
    an LQR design on the nominal linearisation about the goal.
    """

    goal: np.ndarray
    gains: np.ndarray

    def __call__(self, t, x):
        return -self.gains @ (np.asarray(x) - self.goal)

    @classmethod
    def design(cls, model: ControlAffineModel, goal_position: float = 2.0,
               weights=(4.0, 1.0, 1.0, 0.1), control_weight: float = 3.0):
        goal = np.array([goal_position, model.params_nominal["com_offset"], 0.0, 0.0])
        K = lqr_gain(model, goal, weights, control_weight)
        return cls(goal=goal, gains=np.asarray(K, dtype=float).reshape(1, -1))


@dataclass
class QuadrotorFlatness:
    """Feedback linearisation of the thrust-extended planar quadrotor.

    The position's fourth derivative is affine in (T_ddot, tau) with a
    decoupling matrix of determinant T/(m J); the law inverts it under the
    nominal (m, J) and imposes a linear fourth-order error dynamics per axis
    with characteristic polynomial (s + pole)^4.
    """

    mass: float
    inertia: float
    gravity: float = 9.81
    goal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    poles: tuple = (0.7, 1.6)
    min_thrust: float = 0.1

    def __post_init__(self):
        self._gains = [np.poly(-p * np.ones(4))[::-1][:4] for p in self.poles]

    def __call__(self, t, x):
        px, py, phi, vx, vy, phid, T, Td = x
        m, J = self.mass, self.inertia
        s, c = math.sin(phi), math.cos(phi)
        T = max(T, self.min_thrust)
        acc = np.array([-T * s / m, T * c / m - self.gravity])
        jerk = np.array([-(Td * s + T * c * phid) / m, (Td * c - T * s * phid) / m])
        snap_drift = np.array([
            (-2 * Td * c * phid + T * s * phid * phid) / m,
            (-2 * Td * s * phid - T * c * phid * phid) / m,
        ])
        decoupling = np.array([[-s, -T * c / J], [c, -T * s / J]]) / m
        pos = np.array([px, py]) - self.goal
        vel = np.array([vx, vy])
        nu = np.empty(2)
        for axis, k in enumerate(self._gains):
            nu[axis] = -(k[0] * pos[axis] + k[1] * vel[axis] + k[2] * acc[axis]
                         + k[3] * jerk[axis])
        return np.linalg.solve(decoupling, nu - snap_drift)

    @classmethod
    def for_model(cls, model: ControlAffineModel, **kwargs):
        p = model.params_nominal
        return cls(mass=p["mass"], inertia=p["inertia"], gravity=p["gravity"], **kwargs)
