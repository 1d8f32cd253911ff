"""Control-affine plant models, RK4 integration and closed-loop rollouts.

Every model carries two parameter sets: ``params_true`` drives the simulated
plant, ``params_nominal`` is what the controller and safety filter believe.
Both are evaluated through the same field function, so setting the two sets
equal removes all model mismatch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .errors import ContractViolation, IntegrationBlowup

GRAVITY = 9.81

FieldFn = Callable[[np.ndarray, Mapping[str, float]], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True)
class ControlAffineModel:
    """Paired true/nominal dynamics x' = f(x) + g(x) u."""

    name: str
    state_dim: int
    control_dim: int
    fields: FieldFn
    params_true: Mapping[str, float]
    params_nominal: Mapping[str, float]
    state_labels: tuple = ()
    control_labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "params_true", MappingProxyType(dict(self.params_true)))
        object.__setattr__(self, "params_nominal", MappingProxyType(dict(self.params_nominal)))

    def params(self, which: str) -> Mapping[str, float]:
        if which == "true":
            return self.params_true
        if which == "nominal":
            return self.params_nominal
        raise ContractViolation(f"which must be 'true' or 'nominal', got {which!r}")

    def f_g(self, x, which: str = "true"):
        x = self.check_state(x)
        f, g = self.fields(x, self.params(which))
        return f, g

    def drift(self, x):
        return self.f_g(x, "true")[0]

    def actuation(self, x):
        return self.f_g(x, "true")[1]

    def nominal_drift(self, x):
        return self.f_g(x, "nominal")[0]

    def nominal_actuation(self, x):
        return self.f_g(x, "nominal")[1]

    def with_params(self, params_true=None, params_nominal=None) -> "ControlAffineModel":
        """Copy of the model with replaced parameter sets."""
        return ControlAffineModel(
            name=self.name,
            state_dim=self.state_dim,
            control_dim=self.control_dim,
            fields=self.fields,
            params_true=dict(params_true if params_true is not None else self.params_true),
            params_nominal=dict(
                params_nominal if params_nominal is not None else self.params_nominal
            ),
            state_labels=self.state_labels,
            control_labels=self.control_labels,
        )

    def matched(self) -> "ControlAffineModel":
        """Copy whose true plant equals the nominal model."""
        return self.with_params(params_true=self.params_nominal)

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ContractViolation(
                f"{self.name}: state must have shape ({self.state_dim},), got {x.shape}"
            )
        return x

    def check_control(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.control_dim,):
            raise ContractViolation(
                f"{self.name}: control must have shape ({self.control_dim},), got {u.shape}"
            )
        return u


def evaluate(model: ControlAffineModel, x, u, which: str = "true") -> np.ndarray:
    u = model.check_control(u)
    f, g = model.f_g(x, which)
    return f + g @ u


def eval_true(model: ControlAffineModel, x, u) -> np.ndarray:
    """Time derivative of the state under the true parameters."""
    return evaluate(model, x, u, "true")


def eval_nominal(model: ControlAffineModel, x, u) -> np.ndarray:
    """Time derivative of the state under the nominal parameters."""
    return evaluate(model, x, u, "nominal")


def step_rk4(model: ControlAffineModel, x, u, dt: float, which: str = "true",
             step_index: Optional[int] = None) -> np.ndarray:
    """One classical Runge-Kutta step with ``u`` held constant over the step."""
    if not dt > 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    x = model.check_state(x)
    u = model.check_control(u)
    params = model.params(which)

    def rhs(z):
        f, g = model.fields(z, params)
        return f + g @ u

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationBlowup(
            f"{model.name}: non-finite state at step {step_index}", step_index=step_index
        )
    return x_next


@dataclass
class Trajectory:
    """Closed-loop rollout record; ``controls`` is one row shorter than ``states``."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    h_values: Optional[np.ndarray] = None
    filter_meta: list = field(default_factory=list)
    dt: float = 0.0

    def __post_init__(self):
        if len(self.controls) != max(len(self.states) - 1, 0):
            raise ContractViolation("controls must be one shorter than states")
        if len(self.times) != len(self.states):
            raise ContractViolation("times and states differ in length")

    @property
    def min_h(self) -> float:
        if self.h_values is None or len(self.h_values) == 0:
            return math.nan
        return float(np.min(self.h_values))

    def to_csv(self, path) -> Path:
        """Write one row per state; the final row has no control or filter data."""
        path = Path(path)
        s = self.states.shape[1]
        m = self.controls.shape[1] if self.controls.ndim == 2 and len(self.controls) else 0
        if m == 0 and self.filter_meta:
            m = len(np.atleast_1d(self.filter_meta[0].u))
        header = (["t"] + [f"x{i}" for i in range(s)] + [f"u{j}" for j in range(m)]
                  + ["h", "delta_used", "feasible", "slack"])
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i, t in enumerate(self.times):
                row: list[Any] = [repr(float(t))] + [repr(float(v)) for v in self.states[i]]
                if i < len(self.controls):
                    row += [repr(float(v)) for v in self.controls[i]]
                else:
                    row += [""] * m
                row.append(repr(float(self.h_values[i])) if self.h_values is not None else "")
                if i < len(self.filter_meta) and self.filter_meta[i] is not None:
                    meta = self.filter_meta[i]
                    row += [repr(float(meta.delta_used)),
                            int(bool(meta.feasible_at_requested_delta)),
                            repr(float(meta.slack))]
                else:
                    row += ["", "", ""]
                writer.writerow(row)
        return path


def read_trajectory_csv(path) -> dict:
    """Load a trajectory CSV back into column arrays (blank cells become NaN)."""
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) if v != "" else math.nan for v in row] for row in reader]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def rollout(model: ControlAffineModel, controller, x0, horizon: float, dt: float,
            barrier=None) -> Trajectory:
    """Simulate the closed loop under the TRUE dynamics.

    ``controller(t, x)`` returns either a control vector or an object with a
    ``u`` attribute (a filter result), in which case it is kept as per-step
    metadata. When ``barrier`` is given, ``barrier.h`` is recorded at every
    state.
    """
    if not dt > 0 or horizon < 0:
        raise ContractViolation("need dt > 0 and horizon >= 0")
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ContractViolation(f"horizon {horizon} is not a multiple of dt {dt}")
    x = model.check_state(x0).copy()

    states = np.empty((n_steps + 1, model.state_dim))
    controls = np.empty((n_steps, model.control_dim))
    h_values = np.empty(n_steps + 1) if barrier is not None else None
    meta: list = []
    states[0] = x
    if barrier is not None:
        h_values[0] = barrier.h(x)

    def partial(k):
        return Trajectory(
            times=dt * np.arange(k + 1), states=states[: k + 1].copy(),
            controls=controls[:k].copy(),
            h_values=None if h_values is None else h_values[: k + 1].copy(),
            filter_meta=meta[:k], dt=dt,
        )

    for k in range(n_steps):
        out = controller(k * dt, x)
        if hasattr(out, "u"):
            meta.append(out)
            u = out.u
        else:
            u = out
        u = model.check_control(u)
        controls[k] = u
        try:
            x = step_rk4(model, x, u, dt, "true", step_index=k)
        except IntegrationBlowup as exc:
            exc.trajectory = partial(k)
            raise
        states[k + 1] = x
        if barrier is not None:
            h_values[k + 1] = barrier.h(x)
    return Trajectory(times=dt * np.arange(n_steps + 1), states=states, controls=controls,
                      h_values=h_values, filter_meta=meta, dt=dt)


# --------------------------------------------------------------------------
# Segway: wheeled inverted pendulum


SEGWAY_NOMINAL = {
    "cart_mass": 10.0,
    "pend_mass": 10.0,
    "length": 1.0,
    "motor_gain": 4.0,
    "friction": 2.0,
    "wheel_radius": 0.25,
    "com_offset": 0.1383,
    "gravity": GRAVITY,
}
# motor 20% weaker and body 20% heavier than the nominal model believes
SEGWAY_TRUE = dict(SEGWAY_NOMINAL, motor_gain=3.2, pend_mass=12.0)


def segway_fields(x: np.ndarray, p: Mapping[str, float]):
    """Cart-pole with a wheel motor: torque k*u on the wheel, -k*u on the body.

    State (p, theta, p_dot, theta_dot); the body's centre of mass sits above
    the axle at pitch ``com_offset``, which is therefore the balance point.
    """
    M, m, l = p["cart_mass"], p["pend_mass"], p["length"]
    k, b, r = p["motor_gain"], p["friction"], p["wheel_radius"]
    _, theta, pdot, thdot = x
    phi = theta - p["com_offset"]
    s, c = np.sin(phi), np.cos(phi)
    det = m * l * l * (M + m * s * s)
    force = -b * pdot + m * l * s * thdot * thdot
    torque = m * p["gravity"] * l * s
    f = np.array([
        pdot,
        thdot,
        (m * l * l * force - m * l * c * torque) / det,
        ((M + m) * torque - m * l * c * force) / det,
    ])
    g = np.array([
        [0.0],
        [0.0],
        [(m * l * l * k / r + m * l * c * k) / det],
        [(-(M + m) * k - m * l * c * k / r) / det],
    ])
    return f, g


def make_segway(params_true=None, params_nominal=None) -> ControlAffineModel:
    return ControlAffineModel(
        name="segway", state_dim=4, control_dim=1, fields=segway_fields,
        params_true=params_true or SEGWAY_TRUE,
        params_nominal=params_nominal or SEGWAY_NOMINAL,
        state_labels=("p", "theta", "p_dot", "theta_dot"),
        control_labels=("torque_cmd",),
    )


# --------------------------------------------------------------------------
# Planar quadrotor

QUADROTOR_TRUE = {"mass": 1.8, "inertia": 1.1, "gravity": GRAVITY}
QUADROTOR_NOMINAL = {"mass": 1.5, "inertia": 1.3, "gravity": GRAVITY}


def quadrotor_fields(x: np.ndarray, p: Mapping[str, float]):
    """x'' = -(T/m) sin(phi), y'' = (T/m) cos(phi) - g, phi'' = tau/J."""
    _, _, phi, xd, yd, phid = x
    m, J = p["mass"], p["inertia"]
    f = np.array([xd, yd, phid, 0.0, -p["gravity"], 0.0])
    g = np.zeros((6, 2))
    g[3, 0] = -math.sin(phi) / m
    g[4, 0] = math.cos(phi) / m
    g[5, 1] = 1.0 / J
    return f, g


def quadrotor_extended_fields(x: np.ndarray, p: Mapping[str, float]):
    """Planar quadrotor with thrust promoted to a double-integrator state.

    State (x, y, phi, x_dot, y_dot, phi_dot, T, T_dot); controls
    (T_ddot, tau). Both controls first reach the position in its fourth
    derivative.
    """
    _, _, phi, xd, yd, phid, T, Td = x
    m, J = p["mass"], p["inertia"]
    f = np.array([xd, yd, phid, -T * math.sin(phi) / m,
                  T * math.cos(phi) / m - p["gravity"], 0.0, Td, 0.0])
    g = np.zeros((8, 2))
    g[7, 0] = 1.0
    g[5, 1] = 1.0 / J
    return f, g


def make_quadrotor(params_true=None, params_nominal=None) -> ControlAffineModel:
    return ControlAffineModel(
        name="quadrotor", state_dim=6, control_dim=2, fields=quadrotor_fields,
        params_true=params_true or QUADROTOR_TRUE,
        params_nominal=params_nominal or QUADROTOR_NOMINAL,
        state_labels=("x", "y", "phi", "x_dot", "y_dot", "phi_dot"),
        control_labels=("thrust", "torque"),
    )


def make_quadrotor_extended(params_true=None, params_nominal=None) -> ControlAffineModel:
    return ControlAffineModel(
        name="quadrotor_ext", state_dim=8, control_dim=2,
        fields=quadrotor_extended_fields,
        params_true=params_true or QUADROTOR_TRUE,
        params_nominal=params_nominal or QUADROTOR_NOMINAL,
        state_labels=("x", "y", "phi", "x_dot", "y_dot", "phi_dot", "thrust", "thrust_dot"),
        control_labels=("thrust_ddot", "torque"),
    )


def hover_state_extended(x: float, y: float, mass: float = QUADROTOR_NOMINAL["mass"],
                         gravity: float = GRAVITY) -> np.ndarray:
    """Extended quadrotor state at rest with thrust balancing ``mass``."""
    return np.array([x, y, 0.0, 0.0, 0.0, 0.0, mass * gravity, 0.0])

