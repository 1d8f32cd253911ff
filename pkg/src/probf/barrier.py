"""Barrier functions, nominal constraint constants and higher-order chains.

A barrier exposes a *Lie table*: the drift derivatives L_f^k h for
k = 0..r and the control rows L_g L_f^(k-1) h for k = 1..r, all evaluated on
one of the model's parameter sets. The CBF constraint of relative degree r
is then the polynomial combination prod_i (d/dt + gamma_i) h, whose control
dependence sits in the last row only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import ControlAffineModel
from .errors import ContractViolation, StructuralError

SEGWAY_THETA_MAX = 0.2617
SEGWAY_THETA_EQ = 0.1383
SEGWAY_GAMMA = 5.0
OBSTACLE_CENTER = (1.85, 0.6)
OBSTACLE_RADIUS_SQ = 0.28


@dataclass(frozen=True)
class BarrierSpec:
    """Scalar barrier h with its gradient and class-K gains.

    ``hocbf_gains`` holds one linear class-K gain per chain stage; for a
    relative-degree-one barrier it is just ``(alpha_gain,)``.
    """

    name: str
    h: Callable[[np.ndarray], float]
    grad_h: Callable[[np.ndarray], np.ndarray]
    alpha_gain: float = 1.0
    relative_degree: int = 1
    hocbf_gains: tuple = ()
    lie_table: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.relative_degree < 1:
            raise ContractViolation("relative degree must be >= 1")
        gains = tuple(self.hocbf_gains) or (self.alpha_gain,) * self.relative_degree
        if len(gains) != self.relative_degree:
            raise ContractViolation("need one gain per chain stage")
        if min(gains) <= 0 or self.alpha_gain <= 0:
            raise ContractViolation("class-K gains must be positive")
        object.__setattr__(self, "hocbf_gains", tuple(float(g) for g in gains))

    def alpha(self, r):
        """Linear extended class-K function."""
        return self.alpha_gain * r

    @property
    def final_gain(self) -> float:
        return self.hocbf_gains[-1]

    def lie(self, model: ControlAffineModel, x, which: str = "nominal"):
        if self.lie_table is not None:
            return self.lie_table(self, model, x, which)
        return _first_order_lie(self, model, x, which)


@dataclass(frozen=True)
class ConstraintConstants:
    """The CBF constraint c_a^T u + c_b >= 0 under the nominal model."""

    c_a: np.ndarray
    c_b: float

    def value(self, u) -> float:
        return float(self.c_a @ np.atleast_1d(u) + self.c_b)


def _first_order_lie(spec: BarrierSpec, model, x, which):
    f, g = model.f_g(x, which)
    dh = spec.grad_h(x)
    drift = np.array([spec.h(x), dh @ f])
    rows = np.atleast_2d(dh @ g)
    return drift, rows


# --------------------------------------------------------------------------
# Concrete barriers


def segway_barrier(theta_max: float = SEGWAY_THETA_MAX, theta_eq: float = SEGWAY_THETA_EQ,
                   gamma: float = SEGWAY_GAMMA) -> BarrierSpec:
    """Pitch / pitch-rate ellipse h = theta_m^2 - theta_dot^2 - (theta - theta_e)^2."""

    def h(x):
        return theta_max ** 2 - x[3] ** 2 - (x[1] - theta_eq) ** 2

    def grad_h(x):
        return np.array([0.0, -2.0 * (x[1] - theta_eq), 0.0, -2.0 * x[3]])

    return BarrierSpec(name="segway", h=h, grad_h=grad_h, alpha_gain=gamma,
                       relative_degree=1,
                       params={"theta_max": theta_max, "theta_eq": theta_eq})


def _quadrotor_lie(spec: BarrierSpec, model: ControlAffineModel, x, which):
    x = model.check_state(x)
    p = model.params(which)
    m, J, grav = p["mass"], p["inertia"], p["gravity"]
    cx, cy = spec.params["center"]
    e = np.array([x[0] - cx, x[1] - cy])
    v = np.array([x[3], x[4]])
    phi = x[2]
    s, c = math.sin(phi), math.cos(phi)
    h0 = e @ e - spec.params["radius_sq"]
    h1 = 2.0 * e @ v

    if model.state_dim == 6:
        # thrust is an input here: it reaches h in the second derivative
        drift = np.array([h0, h1, 2.0 * (v @ v + e @ np.array([0.0, -grav]))])
        rows = np.zeros((2, 2))
        rows[1] = 2.0 * np.array([e @ np.array([-s / m, c / m]), 0.0])
        return drift, rows
    if model.state_dim != 8:
        raise ContractViolation("quadrotor barrier needs the 6- or 8-state model")

    phid, T, Td = x[5], x[6], x[7]
    acc = np.array([-T * s / m, T * c / m - grav])
    jerk = np.array([-(Td * s + T * c * phid) / m, (Td * c - T * s * phid) / m])
    snap_drift = np.array([(-2 * Td * c * phid + T * s * phid * phid) / m,
                           (-2 * Td * s * phid - T * c * phid * phid) / m])
    decoupling = np.array([[-s, -T * c / J], [c, -T * s / J]]) / m
    drift = np.array([
        h0,
        h1,
        2.0 * (v @ v + e @ acc),
        2.0 * (3.0 * v @ acc + e @ jerk),
        2.0 * (3.0 * acc @ acc + 4.0 * v @ jerk + e @ snap_drift),
    ])
    rows = np.zeros((4, 2))
    rows[3] = 2.0 * e @ decoupling
    return drift, rows


def quadrotor_barrier(center=OBSTACLE_CENTER, radius_sq: float = OBSTACLE_RADIUS_SQ,
                      gains=(4.0, 4.0, 4.0, 4.0)) -> BarrierSpec:
    """Circular keep-out zone h = (x - 1.85)^2 + (y - 0.6)^2 - 0.28, fourth order."""
    cx, cy = center

    def h(x):
        return (x[0] - cx) ** 2 + (x[1] - cy) ** 2 - radius_sq

    def grad_h(x):
        g = np.zeros(len(x))
        g[0] = 2.0 * (x[0] - cx)
        g[1] = 2.0 * (x[1] - cy)
        return g

    return BarrierSpec(name="quadrotor", h=h, grad_h=grad_h, alpha_gain=float(gains[-1]),
                       relative_degree=len(gains), hocbf_gains=tuple(gains),
                       lie_table=_quadrotor_lie,
                       params={"center": (float(cx), float(cy)),
                               "radius_sq": float(radius_sq)})


# --------------------------------------------------------------------------
# Constraint constants


def _chain_coefficients(gains) -> np.ndarray:
    """Coefficients of prod_i (s + gamma_i), lowest order first."""
    return np.poly(-np.asarray(gains, dtype=float))[::-1]


def _checked_table(spec: BarrierSpec, model, x, which):
    drift, rows = spec.lie(model, x, which)
    r = spec.relative_degree
    if len(drift) < r + 1 or len(rows) < r:
        raise StructuralError(
            f"{spec.name}: control enters before order {r} on model {model.name}"
        )
    scale = 1.0 + np.max(np.abs(drift))
    for k in range(r - 1):
        if np.max(np.abs(rows[k])) > 1e-10 * scale:
            raise StructuralError(
                f"{spec.name}: control appears in derivative {k + 1} < relative degree {r}"
            )
    return drift[: r + 1], rows[:r]


def constraint_constants(spec: BarrierSpec, model: ControlAffineModel, x) -> ConstraintConstants:
    """c_a = (dh/dx g_hat)^T and c_b = dh/dx f_hat + alpha(h)."""
    if spec.relative_degree != 1:
        raise ContractViolation(
            f"{spec.name} has relative degree {spec.relative_degree}; use hocbf_constants"
        )
    f, g = model.f_g(x, "nominal")
    dh = spec.grad_h(x)
    return ConstraintConstants(c_a=np.atleast_1d(dh @ g), c_b=float(dh @ f + spec.alpha(spec.h(x))))


def hocbf_constants(spec: BarrierSpec, model: ControlAffineModel, x) -> ConstraintConstants:
    """Constants of psi_{r-1}' + gamma_{r-1} psi_{r-1} >= 0 with psi_0 = h,
    psi_{i+1} = psi_i' + gamma_i psi_i, derivatives along the nominal model."""
    drift, rows = _checked_table(spec, model, x, "nominal")
    coeffs = _chain_coefficients(spec.hocbf_gains)
    return ConstraintConstants(c_a=np.array(rows[-1], dtype=float),
                               c_b=float(coeffs @ drift))


def barrier_constants(spec: BarrierSpec, model: ControlAffineModel, x) -> ConstraintConstants:
    """Dispatch on relative degree."""
    if spec.relative_degree == 1 and spec.lie_table is None:
        return constraint_constants(spec, model, x)
    return hocbf_constants(spec, model, x)


def chain_value(spec: BarrierSpec, model: ControlAffineModel, x, which: str = "nominal") -> float:
    """Final chain stage psi_{r-1}(x); equals h for relative degree one."""
    r = spec.relative_degree
    if r == 1:
        return float(spec.h(x))
    drift, _ = _checked_table(spec, model, x, which)
    coeffs = _chain_coefficients(spec.hocbf_gains[: r - 1])
    return float(coeffs @ drift[:r])


def chain_gradient(spec: BarrierSpec, model: ControlAffineModel, x, eps: float = 1e-6):
    """Gradient of the final chain stage; analytic for r = 1, central differences otherwise."""
    x = model.check_state(x)
    if spec.relative_degree == 1:
        return np.asarray(spec.grad_h(x), dtype=float)
    grad = np.empty_like(x)
    for i in range(len(x)):
        step = eps * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (chain_value(spec, model, xp) - chain_value(spec, model, xm)) / (2 * step)
    return grad


def residual_truth(spec: BarrierSpec, model: ControlAffineModel, x, u) -> float:
    """Ground-truth residual d(x, u) of the final chain stage's time derivative."""
    u = model.check_control(u)
    f, g = model.f_g(x, "true")
    fh, gh = model.f_g(x, "nominal")
    grad = chain_gradient(spec, model, x)
    return float(grad @ ((f - fh) + (g - gh) @ u))
