"""Safety projections of a desired control.

* :func:`cbf_qp` projects onto the nominal halfspace c_a^T u + c_b >= 0.
* :func:`probf_filter` asks that the *learned* constraint
  c_a^T u + c_b + d(x, u) >= 0 hold with probability 1 - eps under the GP
  posterior of d. Its deterministic equivalent

      (a_bar + c_a)^T u + b_bar + c_b - delta * sqrt(z^T S z) >= 0,  z = (u, 1),

  is non-convex as a QCQP but becomes a second-order cone program after
  lifting u to [u; t; s] with t pinned to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np
from scipy.stats import norm

from .barrier import BarrierSpec, ConstraintConstants, barrier_constants
from .dynamics import ControlAffineModel
from .errors import ContractViolation, InfeasibleError, SolverStall
from .gp import GPResidualModel, PosteriorBlocks, posterior_blocks, robust_cholesky
from .socp import ConeQP, solve_cone_qp

FEASIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class FilterResult:
    u: np.ndarray
    delta_used: float
    feasible_at_requested_delta: bool
    slack: float
    solver_iterations: int = 0
    feasible: bool = True


# --------------------------------------------------------------------------
# Nominal filter


def cbf_qp(cc: ConstraintConstants, u_d) -> np.ndarray:
    """argmin |u - u_d|^2 subject to c_a^T u + c_b >= 0, in closed form."""
    u_d = np.atleast_1d(np.asarray(u_d, dtype=float))
    c_a = np.atleast_1d(cc.c_a)
    if not (np.all(np.isfinite(u_d)) and np.all(np.isfinite(c_a)) and np.isfinite(cc.c_b)):
        raise ContractViolation("non-finite filter inputs")
    value = float(c_a @ u_d + cc.c_b)
    if value >= 0:
        return u_d.copy()
    norm_sq = float(c_a @ c_a)
    if norm_sq == 0.0:
        raise InfeasibleError(f"constraint does not depend on u and is violated by {value:.3g}")
    return u_d - c_a * value / norm_sq


def delta_from_epsilon(eps: float) -> float:
    """delta = Phi^-1(1 - eps) for a Gaussian residual."""
    if not 0.0 < eps < 1.0:
        raise ContractViolation(f"eps must lie in (0, 1), got {eps}")
    return float(norm.isf(eps))


def mean_shifted(blocks: PosteriorBlocks, cc: ConstraintConstants) -> ConstraintConstants:
    """Constants of the GP-mean constraint (delta = 0)."""
    return ConstraintConstants(c_a=np.atleast_1d(cc.c_a) + blocks.a_mean, c_b=cc.c_b + blocks.b_mean)


def chance_slack(blocks: PosteriorBlocks, cc: ConstraintConstants, u, delta: float) -> float:
    """Left side of the deterministic chance constraint at u."""
    u = np.atleast_1d(u)
    mean = float((np.atleast_1d(cc.c_a) + blocks.a_mean) @ u + cc.c_b + blocks.b_mean)
    return mean - delta * math.sqrt(max(blocks.variance(u), 0.0))


# --------------------------------------------------------------------------
# Convex program


@dataclass(frozen=True)
class ConvexSafetyProgram:
    """Lifted program over z = [u; t; s].

    minimize z^T Q z  s.t.  |Sigma_bar z| <= c^T z,  C z <= d,  D^T z = f.
    """

    Q: np.ndarray
    sigma_bar: np.ndarray
    c: np.ndarray
    C: np.ndarray
    d: np.ndarray
    D: np.ndarray
    f: float
    u_d: np.ndarray
    delta: float
    blocks: PosteriorBlocks
    constants: ConstraintConstants

    @property
    def control_dim(self) -> int:
        return len(self.u_d)

    def to_cone_qp(self) -> ConeQP:
        n = self.control_dim + 2
        G = np.vstack([self.C, -self.c[None, :], -self.sigma_bar])
        h = np.concatenate([self.d, np.zeros(1 + len(self.sigma_bar))])
        return ConeQP(P=2.0 * self.Q, q=np.zeros(n), G=G, h=h,
                      A=self.D.reshape(1, n), b=np.array([self.f]),
                      n_linear=len(self.d), soc_dim=1 + len(self.sigma_bar))


def build_program(blocks: PosteriorBlocks, cc: ConstraintConstants, u_d, delta: float) -> ConvexSafetyProgram:
    if delta < 0 or not np.isfinite(delta):
        raise ContractViolation(f"delta must be finite and >= 0, got {delta}")
    u_d = np.atleast_1d(np.asarray(u_d, dtype=float))
    m = len(u_d)
    if len(blocks.a_mean) != m or len(np.atleast_1d(cc.c_a)) != m:
        raise ContractViolation("control dimension disagrees with the posterior or constants")
    n = m + 2
    Q = np.zeros((n, n))
    Q[:m, :m] = np.eye(m)
    Q[:m, m] = -u_d
    Q[m, :m] = -u_d
    Q[m, m] = u_d @ u_d

    L, _ = robust_cholesky(blocks.augmented_covariance())
    sigma_bar = np.zeros((n, n))
    sigma_bar[: m + 1, : m + 1] = L.T

    c = np.zeros(n)
    c[m + 1] = 1.0
    a_eff = np.atleast_1d(cc.c_a) + blocks.a_mean
    b_eff = cc.c_b + blocks.b_mean
    C = np.zeros((2, n))
    C[0, :m] = -a_eff
    C[0, m] = -b_eff
    C[0, m + 1] = delta
    C[1, m + 1] = -1.0
    D = np.zeros(n)
    D[m] = 1.0
    return ConvexSafetyProgram(Q=Q, sigma_bar=sigma_bar, c=c, C=C, d=np.zeros(2), D=D, f=1.0,
                               u_d=u_d, delta=float(delta), blocks=blocks, constants=cc)


def max_chance_slack(blocks: PosteriorBlocks, cc: ConstraintConstants, delta: float) -> float:
    """sup over u of the chance-constraint left side (may be +inf).

    With S the augmented covariance, write z^T S z = (u + v)^T S_a (u + v) + rho0^2.
    The supremum is unbounded when the effective slope has a component outside
    range(S_a) or when its S_a^-1 norm exceeds delta; otherwise it equals
    b - a^T v - rho0 sqrt(delta^2 - rho^2).
    """
    a = np.atleast_1d(cc.c_a) + blocks.a_mean
    b = cc.c_b + blocks.b_mean
    if delta == 0.0:
        return math.inf if np.any(a != 0) else float(b)
    Sa = 0.5 * (blocks.cov_a + blocks.cov_a.T)
    w, V = np.linalg.eigh(Sa)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(w))))
    keep = w > tol
    coords = V.T @ a
    if np.any(np.abs(coords[~keep]) > 1e-12 * max(1.0, np.linalg.norm(a))):
        return math.inf
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    rho_sq = float(np.sum(coords ** 2 * inv))
    if rho_sq > delta * delta:
        return math.inf
    shift = V @ (inv * (V.T @ blocks.cov_ab))
    rho0_sq = max(blocks.var_b - float(blocks.cov_ab @ shift), 0.0)
    return float(b - a @ shift - math.sqrt(rho0_sq * (delta * delta - rho_sq)))


@dataclass(frozen=True)
class ProgramSolution:
    z: Optional[np.ndarray]
    status: str
    iterations: int = 0

    @property
    def u(self) -> Optional[np.ndarray]:
        return None if self.z is None else self.z[:-2]


def solve(program: ConvexSafetyProgram, max_iter: int = 60) -> ProgramSolution:
    """Solve the lifted program; status is "optimal" or "infeasible".

    Feasibility is decided analytically first. A desired control that already
    satisfies the chance constraint is returned as is.
    """
    blocks, cc, delta, u_d = program.blocks, program.constants, program.delta, program.u_d
    m = program.control_dim
    if chance_slack(blocks, cc, u_d, delta) >= 0:
        s = math.sqrt(max(blocks.variance(u_d), 0.0))
        return ProgramSolution(np.concatenate([u_d, [1.0, s]]), "optimal", 0)
    scale = 1.0 + abs(cc.c_b + blocks.b_mean)
    if max_chance_slack(blocks, cc, delta) <= FEASIBILITY_TOL * scale:
        return ProgramSolution(None, "infeasible", 0)
    sol = solve_cone_qp(program.to_cone_qp(), max_iter=max_iter)
    u = _polish(blocks, cc, u_d, delta, sol.x[:m])
    z = np.concatenate([u, [1.0, math.sqrt(max(blocks.variance(u), 0.0))]])
    return ProgramSolution(z, "optimal", sol.iterations)


def _polish(blocks: PosteriorBlocks, cc: ConstraintConstants, u_d, delta: float, u0,
            steps: int = 4) -> np.ndarray:
    """Newton refinement of an interior-point answer on the active constraint.

    The optimum with u_d infeasible lies on phi(u) = 0, where it satisfies
    u - u_d = lam grad phi(u). A step is kept only if it shrinks that residual
    without leaving the feasible side.
    """
    a = np.atleast_1d(cc.c_a) + blocks.a_mean
    Sa, sab = blocks.cov_a, blocks.cov_ab

    def parts(u):
        var = blocks.variance(u)
        if var <= 1e-14:
            return None
        sd = math.sqrt(var)
        w = Sa @ u + sab
        phi = float(a @ u + cc.c_b + blocks.b_mean - delta * sd)
        grad = a - delta * w / sd
        hess = -delta * (Sa / sd - np.outer(w, w) / sd ** 3)
        return phi, grad, hess

    def residual(u, lam, phi, grad):
        return max(np.linalg.norm(u - u_d - lam * grad), abs(phi))

    u = np.array(u0, dtype=float)
    got = parts(u)
    if got is None:
        return u
    phi, grad, hess = got
    lam = float((u - u_d) @ grad / max(grad @ grad, 1e-300))
    best = residual(u, lam, phi, grad)
    m = len(u)
    for _ in range(steps):
        K = np.zeros((m + 1, m + 1))
        K[:m, :m] = np.eye(m) - lam * hess
        K[:m, m] = -grad
        K[m, :m] = -grad
        rhs = -np.concatenate([u - u_d - lam * grad, [-phi]])
        try:
            step = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            break
        u_new, lam_new = u + step[:m], lam + step[m]
        got = parts(u_new)
        if got is None:
            break
        phi_new, grad_new, hess_new = got
        res = residual(u_new, lam_new, phi_new, grad_new)
        if res >= best or phi_new < -1e-12 * (1.0 + abs(cc.c_b + blocks.b_mean)):
            break
        u, lam, phi, grad, hess, best = u_new, lam_new, phi_new, grad_new, hess_new, res
    return u


# --------------------------------------------------------------------------
# Probabilistic filter with delta backoff


@dataclass(frozen=True)
class BackoffSchedule:
    """Try delta, then ``attempts`` successive reductions by ``factor``, then zero."""

    factor: float = 0.5
    attempts: int = 6
    keep_for_episode: bool = True

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0 or self.attempts < 0:
            raise ContractViolation("backoff factor must be in (0, 1) and attempts >= 0")

    def deltas(self, delta: float) -> Iterator[float]:
        yield float(delta)
        if delta == 0.0:
            return
        for k in range(1, self.attempts + 1):
            yield float(delta) * self.factor ** k
        yield 0.0


def probf_filter(gp: GPResidualModel, cc: ConstraintConstants, x, u_d, delta_request: float,
                 backoff: BackoffSchedule = BackoffSchedule()) -> FilterResult:
    """Chance-constrained projection of u_d at state x, backing delta off when infeasible.

    Never raises on infeasibility: if even the GP-mean constraint cannot be met,
    u_d is returned with both feasibility flags cleared. A cone solve that stalls
    (seen only on wildly scaled inputs from diverging rollouts) counts as
    infeasible at that delta.
    """
    if delta_request < 0:
        raise ContractViolation("delta must be >= 0")
    u_d = np.atleast_1d(np.asarray(u_d, dtype=float))
    blocks = posterior_blocks(gp, x)
    for delta in backoff.deltas(delta_request):
        requested = delta == delta_request
        if delta == 0.0:
            try:
                u = cbf_qp(mean_shifted(blocks, cc), u_d)
            except InfeasibleError:
                break
            return FilterResult(u=u, delta_used=0.0, feasible_at_requested_delta=requested,
                                slack=chance_slack(blocks, cc, u, 0.0))
        try:
            sol = solve(build_program(blocks, cc, u_d, delta))
        except SolverStall:
            continue
        if sol.status == "optimal":
            return FilterResult(u=sol.u, delta_used=delta, feasible_at_requested_delta=requested,
                                slack=chance_slack(blocks, cc, sol.u, delta),
                                solver_iterations=sol.iterations)
    return FilterResult(u=u_d.copy(), delta_used=0.0, feasible_at_requested_delta=False,
                        slack=chance_slack(blocks, cc, u_d, 0.0), feasible=False)


def chance_validate(blocks: PosteriorBlocks, cc: ConstraintConstants, u, eps: float,
                    n_samples: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo rate of c_a^T u + c_b + d <= 0 with d drawn from the posterior at u.

    ``eps`` is only checked for range; the caller compares the rate against it.
    """
    if n_samples < 10_000:
        raise ContractViolation("use at least 1e4 samples")
    if not 0.0 < eps < 1.0:
        raise ContractViolation("eps must lie in (0, 1)")
    u = np.atleast_1d(u)
    rng = np.random.default_rng(seed)
    d = blocks.mean(u) + math.sqrt(max(blocks.variance(u), 0.0)) * rng.standard_normal(n_samples)
    return float(np.mean(cc.value(u) + d <= 0.0))


# --------------------------------------------------------------------------
# Closed-loop controllers


@dataclass
class NominalFilter:
    """Desired controller passed through the nominal CBF-QP."""

    barrier: BarrierSpec
    model: ControlAffineModel
    desired: Callable

    def reset(self):
        pass

    def __call__(self, t, x) -> FilterResult:
        u_d = np.atleast_1d(self.desired(t, x))
        cc = barrier_constants(self.barrier, self.model, x)
        try:
            u = cbf_qp(cc, u_d)
            ok = True
        except InfeasibleError:
            u, ok = u_d, False
        return FilterResult(u=u, delta_used=0.0, feasible_at_requested_delta=ok,
                            slack=cc.value(u), feasible=ok)


@dataclass
class ProbfController:
    """Desired controller passed through :func:`probf_filter`.

    With ``backoff.keep_for_episode`` a reduced delta persists until
    :meth:`reset`, so later steps start from the lower confidence level.
    """

    barrier: BarrierSpec
    model: ControlAffineModel
    gp: GPResidualModel
    desired: Callable
    delta: float = 1.0
    backoff: BackoffSchedule = field(default_factory=BackoffSchedule)
    current_delta: float = field(init=False)
    backoff_events: int = field(init=False, default=0)

    def __post_init__(self):
        self.reset()

    def reset(self):
        self.current_delta = float(self.delta)
        self.backoff_events = 0

    def __call__(self, t, x) -> FilterResult:
        u_d = np.atleast_1d(self.desired(t, x))
        cc = barrier_constants(self.barrier, self.model, x)
        res = probf_filter(self.gp, cc, x, u_d, self.current_delta, self.backoff)
        if res.delta_used < self.current_delta:
            self.backoff_events += 1
            if self.backoff.keep_for_episode:
                self.current_delta = res.delta_used
        return replace(res, feasible_at_requested_delta=res.feasible
                       and res.delta_used == self.delta)
