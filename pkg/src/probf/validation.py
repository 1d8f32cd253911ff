"""Self-check suites comparing the fast implementations against brute-force references."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .barrier import ConstraintConstants
from .gp import (KernelHyperparams, PosteriorBlocks, ResidualDataset, composite_gram,
                 direct_predict, matern52_gram, posterior_blocks, train)
from .safety_filter import build_program, chance_slack, solve


@dataclass
class SuiteResult:
    name: str
    passed: int
    total: int
    worst: float

    @property
    def ok(self) -> bool:
        return self.passed == self.total

    def line(self) -> str:
        return f"{self.name}: {self.passed}/{self.total} passed (worst error {self.worst:.2e})"


def random_hyperparams(rng, n: int, m: int) -> KernelHyperparams:
    return KernelHyperparams(
        b_variance=rng.uniform(0.5, 2.0), b_lengthscales=rng.uniform(0.5, 2.0, n),
        a_variances=rng.uniform(0.5, 2.0, m), a_lengthscales=rng.uniform(0.5, 2.0, (m, n)),
        noise_variance=rng.uniform(1e-3, 1e-1))


def random_dataset(rng, n: int, m: int, size: int) -> ResidualDataset:
    X = rng.normal(size=(size, n))
    U = rng.normal(size=(size, m))
    y = np.sin(X[:, 0]) + np.sum(U * np.cos(X[:, :m]), axis=1) + 0.05 * rng.normal(size=size)
    return ResidualDataset(X, U, y)


def joint_conditioning(model, x):
    """(m+1)-dimensional posterior of (a(x*), b(x*)) by dense joint Gaussian conditioning."""
    hp, data = model.hyperparams, model.data
    m = hp.control_dim
    K = composite_gram(hp, data.states, data.controls, data.states, data.controls)
    K = K + hp.noise_variance * np.eye(len(data))
    xs = np.asarray(x, dtype=float).reshape(1, -1)
    cross = np.empty((m + 1, len(data)))
    for j in range(m):
        cross[j] = matern52_gram(xs, data.states, hp.a_lengthscales[j], hp.a_variances[j])[0] \
            * data.controls[:, j]
    cross[m] = matern52_gram(xs, data.states, hp.b_lengthscales, hp.b_variance)[0]
    prior = np.diag(np.append(hp.a_variances, hp.b_variance))
    Kinv = np.linalg.inv(K)
    mean = cross @ Kinv @ data.labels
    cov = prior - cross @ Kinv @ cross.T
    return mean, cov


def gp_oracle_suite(n_datasets: int = 25, seed: int = 0, tol: float = 1e-8) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, passed = 0.0, 0
    for k in range(n_datasets):
        m = 1 + k % 2
        n = int(rng.integers(2, 5))
        data = random_dataset(rng, n, m, int(rng.integers(1, 21)))
        model = train(data, random_hyperparams(rng, n, m))
        err = 0.0
        for _ in range(4):
            x, u = rng.normal(size=n), rng.normal(size=m)
            blocks = posterior_blocks(model, x)
            mu_d, var_d = direct_predict(model, x, u)
            err = max(err, abs(blocks.mean(u) - mu_d), abs(blocks.variance(u) - var_d))
            mean, cov = joint_conditioning(model, x)
            err = max(err, np.max(np.abs(mean - np.append(blocks.a_mean, blocks.b_mean))),
                      np.max(np.abs(cov - blocks.augmented_covariance())))
        worst = max(worst, err)
        passed += err < tol
    return SuiteResult("gp posterior blocks vs direct and joint conditioning", passed, n_datasets, worst)


def random_instance(rng, m: int):
    B = rng.normal(size=(m + 1, m + 1))
    S = B @ B.T * rng.uniform(0.01, 2.0)
    blocks = PosteriorBlocks(rng.normal(size=m), float(rng.normal()), S[:m, :m], S[:m, m].copy(),
                             float(S[m, m]))
    cc = ConstraintConstants(2.0 * rng.normal(size=m), float(rng.normal() - 1.5))
    return blocks, cc, 2.0 * rng.normal(size=m), float(rng.uniform(0.0, 2.5))


def interval_oracle(blocks, cc, u_d: float, delta: float):
    """Nearest point to u_d of the (interval) feasible set in one dimension, or None."""
    phi = lambda u: chance_slack(blocks, cc, np.array([u]), delta)
    if phi(u_d) >= 0:
        return u_d
    span = 1e4 * (1.0 + abs(u_d))
    res = minimize_scalar(lambda u: -phi(u), bounds=(u_d - span, u_d + span), method="bounded",
                          options={"xatol": 1e-12})
    peak = res.x
    if phi(peak) < 0:
        return None
    lo, hi = sorted((u_d, peak))
    return brentq(phi, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def grid_oracle(blocks, cc, u_d, delta: float, half_width: float, n: int = 400):
    g0 = np.linspace(u_d[0] - half_width, u_d[0] + half_width, n)
    g1 = np.linspace(u_d[1] - half_width, u_d[1] + half_width, n)
    U0, U1 = np.meshgrid(g0, g1, indexing="ij")
    pts = np.column_stack([U0.ravel(), U1.ravel()])
    a = np.atleast_1d(cc.c_a) + blocks.a_mean
    mean = pts @ a + cc.c_b + blocks.b_mean
    var = np.einsum("ij,jk,ik->i", pts, blocks.cov_a, pts) + 2 * pts @ blocks.cov_ab + blocks.var_b
    ok = mean - delta * np.sqrt(np.maximum(var, 0.0)) >= 0
    if not np.any(ok):
        return None, 2 * half_width / (n - 1)
    d = np.sum((pts[ok] - u_d) ** 2, axis=1)
    return pts[ok][np.argmin(d)], 2 * half_width / (n - 1)


def socp_oracle_suite(n_instances: int = 200, seed: int = 0) -> list:
    """m = 1 against the interval oracle and m = 2 against a 400 x 400 grid."""
    rng = np.random.default_rng(seed)
    results = []
    passed, worst, total = 0, 0.0, 0
    while total < n_instances:
        blocks, cc, u_d, delta = random_instance(rng, 1)
        ref = interval_oracle(blocks, cc, float(u_d[0]), delta)
        sol = solve(build_program(blocks, cc, u_d, delta))
        total += 1
        if ref is None or sol.status == "infeasible":
            ok = (ref is None) == (sol.status == "infeasible")
            err = 0.0 if ok else math.inf
        else:
            err = abs(abs(sol.u[0] - u_d[0]) - abs(ref - u_d[0]))
            ok = err < 1e-6
        passed += ok
        worst = max(worst, err)
    results.append(SuiteResult("socp m=1 vs interval oracle", passed, total, worst))

    passed, worst, total = 0, 0.0, 0
    while total < n_instances:
        blocks, cc, u_d, delta = random_instance(rng, 2)
        sol = solve(build_program(blocks, cc, u_d, delta))
        if sol.status == "infeasible":
            continue  # the grid cannot certify emptiness; infeasibility is covered elsewhere
        dist = float(np.linalg.norm(sol.u - u_d))
        half = max(1.2 * dist, 1e-3)
        ref, step = grid_oracle(blocks, cc, u_d, delta, half)
        total += 1
        if ref is None:
            # the solver's point lies in the box; an empty grid means the set is thinner than a cell
            ok, err = dist <= half, 0.0
        else:
            err = dist - float(np.linalg.norm(ref - u_d))
            ok = -math.sqrt(2) * step - 1e-6 <= err <= 1e-6
            err /= step
        passed += ok
        worst = max(worst, abs(err))
    results.append(SuiteResult("socp m=2 vs 400x400 grid (error in grid cells)", passed, total, worst))
    return results
