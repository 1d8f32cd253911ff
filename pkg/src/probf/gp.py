"""Gaussian-process model of the residual barrier dynamics d(x, u) = a(x)^T u + b(x).

Each a_j and b gets an independent zero-mean GP prior with a Matern-5/2 ARD
kernel, so the label covariance is the composite kernel

    k_d((x, u), (x', u')) = sum_j k_aj(x, x') u_j u'_j + k_b(x, x').

Conditioning on labels couples a and b, and :func:`posterior_blocks` returns
the full joint posterior of (a(x*), b(x*)) at a query state.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import ConditioningError, ContractViolation

NOISE_FLOOR = 1e-8
JITTER_START = 1e-8
JITTER_MAX = 1e-2
SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# Data containers


@dataclass(frozen=True)
class ResidualDataset:
    """Rows ((x_i, u_i), d_i) of residual labels."""

    states: np.ndarray
    controls: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.states, dtype=float))
        U = np.asarray(self.controls, dtype=float)
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        if U.ndim == 1:
            U = U.reshape(len(y), -1) if len(y) else U.reshape(0, 1)
        if X.shape[0] != len(y) or U.shape[0] != len(y):
            raise ContractViolation(
                f"dataset rows disagree: {X.shape[0]} states, {U.shape[0]} controls, {len(y)} labels"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U)) and np.all(np.isfinite(y))):
            raise ContractViolation("dataset contains non-finite entries")
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "controls", U)
        object.__setattr__(self, "labels", y)

    @classmethod
    def empty(cls, state_dim: int, control_dim: int) -> "ResidualDataset":
        return cls(np.zeros((0, state_dim)), np.zeros((0, control_dim)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def control_dim(self) -> int:
        return self.controls.shape[1]

    def subset(self, index) -> "ResidualDataset":
        return ResidualDataset(self.states[index], self.controls[index], self.labels[index])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.states, self.controls, self.labels):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            h.update(str(arr.shape).encode())
        return h.hexdigest()


# --------------------------------------------------------------------------
# Hyperparameters


@dataclass(frozen=True)
class KernelHyperparams:
    """Signal variances and ARD lengthscales for k_b and each k_aj, plus noise."""

    b_variance: float
    b_lengthscales: np.ndarray
    a_variances: np.ndarray
    a_lengthscales: np.ndarray
    noise_variance: float = 1e-4

    def __post_init__(self):
        b_ls = np.asarray(self.b_lengthscales, dtype=float).reshape(-1)
        a_var = np.asarray(self.a_variances, dtype=float).reshape(-1)
        a_ls = np.asarray(self.a_lengthscales, dtype=float).reshape(len(a_var), len(b_ls))
        if self.b_variance <= 0 or np.any(a_var <= 0):
            raise ContractViolation("signal variances must be positive")
        if np.any(b_ls <= 0) or np.any(a_ls <= 0):
            raise ContractViolation("lengthscales must be positive")
        if not np.isfinite(self.noise_variance) or self.noise_variance < NOISE_FLOOR:
            raise ContractViolation(f"noise variance must be >= {NOISE_FLOOR}")
        object.__setattr__(self, "b_variance", float(self.b_variance))
        object.__setattr__(self, "b_lengthscales", b_ls)
        object.__setattr__(self, "a_variances", a_var)
        object.__setattr__(self, "a_lengthscales", a_ls)
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @property
    def state_dim(self) -> int:
        return len(self.b_lengthscales)

    @property
    def control_dim(self) -> int:
        return len(self.a_variances)

    @classmethod
    def default(cls, state_dim: int, control_dim: int, variance: float = 1.0,
                lengthscale=1.0, noise_variance: float = 1e-4) -> "KernelHyperparams":
        ls = np.broadcast_to(np.asarray(lengthscale, dtype=float), (state_dim,)).copy()
        return cls(b_variance=variance, b_lengthscales=ls,
                   a_variances=np.full(control_dim, variance),
                   a_lengthscales=np.tile(ls, (control_dim, 1)),
                   noise_variance=noise_variance)

    def to_log_vector(self) -> np.ndarray:
        """Layout: [b_var, b_ls (n), then per j: a_var_j, a_ls_j (n), noise]."""
        parts = [[self.b_variance], self.b_lengthscales]
        for j in range(self.control_dim):
            parts += [[self.a_variances[j]], self.a_lengthscales[j]]
        parts.append([self.noise_variance])
        return np.log(np.concatenate(parts))

    @classmethod
    def from_log_vector(cls, theta, state_dim: int, control_dim: int) -> "KernelHyperparams":
        v = np.exp(np.asarray(theta, dtype=float))
        n = state_dim
        block = n + 1
        a_var = np.array([v[block * (j + 1)] for j in range(control_dim)])
        a_ls = np.array([v[block * (j + 1) + 1: block * (j + 2)] for j in range(control_dim)])
        return cls(b_variance=v[0], b_lengthscales=v[1:block], a_variances=a_var,
                   a_lengthscales=a_ls.reshape(control_dim, n),
                   noise_variance=max(v[-1], NOISE_FLOOR))

    def to_dict(self) -> dict:
        return {
            "b_variance": self.b_variance,
            "b_lengthscales": self.b_lengthscales.tolist(),
            "a_variances": self.a_variances.tolist(),
            "a_lengthscales": self.a_lengthscales.tolist(),
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelHyperparams":
        return cls(**d)


# --------------------------------------------------------------------------
# Kernels


def matern52(x, x2, lengthscales, variance: float) -> float:
    """Matern-5/2 ARD kernel between two points."""
    ls = np.asarray(lengthscales, dtype=float)
    r = math.sqrt(float(np.sum(((np.asarray(x) - np.asarray(x2)) / ls) ** 2)))
    return variance * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * math.exp(-SQRT5 * r)


def matern52_gram(X1, X2, lengthscales, variance: float) -> np.ndarray:
    """Vectorised Matern-5/2 Gram matrix between row sets X1 and X2."""
    A = np.atleast_2d(X1) / lengthscales
    B = np.atleast_2d(X2) / lengthscales
    sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    r = np.sqrt(np.maximum(sq, 0.0))
    return variance * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * np.exp(-SQRT5 * r)


def composite_kernel(hp: KernelHyperparams, x, u, x2, u2) -> float:
    """k_d between two (state, control) pairs."""
    u, u2 = np.atleast_1d(u), np.atleast_1d(u2)
    total = matern52(x, x2, hp.b_lengthscales, hp.b_variance)
    for j in range(hp.control_dim):
        total += matern52(x, x2, hp.a_lengthscales[j], hp.a_variances[j]) * u[j] * u2[j]
    return total


def composite_gram(hp: KernelHyperparams, X1, U1, X2, U2) -> np.ndarray:
    K = matern52_gram(X1, X2, hp.b_lengthscales, hp.b_variance)
    U1, U2 = np.atleast_2d(U1), np.atleast_2d(U2)
    for j in range(hp.control_dim):
        K = K + matern52_gram(X1, X2, hp.a_lengthscales[j], hp.a_variances[j]) \
            * np.outer(U1[:, j], U2[:, j])
    return K


def _check_dims(data: ResidualDataset, hp: KernelHyperparams):
    if data.state_dim != hp.state_dim or data.control_dim != hp.control_dim:
        raise ContractViolation(
            f"dataset is ({data.state_dim}, {data.control_dim}) but hyperparameters are "
            f"({hp.state_dim}, {hp.control_dim})"
        )


# --------------------------------------------------------------------------
# Factorisation and likelihood


def robust_cholesky(K: np.ndarray):
    """Lower Cholesky factor of K, adding diagonal jitter only if plain factorisation fails.

    Returns (L, jitter). Jitter starts at 1e-8 times the mean diagonal and grows
    tenfold up to 1e-2 times it before giving up.
    """
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.diag(K))), 1e-300) if len(K) else 1.0
    level = JITTER_START
    while level <= JITTER_MAX * (1 + 1e-12):
        jitter = level * scale
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K))), jitter
        except np.linalg.LinAlgError:
            level *= 10.0
    raise ConditioningError(f"matrix not positive definite even with jitter {JITTER_MAX * scale:.3g}",
                            jitter=JITTER_MAX * scale)


def _train_covariance(data: ResidualDataset, hp: KernelHyperparams) -> np.ndarray:
    K = composite_gram(hp, data.states, data.controls, data.states, data.controls)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += hp.noise_variance
    return K


def log_marginal_likelihood(data: ResidualDataset, hp: KernelHyperparams) -> float:
    """log p(y | X, U, hp) through a Cholesky factor."""
    if len(data) == 0:
        raise ContractViolation("marginal likelihood needs at least one observation")
    _check_dims(data, hp)
    L, _ = robust_cholesky(_train_covariance(data, hp))
    beta = solve_triangular(L, data.labels, lower=True)
    return float(-0.5 * beta @ beta - np.sum(np.log(np.diag(L))) - 0.5 * len(data) * LOG_2PI)


def _mll_and_grad(theta, data: ResidualDataset, sq_diffs: np.ndarray):
    """MLL and its gradient with respect to the log-hyperparameters."""
    n, m = data.state_dim, data.control_dim
    hp = KernelHyperparams.from_log_vector(theta, n, m)
    N = len(data)
    y = data.labels

    def component(variance, ls):
        r = np.sqrt(np.einsum("ijd,d->ij", sq_diffs, 1.0 / (ls * ls)))
        e = np.exp(-SQRT5 * r)
        K = variance * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * e
        common = variance * (5.0 / 3.0) * (1.0 + SQRT5 * r) * e
        return K, common

    # parts holds (dK/dlog variance, common factor, lengthscales) per component
    Kb, common = component(hp.b_variance, hp.b_lengthscales)
    K = Kb.copy()
    parts = [(Kb, common, hp.b_lengthscales)]
    for j in range(m):
        uu = np.outer(data.controls[:, j], data.controls[:, j])
        Ka, common = component(hp.a_variances[j], hp.a_lengthscales[j])
        Ka *= uu
        K += Ka
        parts.append((Ka, common * uu, hp.a_lengthscales[j]))
    K = 0.5 * (K + K.T)
    K[np.diag_indices(N)] += hp.noise_variance

    L, _ = robust_cholesky(K)
    alpha = cho_solve((L, True), y)
    mll = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * N * LOG_2PI
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(N))
    grad = []
    for Kc, common, ls in parts:
        grad.append(0.5 * np.sum(W * Kc))
        grad.extend(0.5 * np.einsum("ij,ijd->d", W * common, sq_diffs) / (ls * ls))
    grad.append(0.5 * hp.noise_variance * np.trace(W))
    grad = np.array(grad)
    return float(mll), grad


def mll_gradient(data: ResidualDataset, hp: KernelHyperparams) -> np.ndarray:
    """Analytic gradient of the MLL in the log-parameter layout of ``to_log_vector``."""
    _check_dims(data, hp)
    X = data.states
    sq = (X[:, None, :] - X[None, :, :]) ** 2
    return _mll_and_grad(hp.to_log_vector(), data, sq)[1]


# --------------------------------------------------------------------------
# Hyperparameter fitting


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 4
    max_iter: int = 200
    seed: int = 0
    init_noise_fraction: float = 0.1
    restart_spread: float = 1.0
    log_bound: float = 7.0


def initial_hyperparams(data: ResidualDataset, noise_fraction: float = 0.1) -> KernelHyperparams:
    """Data-scaled starting point: lengthscales equal to the per-dimension training std."""
    std = np.std(data.states, axis=0)
    ls = np.where(std > 1e-8, std, 1.0)
    yvar = float(np.var(data.labels))
    yvar = yvar if yvar > 1e-12 else 1.0
    u2 = np.mean(data.controls ** 2, axis=0)
    a_var = yvar / np.where(u2 > 1e-12, u2, 1.0)
    return KernelHyperparams(b_variance=yvar, b_lengthscales=ls, a_variances=a_var,
                             a_lengthscales=np.tile(ls, (data.control_dim, 1)),
                             noise_variance=max(noise_fraction * yvar, NOISE_FLOOR))


def fit_hyperparams(data: ResidualDataset, config: FitConfig = FitConfig(),
                    init: Optional[KernelHyperparams] = None) -> KernelHyperparams:
    """Maximise the MLL over log-hyperparameters with multi-start L-BFGS-B.

    The first start is ``init`` (or the data-scaled default); the remaining
    ones are log-normal perturbations of it. The result never has lower MLL
    than ``init``.
    """
    if len(data) < 2:
        raise ContractViolation("fitting needs at least two observations")
    n, m = data.state_dim, data.control_dim
    init = init or initial_hyperparams(data, config.init_noise_fraction)
    _check_dims(data, init)
    X = data.states
    sq = (X[:, None, :] - X[None, :, :]) ** 2
    theta0 = init.to_log_vector()
    bounds = [(t - config.log_bound, t + config.log_bound) for t in theta0]
    bounds[-1] = (math.log(NOISE_FLOOR), max(theta0[-1], math.log(NOISE_FLOOR)) + config.log_bound)

    def objective(theta):
        try:
            mll, grad = _mll_and_grad(theta, data, sq)
        except (ConditioningError, np.linalg.LinAlgError, FloatingPointError):
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(mll):
            return 1e25, np.zeros_like(theta)
        return -mll, -grad

    rng = np.random.default_rng(config.seed)
    starts = [theta0] + [theta0 + config.restart_spread * rng.standard_normal(len(theta0))
                         for _ in range(max(config.restarts - 1, 0))]
    try:
        best_theta, best_value = theta0, objective(theta0)[0]
    except Exception:
        best_theta, best_value = theta0, np.inf
    failures = 0
    for start in starts:
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        with np.errstate(all="ignore"):
            res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": config.max_iter})
        if res.fun >= 1e25:
            failures += 1
            continue
        if res.fun < best_value:
            best_theta, best_value = res.x, res.fun
    if failures == len(starts) and not np.isfinite(best_value):
        raise ConditioningError("every optimiser restart failed to factorise the covariance")
    return KernelHyperparams.from_log_vector(best_theta, n, m)


# --------------------------------------------------------------------------
# Trained model and posterior


@dataclass(frozen=True)
class PosteriorBlocks:
    """Joint Gaussian posterior of (a(x*), b(x*))."""

    a_mean: np.ndarray
    b_mean: float
    cov_a: np.ndarray
    cov_ab: np.ndarray
    var_b: float

    def augmented_covariance(self) -> np.ndarray:
        m = len(self.a_mean)
        S = np.empty((m + 1, m + 1))
        S[:m, :m] = self.cov_a
        S[:m, m] = self.cov_ab
        S[m, :m] = self.cov_ab
        S[m, m] = self.var_b
        return S

    def mean(self, u) -> float:
        return float(self.a_mean @ np.atleast_1d(u) + self.b_mean)

    def variance(self, u) -> float:
        u = np.atleast_1d(u)
        return float(u @ self.cov_a @ u + 2.0 * self.cov_ab @ u + self.var_b)


@dataclass(frozen=True)
class GPResidualModel:
    hyperparams: KernelHyperparams
    data: ResidualDataset
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n_points(self) -> int:
        return len(self.data)

    def log_marginal_likelihood(self) -> float:
        if self.n_points == 0:
            return 0.0
        beta = solve_triangular(self.chol, self.data.labels, lower=True)
        return float(-0.5 * beta @ beta - np.sum(np.log(np.diag(self.chol)))
                     - 0.5 * self.n_points * LOG_2PI)

    def save(self, path) -> Path:
        path = Path(path)
        payload = {
            "hyperparams": self.hyperparams.to_dict(),
            "states": self.data.states.tolist(),
            "controls": self.data.controls.tolist(),
            "labels": self.data.labels.tolist(),
            "dataset_sha256": self.data.digest(),
            "mll": self.log_marginal_likelihood(),
        }
        path.write_text(json.dumps(payload))
        return path

    @classmethod
    def load(cls, path, tol: float = 1e-9) -> "GPResidualModel":
        payload = json.loads(Path(path).read_text())
        hp = KernelHyperparams.from_dict(payload["hyperparams"])
        m = hp.control_dim
        data = ResidualDataset(np.asarray(payload["states"], dtype=float).reshape(-1, hp.state_dim),
                               np.asarray(payload["controls"], dtype=float).reshape(-1, m),
                               payload["labels"])
        if data.digest() != payload["dataset_sha256"]:
            raise ContractViolation(f"{path}: dataset hash mismatch")
        model = train(data, hp)
        stored = payload["mll"]
        if abs(model.log_marginal_likelihood() - stored) > tol * max(1.0, abs(stored)):
            raise ContractViolation(f"{path}: rebuilt MLL disagrees with the stored value")
        return model


def train(data: ResidualDataset, hp: KernelHyperparams) -> GPResidualModel:
    """Factorise K + noise I and cache the weights alpha = (K + noise I)^-1 y."""
    _check_dims(data, hp)
    if len(data) == 0:
        return GPResidualModel(hp, data, np.zeros((0, 0)), np.zeros(0))
    L, jitter = robust_cholesky(_train_covariance(data, hp))
    alpha = cho_solve((L, True), data.labels)
    return GPResidualModel(hp, data, L, alpha, jitter)


def _cross_features(model: GPResidualModel, x) -> np.ndarray:
    """Rows k_aj(x*, x_i) u_ij for each j, then k_b(x*, x_i); shape (m+1, N)."""
    hp, data = model.hyperparams, model.data
    xs = np.asarray(x, dtype=float).reshape(1, -1)
    rows = [matern52_gram(xs, data.states, hp.a_lengthscales[j], hp.a_variances[j])[0]
            * data.controls[:, j] for j in range(hp.control_dim)]
    rows.append(matern52_gram(xs, data.states, hp.b_lengthscales, hp.b_variance)[0])
    return np.array(rows)


def posterior_blocks(model: GPResidualModel, x) -> PosteriorBlocks:
    """Posterior mean and covariance of (a(x*), b(x*)) given the training labels."""
    hp = model.hyperparams
    x = np.asarray(x, dtype=float).reshape(-1)
    if len(x) != hp.state_dim:
        raise ContractViolation(f"query state has dimension {len(x)}, expected {hp.state_dim}")
    m = hp.control_dim
    prior = np.diag(np.append(hp.a_variances, hp.b_variance))
    if model.n_points == 0:
        return PosteriorBlocks(np.zeros(m), 0.0, prior[:m, :m].copy(), np.zeros(m), float(prior[m, m]))
    F = _cross_features(model, x)
    mean = F @ model.alpha
    V = solve_triangular(model.chol, F.T, lower=True)
    cov = prior - V.T @ V
    cov = 0.5 * (cov + cov.T)
    return PosteriorBlocks(a_mean=mean[:m], b_mean=float(mean[m]), cov_a=cov[:m, :m],
                           cov_ab=cov[:m, m].copy(), var_b=float(cov[m, m]))


CLAMP_LIMIT = 1e-8


def posterior_predict(model: GPResidualModel, x, u):
    """Posterior mean and variance of d(x*, u*)."""
    blocks = posterior_blocks(model, x)
    mu = blocks.mean(u)
    var = blocks.variance(u)
    if var < 0:
        scale = max(1.0, composite_kernel(model.hyperparams, x, u, x, u))
        if var < -CLAMP_LIMIT * scale:
            raise ConditioningError(f"posterior variance {var:.3g} is materially negative")
        var = 0.0
    return mu, var


def direct_predict(model: GPResidualModel, x, u):
    """Scalar-GP prediction with k_d on the joined input; reference for the block form."""
    hp, data = model.hyperparams, model.data
    xs = np.asarray(x, dtype=float).reshape(1, -1)
    us = np.atleast_1d(np.asarray(u, dtype=float)).reshape(1, -1)
    prior = composite_kernel(hp, xs[0], us[0], xs[0], us[0])
    if model.n_points == 0:
        return 0.0, prior
    k = composite_gram(hp, xs, us, data.states, data.controls)[0]
    v = solve_triangular(model.chol, k, lower=True)
    return float(k @ model.alpha), float(prior - v @ v)


def stack_datasets(datasets: Sequence[ResidualDataset]) -> ResidualDataset:
    datasets = list(datasets)
    if not datasets:
        raise ContractViolation("nothing to stack")
    return ResidualDataset(np.vstack([d.states for d in datasets]),
                           np.vstack([d.controls for d in datasets]),
                           np.concatenate([d.labels for d in datasets]))
