"""Small dense primal-dual interior-point solver for cone-constrained QPs.

Solves

    minimize    1/2 x^T P x + q^T x
    subject to  G x + s = h,   s in R+^l x SOC(q_dim)
                A x = b

with Nesterov-Todd scaling and a Mehrotra predictor-corrector step. The
problems here have at most a dozen variables, so every Newton system is
assembled and solved densely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import SolverStall

LOOSE_TOL = 1e-8
CENTRALITY = 0.01


@dataclass(frozen=True)
class ConeQP:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray
    b: np.ndarray
    n_linear: int
    soc_dim: int

    def __post_init__(self):
        n = len(self.q)
        if self.P.shape != (n, n) or self.G.shape != (self.n_linear + self.soc_dim, n):
            raise ValueError("inconsistent cone QP dimensions")


@dataclass(frozen=True)
class ConeSolution:
    x: np.ndarray
    s: np.ndarray
    z: np.ndarray
    y: np.ndarray
    objective: float
    gap: float
    iterations: int


# --------------------------------------------------------------------------
# Cone arithmetic on the product R+^l x SOC


class _Cone:
    def __init__(self, n_linear: int, soc_dim: int):
        self.l = n_linear
        self.q = soc_dim
        self.degree = n_linear + (1 if soc_dim else 0)

    def split(self, v):
        return v[: self.l], v[self.l:]

    def identity(self):
        e = np.zeros(self.l + self.q)
        e[: self.l] = 1.0
        if self.q:
            e[self.l] = 1.0
        return e

    def margin(self, v) -> float:
        """Smallest 'eigenvalue' of v; positive iff v is in the interior."""
        lin, soc = self.split(v)
        vals = [np.min(lin)] if self.l else []
        if self.q:
            vals.append(soc[0] - np.linalg.norm(soc[1:]))
        return float(min(vals))

    def centrality(self, s, z) -> float:
        """Smallest pairwise complementarity, s_i z_i on the orthant and det-based on the cone."""
        sl, ss = self.split(s)
        zl, zs = self.split(z)
        vals = list(sl * zl)
        if self.q:
            vals.append(_jordan_norm(ss) * _jordan_norm(zs))
        return float(min(vals))

    def product(self, u, v):
        ul, us = self.split(u)
        vl, vs = self.split(v)
        out = [ul * vl]
        if self.q:
            out.append(np.concatenate([[us @ vs], us[0] * vs[1:] + vs[0] * us[1:]]))
        return np.concatenate(out)

    def divide(self, lam, d):
        """Solve lam o x = d for x."""
        ll, ls = self.split(lam)
        dl, ds = self.split(d)
        out = [dl / ll]
        if self.q:
            l0, l1 = ls[0], ls[1:]
            x0 = (l0 * ds[0] - l1 @ ds[1:]) / _jordan_norm(ls) ** 2
            out.append(np.concatenate([[x0], (ds[1:] - x0 * l1) / l0]))
        return np.concatenate(out)

    def max_step(self, v, dv) -> float:
        """Largest alpha in (0, inf] keeping v + alpha dv in the cone."""
        alpha = np.inf
        vl, vs = self.split(v)
        dl, ds = self.split(dv)
        neg = dl < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-vl[neg] / dl[neg])))
        if self.q:
            # (v0 + a d0)^2 - |v1 + a d1|^2 >= 0 with v0 + a d0 >= 0
            a2 = ds[0] ** 2 - ds[1:] @ ds[1:]
            a1 = 2.0 * (vs[0] * ds[0] - vs[1:] @ ds[1:])
            a0 = vs[0] ** 2 - vs[1:] @ vs[1:]
            roots = []
            if abs(a2) > 1e-300:
                disc = a1 * a1 - 4 * a2 * a0
                if disc >= 0:
                    sq = math.sqrt(disc)
                    roots += [(-a1 - sq) / (2 * a2), (-a1 + sq) / (2 * a2)]
            elif abs(a1) > 1e-300:
                roots.append(-a0 / a1)
            positive = [r for r in roots if r > 0]
            if positive:
                alpha = min(alpha, min(positive))
            if ds[0] < 0:
                alpha = min(alpha, -vs[0] / ds[0])
        return alpha

    def scaling(self, s, z):
        """NT scaling matrix W (symmetric) with W z = W^-1 s = lambda."""
        sl, ss = self.split(s)
        zl, zs = self.split(z)
        n = self.l + self.q
        W = np.zeros((n, n))
        Winv = np.zeros((n, n))
        d = np.sqrt(sl / zl)
        W[: self.l, : self.l] = np.diag(d)
        Winv[: self.l, : self.l] = np.diag(1.0 / d)
        if self.q:
            s_norm = _jordan_norm(ss)
            z_norm = _jordan_norm(zs)
            sb = ss / s_norm
            zb = zs / z_norm
            gamma = math.sqrt(0.5 * (1.0 + sb @ zb))
            w = np.concatenate([[sb[0] + zb[0]], sb[1:] - zb[1:]]) / (2.0 * gamma)
            eta = math.sqrt(s_norm / z_norm)
            w0, w1 = w[0], w[1:]
            block = np.eye(self.q)
            block[0, 0] = w0
            block[0, 1:] = w1
            block[1:, 0] = w1
            block[1:, 1:] += np.outer(w1, w1) / (1.0 + w0)
            inv = block.copy()
            inv[0, 1:] = -w1
            inv[1:, 0] = -w1
            W[self.l:, self.l:] = eta * block
            Winv[self.l:, self.l:] = inv / eta
        return W, Winv


def _jordan_norm(v) -> float:
    """sqrt(v0^2 - |v1|^2), factored to limit cancellation near the cone boundary."""
    r = np.linalg.norm(v[1:])
    return math.sqrt(max((v[0] - r) * (v[0] + r), 1e-300))


# --------------------------------------------------------------------------
# Solver


def solve_cone_qp(prob: ConeQP, max_iter: int = 60, tol: float = 1e-11,
                  feas_tol: float = 1e-9) -> ConeSolution:
    """Primal-dual interior-point solve; raises :class:`SolverStall` at the iteration cap."""
    P, q, G, h, A, b = prob.P, prob.q, prob.G, prob.h, prob.A, prob.b
    cone = _Cone(prob.n_linear, prob.soc_dim)
    n, p, mdim = len(q), len(b), len(h)
    e = cone.identity()

    def kkt_solve(Winv, rx, ry, rz):
        # scaled unknown W dz keeps the lower-right block at -I however
        # unbalanced the scaling gets
        Gs = Winv.T @ G
        K = np.zeros((n + p + mdim, n + p + mdim))
        K[:n, :n] = P
        K[:n, n:n + p] = A.T
        K[n:n + p, :n] = A
        K[:n, n + p:] = Gs.T
        K[n + p:, :n] = Gs
        K[n + p:, n + p:] = -np.eye(mdim)
        sol = _solve(K, np.concatenate([rx, ry, Winv.T @ rz]))
        return sol[:n], sol[n:n + p], Winv @ sol[n + p:]

    # starting point: minimise 1/2 x'Px + q'x + 1/2 |s|^2 subject to the equalities
    x, y, zz = kkt_solve(np.eye(mdim), -q, b, h)
    s = -zz
    z = zz.copy()
    ms = cone.margin(s)
    if ms <= 0:
        s = s + (1.0 - ms) * e
    mz = cone.margin(z)
    if mz <= 0:
        z = z + (1.0 - mz) * e

    best = None
    for it in range(1, max_iter + 1):
        rx = P @ x + q + A.T @ y + G.T @ z
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ z)
        mu = gap / cone.degree
        pobj = 0.5 * x @ P @ x + q @ x
        pres = max(np.linalg.norm(ry) / max(1.0, np.linalg.norm(b), np.linalg.norm(A @ x)),
                   np.linalg.norm(rz) / max(1.0, np.linalg.norm(h), np.linalg.norm(G @ x),
                                            np.linalg.norm(s)))
        dres = np.linalg.norm(rx) / max(1.0, np.linalg.norm(q), np.linalg.norm(P @ x),
                                        np.linalg.norm(G.T @ z))
        rgap = gap / max(1.0, abs(pobj))
        current = ConeSolution(x, s, z, y, float(pobj), gap, it - 1)
        if pres <= feas_tol and dres <= feas_tol and rgap <= tol:
            return current
        score = max(pres, dres, rgap)
        if not np.isfinite([pres, dres, rgap]).all():
            score = np.inf
        if best is None or score < best[0]:
            best = (score, current)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                x, y, z, s = _newton_step(cone, kkt_solve, G, x, y, z, s, rx, ry, rz, mu, e)
        except (np.linalg.LinAlgError, ValueError, ZeroDivisionError):
            break
        if not all(np.all(np.isfinite(v)) for v in (x, y, z, s)):
            break
    # round-off can stop progress just short of the tight tolerances; a nearly
    # converged iterate is still certified to well inside the stated accuracy
    if best is not None and best[0] <= LOOSE_TOL:
        return best[1]
    raise SolverStall(f"no convergence within {max_iter} iterations",
                      iterate=None if best is None else best[1])


def _newton_step(cone, kkt_solve, G, x, y, z, s, rx, ry, rz, mu, e):
    """One Mehrotra predictor-corrector step under NT scaling."""
    W, Winv = cone.scaling(s, z)
    lam = W @ z

    def direction(ds_target):
        # lam o (W dz + W^-1 ds) = ds_target
        t = cone.divide(lam, ds_target)
        dx, dy, dz = kkt_solve(Winv, -rx, -ry, -rz - W.T @ t)
        # from the linearised primal row, so G x + s - h shrinks by exactly (1 - alpha)
        ds = -rz - G @ dx
        return dx, dy, dz, ds

    lam_sq = cone.product(lam, lam)
    dx, dy, dz, ds = direction(-lam_sq)
    alpha = min(1.0, cone.max_step(s, ds), cone.max_step(z, dz))
    sigma = (1.0 - alpha) ** 3
    corr = cone.product(Winv.T @ ds, W @ dz)
    dx, dy, dz, ds = direction(-lam_sq - corr + sigma * mu * e)
    alpha = min(1.0, 0.99 * min(cone.max_step(s, ds), cone.max_step(z, dz)))
    # stay strictly inside and near the central path; without the second test
    # degenerate instances drift onto the boundary and stall
    while alpha > 1e-12:
        s_new, z_new = s + alpha * ds, z + alpha * dz
        if cone.margin(s_new) > 0 and cone.margin(z_new) > 0 and \
                cone.centrality(s_new, z_new) >= CENTRALITY * (s_new @ z_new) / cone.degree:
            break
        alpha *= 0.8
    return x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds


def _solve(K, rhs, refinements: int = 3):
    """Dense solve with a few rounds of iterative refinement."""
    try:
        lu = lu_factor(K)
        sol = lu_solve(lu, rhs)
        for _ in range(refinements):
            sol = sol + lu_solve(lu, rhs - K @ sol)
        return sol
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(K, rhs, rcond=None)[0]
