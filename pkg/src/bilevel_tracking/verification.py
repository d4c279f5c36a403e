"""Independent oracles and property monitors: brute-force prox minimisation,
finite-difference hypergradients, tracking-ratio diagnostics, and the
randomized three-point monotonicity check for strongly convex quadratics.

None of these run on the production path; they exist to validate formulas
against slower, structurally different computations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .adjoint import AdjointMatrix
from .containers import PdpsMetric, q_norm
from .driver import BilevelProblem, implicit_solve, outer_value

__all__ = [
    "OracleReport",
    "project_box_halfspace",
    "projected_gradient_minimize",
    "brute_prox_oracle",
    "fd_hypergradient",
    "three_point_monotonicity_check",
    "tracking_monitor",
    "q_inv_operator_norm",
]


@dataclass(frozen=True)
class OracleReport:
    name: str
    max_rel_error: float
    instances: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def as_csv_row(self) -> str:
        return f"{self.name},{self.max_rel_error:.3e},{self.instances},{int(self.passed)},{self.tolerance:.1e}"


# ---------------------------------------------------------------------------
# Exact projection onto {a >= 0} intersect {w'a <= M} by active-set enumeration


def project_box_halfspace(v: np.ndarray, w: Optional[np.ndarray] = None,
                          M: Optional[float] = None) -> np.ndarray:
    """Exact Euclidean projection onto the orthant, optionally cut by w'a <= M.

    Enumerates active sets (small dimensions only): for every choice of
    coordinates pinned to zero, the equality-constrained minimisers are
    closed-form; the projection is the closest feasible candidate.  This is
    structurally independent of the sorting-based prox formulas it checks.
    """
    v = np.asarray(v, dtype=float).ravel()
    n = v.size
    best, best_d = np.zeros(n), np.inf  # the origin is always feasible (M > 0)
    for zero_set in itertools.product((False, True), repeat=n):
        free = ~np.array(zero_set)
        candidates = [np.where(free, v, 0.0)]
        if w is not None and free.any():
            wf = w[free]
            lam = (wf @ v[free] - M) / (wf @ wf)
            candidates.append(np.where(free, v - lam * w, 0.0))
        for c in candidates:
            if np.any(c < -1e-12):
                continue
            if w is not None and w @ c > M + 1e-10:
                continue
            d = float(np.sum((c - v) ** 2))
            if d < best_d:
                best_d, best = d, np.clip(c, 0.0, None)
    return best


def projected_gradient_minimize(v, grad_smooth: Callable, project: Callable,
                                lipschitz: float, iters: int = 100_000) -> np.ndarray:
    """Minimise 1/2||z - v||^2 + (smooth part) over a convex set by projected
    gradient with a safe constant step; linear convergence for our strongly
    convex objectives makes the large iteration budget a formality."""
    step = 1.0 / (1.0 + lipschitz)
    z = project(np.array(v, dtype=float))
    for _ in range(iters):
        g = (z - v) + grad_smooth(z)
        z_new = project(z - step * g)
        if np.max(np.abs(z_new - z)) < 1e-15:
            return z_new
        z = z_new
    return z


def brute_prox_oracle(prox_callback: Callable, grad_smooth: Callable,
                      project: Callable, lipschitz: float, dim: int,
                      trials: int, seed: int = 0, tolerance: float = 1e-6,
                      scale: float = 1.0, name: str = "prox",
                      iters: int = 100_000) -> OracleReport:
    """Compare a closed-form prox against brute-force minimisation of
    1/2||z - v||^2 + tau R(z) on random inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        v = scale * rng.standard_normal(dim)
        ref = projected_gradient_minimize(v, grad_smooth, project, lipschitz, iters)
        got = prox_callback(v)
        err = float(np.linalg.norm(got - ref)) / max(1.0, float(np.linalg.norm(ref)))
        worst = max(worst, err)
    return OracleReport(name, worst, trials, tolerance)


# ---------------------------------------------------------------------------
# Finite-difference hypergradient


def fd_hypergradient(problem: BilevelProblem, alpha: np.ndarray, h: float = 1e-5,
                     inner_steps: Optional[int] = None, inner_tol: Optional[float] = None,
                     warm_start=None):
    """Central differences of a -> J(S_u(a)), each solve via implicit_solve.

    ``warm_start`` (a solved inner state at alpha) drastically shortens the
    perturbed solves.  Returns (gradient_estimate, trustworthy_flag); the
    flag drops when any inner solve missed its tolerance.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    tol = inner_tol if inner_tol is not None else h * h
    grad = np.zeros(problem.n_alpha)
    ok = True
    for a in range(problem.n_alpha):
        vals = []
        for s in (+1.0, -1.0):
            alpha_s = alpha.copy()
            alpha_s[a] += s * h
            u, _, conv = implicit_solve(problem, alpha_s, u0=warm_start,
                                        inner_steps=inner_steps, inner_tol=tol)
            ok = ok and conv
            vals.append(outer_value(problem, u))
        grad[a] = (vals[0] - vals[1]) / (2.0 * h)
    return grad, ok


# ---------------------------------------------------------------------------
# Three-point monotonicity of strongly convex quadratics


def three_point_monotonicity_check(trials: int = 10_000, seed: int = 0,
                                   max_dim: int = 10, slack: float = 1e-12) -> OracleReport:
    """For random quadratics F = 1/2 x'Hx with gamma*I <= H <= L*I, verify

        <DF(z) - DF(x*), x - x*> >= (gamma - tL)/2 (||x - x*||^2 + ||z - x*||^2)
                                     - L/(4t) ||x - z||^2

    over random points and t > 0.  Reports the worst violation margin.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_dim + 1))
        gamma = float(rng.uniform(0.05, 2.0))
        big_l = gamma + float(rng.uniform(0.0, 4.0))
        eig = np.concatenate(([gamma, big_l], rng.uniform(gamma, big_l, size=max(0, n - 2))))[:n]
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        H = (Q * eig) @ Q.T
        x, z, xhat = rng.standard_normal((3, n))
        t = float(rng.uniform(1e-3, 3.0))
        lhs = float((H @ (z - xhat)) @ (x - xhat))
        rhs = (
            0.5 * (gamma - t * big_l) * (np.sum((x - xhat) ** 2) + np.sum((z - xhat) ** 2))
            - big_l / (4.0 * t) * np.sum((x - z) ** 2)
        )
        worst = max(worst, rhs - lhs)
    return OracleReport("three_point_monotonicity", worst, trials, slack)


# ---------------------------------------------------------------------------
# Tracking diagnostics


def q_inv_operator_norm(p: AdjointMatrix, Q_dense: np.ndarray) -> float:
    """||p||_{Q^{-1}} = largest singular value of P Q^{-1/2} (desk scale only)."""
    rows = p.flat_rows()
    w, V = scipy.linalg.eigh(Q_dense)
    w = np.maximum(w, 1e-14)
    q_inv_half = (V / np.sqrt(w)) @ V.T
    return float(np.linalg.norm(rows @ q_inv_half, ord=2))


def dense_metric_matrix(metric: PdpsMetric, n1: int, n2: int) -> np.ndarray:
    """Assemble Q = [[I/tau_x, -K*], [-K, I/(omega tau_y)]] densely."""
    npix = n1 * n2
    dim = 3 * npix
    Q = np.zeros((dim, dim))
    Q[:npix, :npix] = np.eye(npix) / metric.tau_x
    Q[npix:, npix:] = np.eye(2 * npix) / (metric.omega * metric.tau_y)
    Kmat = np.zeros((2 * npix, npix))
    for j in range(npix):
        e = np.zeros(npix)
        e[j] = 1.0
        Kmat[:, j] = metric.K.apply(e.reshape(n1, n2)).ravel()
    Q[:npix, npix:] = -Kmat.T
    Q[npix:, :npix] = -Kmat
    return Q


def tracking_monitor(problem: BilevelProblem, states: Sequence, metric: PdpsMetric,
                     inner_steps: int = 20_000, inner_tol: float = 1e-11):
    """Empirical inner/adjoint tracking ratios at checkpointed iterates.

    ``states`` is a sequence of (u_list, p_list, alpha, alpha_prev) snapshots
    from consecutive outer iterations; each checkpoint triggers a
    high-precision reference solve.  Returns a list of dicts with the inner
    ratio ||u+ - S_u(a)||_Q / (||u - S_u(a_prev)||_Q + ||a - a_prev||) and
    the adjoint analogue in the Q^{-1} operator norm.
    """
    Q_dense = dense_metric_matrix(metric, problem.n1, problem.n2)
    refs = {}

    def reference(alpha):
        key = alpha.tobytes()
        if key not in refs:
            refs[key] = implicit_solve(problem, alpha, inner_steps=inner_steps,
                                       inner_tol=inner_tol, adjoint_mode="direct")
        return refs[key]

    out = []
    for k in range(1, len(states)):
        u_prev, p_prev, alpha_prev, alpha_prev2 = states[k - 1]
        u_new, p_new, alpha, _ = states[k]
        u_ref, p_ref, _ = reference(alpha_prev)
        u_ref_prev, p_ref_prev, _ = reference(alpha_prev2)
        num_u = math.sqrt(sum(q_norm(un - ur, metric) ** 2 for un, ur in zip(u_new, u_ref)))
        den_u = math.sqrt(sum(q_norm(up - ur, metric) ** 2 for up, ur in zip(u_prev, u_ref_prev)))
        dalpha = float(np.linalg.norm(alpha_prev - alpha_prev2))
        num_p = sum(q_inv_operator_norm(
            AdjointMatrix(pn.px - pr.px, pn.py - pr.py), Q_dense)
            for pn, pr in zip(p_new, p_ref))
        den_p = sum(q_inv_operator_norm(
            AdjointMatrix(pp.px - pr.px, pp.py - pr.py), Q_dense)
            for pp, pr in zip(p_prev, p_ref_prev))
        out.append({
            "step": k,
            "inner_ratio": num_u / max(den_u + dalpha, 1e-300),
            "adjoint_ratio": num_p / max(den_p + dalpha, 1e-300),
            "inner_error": num_u,
            "adjoint_error": num_p,
            "alpha_step": dalpha,
        })
    return out
