"""Outer loop of the single-loop bilevel method: per iteration one inner
primal-dual step per training example, one adjoint splitting step, and one
proximal-gradient step on the hyperparameters.  Also provides the
high-precision implicit baseline and CSV iterate logging.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .adjoint import (
    AdjointMatrix,
    AdjointSystem,
    BlockGaussSeidel,
    IdentitySplitting,
    NoSplitting,
    solve_adjoint_cgs,
    splitting_step,
)
from .containers import Grid2, PdpsMetric, PrimalDualState, q_norm
from .inner_solvers import InnerProblemCallbacks, PdpsStepParams, pdps_step, validate_pdps_steps

__all__ = [
    "DriverAbort",
    "MethodDefaults",
    "BilevelProblem",
    "RunConfig",
    "LogRecord",
    "IterateLog",
    "BataState",
    "outer_value",
    "hypergradient",
    "bata_iteration",
    "implicit_solve",
    "relative_errors",
    "run",
]

METHODS = ("pdps-block-gs", "pdps-identity", "implicit")


class DriverAbort(RuntimeError):
    """A step failed mid-run; carries the iteration index and the partial log."""

    def __init__(self, message: str, iteration: int, log: "IterateLog"):
        super().__init__(message)
        self.iteration = iteration
        self.log = log


@dataclass(frozen=True)
class MethodDefaults:
    """Per-problem step lengths and solver caps (overridable via RunConfig)."""

    tau_x: float
    tau_y: float
    omega: float = 1.0
    theta_y: float = 0.1
    theta_x_identity: float = 0.1
    theta_y_identity: float = 1e-3
    sigma_block_gs: float = 1e-4
    sigma_identity: float = 1e-5
    sigma_implicit: float = 7e-4
    inner_steps_implicit: int = 3000
    adjoint_mode_implicit: str = "block_gs"  # "block_gs", "cgs" or "direct"
    adjoint_steps_implicit: int = 200
    adjoint_tol_implicit: float = 1e-4


@dataclass
class BilevelProblem:
    """Everything the driver consumes: per-example inner callbacks and data,
    the coupling operator, outer prox/regulariser, and the adjoint builder.

    The outer fitness is always J(u) = 1/2 sum_i ||x_i - b_i||^2 against the
    stored targets.
    """

    name: str
    n1: int
    n2: int
    n_alpha: int
    alpha_init: np.ndarray
    targets: Sequence[np.ndarray]
    inner: Sequence[InnerProblemCallbacks]
    k_norm_sq: float
    lipschitz_e: Callable[[np.ndarray], float]
    outer_prox: Callable[[np.ndarray, float], np.ndarray]
    outer_reg_value: Callable[[np.ndarray], float]
    build_adjoint_system: Callable[[PrimalDualState, np.ndarray, int], AdjointSystem]
    inner_residual: Callable[[PrimalDualState, np.ndarray, int], float]
    theta_x_inv: Optional[Grid2]
    defaults: MethodDefaults
    mixed_grad_x: Optional[Callable] = None
    mixed_grad_y: Optional[Callable] = None

    @property
    def n_examples(self) -> int:
        return len(self.targets)

    def step_params(self, alpha: np.ndarray, tau_x=None, tau_y=None) -> PdpsStepParams:
        d = self.defaults
        return validate_pdps_steps(
            tau_x if tau_x is not None else d.tau_x,
            tau_y if tau_y is not None else d.tau_y,
            self.lipschitz_e(alpha),
            self.k_norm_sq,
            d.omega,
        )

    def metric(self, K) -> PdpsMetric:
        d = self.defaults
        return PdpsMetric(d.tau_x, d.tau_y, d.omega, K)


@dataclass(frozen=True)
class RunConfig:
    """Outer-loop configuration; unset fields fall back to problem defaults."""

    method: str = "pdps-block-gs"
    sigma: Optional[float] = None
    iters: Optional[int] = None
    budget_seconds: Optional[float] = None
    log_every: int = 1
    seed: int = 0
    tau_x: Optional[float] = None
    tau_y: Optional[float] = None
    theta_y: Optional[float] = None
    theta_x_identity: Optional[float] = None
    theta_y_identity: Optional[float] = None
    inner_steps: Optional[int] = None
    adjoint_steps: Optional[int] = None
    exact_objective_every: int = 0
    alpha_ref: Optional[np.ndarray] = None
    u_ref: Optional[Sequence[PrimalDualState]] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.iters is None and self.budget_seconds is None:
            raise ValueError("either an iteration cap or a CPU-seconds budget is required")
        if self.iters is not None and self.iters < 0:
            raise ValueError("iteration budget must be nonnegative")
        if self.budget_seconds is not None and self.budget_seconds <= 0:
            raise ValueError("CPU budget must be positive")
        if self.log_every <= 0:
            raise ValueError("log_every must be positive")


@dataclass(frozen=True)
class LogRecord:
    iteration: int
    cputime: float
    j_plus_r: float
    alpha_diff: float
    u_diff: float
    e_alpha_rel: float
    e_u_rel: float
    alpha: np.ndarray
    j_exact: float = math.nan
    walltime: float = math.nan  # informational; budgets use CPU time


@dataclass
class IterateLog:
    problem: str
    method: str
    records: list = field(default_factory=list)

    def append(self, rec: LogRecord):
        if self.records:
            last = self.records[-1]
            if rec.iteration <= last.iteration or rec.cputime < last.cputime:
                raise ValueError("log records must advance in iteration and CPU time")
        self.records.append(rec)

    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    @property
    def final_alpha(self) -> np.ndarray:
        return self.records[-1].alpha

    def to_csv(self, path):
        n_alpha = self.records[0].alpha.size if self.records else 0
        header = ["iter", "cputime", "JplusR", "alphaDiff", "u_tilde_diff"] + [
            f"alpha{i + 1}" for i in range(n_alpha)
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in self.records:
                writer.writerow(
                    [r.iteration, f"{r.cputime:.6f}", f"{r.j_plus_r:.12g}",
                     f"{r.alpha_diff:.12g}", f"{r.u_diff:.12g}"]
                    + [f"{a:.12g}" for a in r.alpha]
                )


@dataclass
class BataState:
    u: list
    p: list
    alpha: np.ndarray


# ---------------------------------------------------------------------------
# Objective pieces


def outer_value(problem: BilevelProblem, u: Sequence[PrimalDualState]) -> float:
    """J(u) = 1/2 sum_i ||x_i - b_i||^2."""
    return 0.5 * sum(
        float(np.sum((ui.x.matrix - bi) ** 2)) for ui, bi in zip(u, problem.targets)
    )


def hypergradient(problem: BilevelProblem, u: Sequence[PrimalDualState],
                  p: Sequence[AdjointMatrix]) -> np.ndarray:
    """p grad_u J(u), summed over training examples.

    grad_u J has zero dual part, so only the primal rows of p contribute:
    component a is sum_i <p_i.px[a], x_i - b_i>.
    """
    q = np.zeros(problem.n_alpha)
    for ui, bi, pi in zip(u, problem.targets, p):
        resid = ui.x.matrix - bi
        q += np.einsum("aij,ij->a", pi.px, resid)
    return q


def _scheme_for(problem: BilevelProblem, config: RunConfig):
    d = problem.defaults
    if config.method == "pdps-block-gs":
        if problem.theta_x_inv is None:
            raise ValueError(f"problem {problem.name!r} has no Fourier-diagonal primal block")
        return BlockGaussSeidel(problem.theta_x_inv,
                                config.theta_y if config.theta_y is not None else d.theta_y)
    if config.method == "pdps-identity":
        tx = config.theta_x_identity if config.theta_x_identity is not None else d.theta_x_identity
        ty = config.theta_y_identity if config.theta_y_identity is not None else d.theta_y_identity
        return IdentitySplitting(tx, ty)
    return NoSplitting(d.adjoint_tol_implicit)


def _sigma_for(problem: BilevelProblem, config: RunConfig) -> float:
    if config.sigma is not None:
        return config.sigma
    d = problem.defaults
    return {
        "pdps-block-gs": d.sigma_block_gs,
        "pdps-identity": d.sigma_identity,
        "implicit": d.sigma_implicit,
    }[config.method]


# ---------------------------------------------------------------------------
# Single-loop iteration


def bata_iteration(state: BataState, problem: BilevelProblem, config: RunConfig,
                   scheme=None, sigma: Optional[float] = None) -> BataState:
    """One outer iteration: inner steps, adjoint steps at the new inner
    iterate, then the proximal-gradient update of the hyperparameters."""
    if scheme is None:
        scheme = _scheme_for(problem, config)
    if sigma is None:
        sigma = _sigma_for(problem, config)
    sp = problem.step_params(state.alpha, config.tau_x, config.tau_y)

    u_new = [pdps_step(ui, state.alpha, cb, sp) for ui, cb in zip(state.u, problem.inner)]
    p_new = []
    for i, (ui, pi) in enumerate(zip(u_new, state.p)):
        sys_i = problem.build_adjoint_system(ui, state.alpha, i)
        p_new.append(splitting_step(pi, sys_i, scheme))
    if sigma == 0.0:  # diagnostic mode: hold the hyperparameters fixed
        return BataState(u_new, p_new, state.alpha.copy())
    q = hypergradient(problem, u_new, p_new)
    alpha_new = problem.outer_prox(state.alpha - sigma * q, sigma)
    return BataState(u_new, p_new, alpha_new)


# ---------------------------------------------------------------------------
# High-precision baseline


def implicit_solve(problem: BilevelProblem, alpha: np.ndarray,
                   u0: Optional[Sequence[PrimalDualState]] = None,
                   p0: Optional[Sequence[AdjointMatrix]] = None,
                   inner_steps: Optional[int] = None,
                   inner_tol: float = 1e-9,
                   adjoint_mode: Optional[str] = None,
                   adjoint_steps: Optional[int] = None):
    """Solve the inner problem (many primal-dual steps) and the adjoint
    equation to high precision at fixed alpha.

    Returns (u_list, p_list, converged_flag); hitting an iteration cap flips
    the flag instead of raising.
    """
    d = problem.defaults
    inner_steps = inner_steps if inner_steps is not None else d.inner_steps_implicit
    adjoint_mode = adjoint_mode if adjoint_mode is not None else d.adjoint_mode_implicit
    adjoint_steps = adjoint_steps if adjoint_steps is not None else d.adjoint_steps_implicit
    sp = problem.step_params(alpha)

    converged = True
    u_out, p_out = [], []
    for i in range(problem.n_examples):
        u = u0[i] if u0 is not None else PrimalDualState.zeros(problem.n1, problem.n2)
        check_every = max(1, inner_steps // 20)
        for k in range(inner_steps):
            u = pdps_step(u, alpha, problem.inner[i], sp)
            if (k + 1) % check_every == 0 and problem.inner_residual(u, alpha, i) <= inner_tol:
                break
        else:
            converged = converged and problem.inner_residual(u, alpha, i) <= inner_tol
        u_out.append(u)

        sys_i = problem.build_adjoint_system(u, alpha, i)
        p = p0[i] if p0 is not None else AdjointMatrix.zeros(problem.n_alpha, problem.n1, problem.n2)
        if adjoint_mode == "direct":
            p = splitting_step(p, sys_i, NoSplitting())
        elif adjoint_mode == "cgs":
            p, ok = solve_adjoint_cgs(sys_i, p, tol=d.adjoint_tol_implicit,
                                      maxiter=adjoint_steps)
            converged = converged and ok
        elif adjoint_mode == "block_gs":
            scheme = BlockGaussSeidel(problem.theta_x_inv, d.theta_y)
            for _ in range(adjoint_steps):
                p = splitting_step(p, sys_i, scheme)
        else:
            raise ValueError(f"unknown adjoint mode {adjoint_mode!r}")
        p_out.append(p)
    return u_out, p_out, converged


# ---------------------------------------------------------------------------
# Error metrics


def relative_errors(alpha, u: Sequence[PrimalDualState], alpha_ref,
                    u_ref: Sequence[PrimalDualState], Q: PdpsMetric):
    """(e_alpha, e_u): relative distances to the reference iterates; the inner
    error uses the primal-dual metric, summed over examples in quadrature."""
    ref_norm = float(np.linalg.norm(alpha_ref))
    if ref_norm == 0:
        raise ValueError("reference alpha has zero norm")
    e_alpha = float(np.linalg.norm(alpha_ref - alpha)) / ref_norm
    num = math.sqrt(sum(q_norm(ur - ui, Q) ** 2 for ur, ui in zip(u_ref, u)))
    den = math.sqrt(sum(q_norm(ur, Q) ** 2 for ur in u_ref))
    if den == 0:
        raise ValueError("reference inner iterate has zero norm")
    return e_alpha, num / den


# ---------------------------------------------------------------------------
# Main loop


def _log_state(log: IterateLog, problem: BilevelProblem, config: RunConfig,
               state: BataState, iteration: int, cputime: float, metric: PdpsMetric,
               wall0: float, j_exact: float = math.nan):
    j_plus_r = outer_value(problem, state.u) + problem.outer_reg_value(state.alpha)
    alpha_diff = u_diff = e_a = e_u = math.nan
    if config.alpha_ref is not None:
        alpha_diff = float(np.linalg.norm(config.alpha_ref - state.alpha))
        e_a = alpha_diff / float(np.linalg.norm(config.alpha_ref))
    if config.u_ref is not None:
        u_diff = math.sqrt(
            sum(q_norm(ur - ui, metric) ** 2 for ur, ui in zip(config.u_ref, state.u))
        )
        den = math.sqrt(sum(q_norm(ur, metric) ** 2 for ur in config.u_ref))
        e_u = u_diff / den if den > 0 else math.nan
    log.append(LogRecord(iteration, cputime, j_plus_r, alpha_diff, u_diff, e_a, e_u,
                         state.alpha.copy(), j_exact, time.monotonic() - wall0))


def run(problem: BilevelProblem, config: RunConfig,
        state0: Optional[BataState] = None) -> IterateLog:
    """Iterate until the budget is exhausted, logging every log_every steps.

    The initial inner/adjoint iterates come from a high-precision solve at
    alpha_init unless a starting state is supplied.  Deterministic for a
    fixed config in single-context execution.
    """
    log = IterateLog(problem.name, config.method)
    metric = problem.metric(problem.inner[0].K)
    t0 = time.process_time()
    wall0 = time.monotonic()

    if state0 is None:
        u0, p0, _ = implicit_solve(problem, problem.alpha_init)
        state = BataState(u0, p0, problem.alpha_init.copy())
    else:
        state = state0

    _log_state(log, problem, config, state, 0, time.process_time() - t0, metric, wall0)
    scheme = _scheme_for(problem, config)
    sigma = _sigma_for(problem, config)
    d = problem.defaults

    k = 0
    while True:
        if config.iters is not None and k >= config.iters:
            break
        elapsed = time.process_time() - t0
        if config.budget_seconds is not None and elapsed >= config.budget_seconds:
            break
        try:
            if config.method == "implicit":
                u_new, p_new, _ = implicit_solve(
                    problem, state.alpha, u0=state.u, p0=state.p,
                    inner_steps=config.inner_steps, adjoint_steps=config.adjoint_steps)
                q = hypergradient(problem, u_new, p_new)
                alpha_new = problem.outer_prox(state.alpha - sigma * q, sigma)
                state = BataState(u_new, p_new, alpha_new)
            else:
                state = bata_iteration(state, problem, config, scheme, sigma)
        except Exception as exc:
            raise DriverAbort(f"outer iteration {k + 1} failed: {exc}", k + 1, log) from exc
        k += 1
        if k % config.log_every == 0:
            j_exact = math.nan
            if config.exact_objective_every and k % (config.log_every * config.exact_objective_every) == 0:
                u_ex, _, _ = implicit_solve(problem, state.alpha, u0=state.u, p0=state.p)
                j_exact = outer_value(problem, u_ex) + problem.outer_reg_value(state.alpha)
            _log_state(log, problem, config, state, k, time.process_time() - t0, metric,
                       wall0, j_exact)
    if log.records[-1].iteration != k:
        _log_state(log, problem, config, state, k, time.process_time() - t0, metric, wall0)
    return log
