"""Single steps of the inner algorithms: preconditioned forward-backward and
primal-dual proximal splitting with an extra forward step, plus validation of
the joint step-length condition tau_x*L/2 + tau_x*tau_y*||K||^2 <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .containers import DualField, Grid2, PrimalDualState
from .linops import LinearOperator

__all__ = [
    "StepLengthViolation",
    "PdpsStepParams",
    "InnerProblemCallbacks",
    "validate_pdps_steps",
    "pdps_step",
    "fb_step",
]


class StepLengthViolation(ValueError):
    """Step lengths fail the convergence condition; the message names the slack."""


@dataclass(frozen=True)
class PdpsStepParams:
    """Validated primal/dual step lengths.

    Construct through :func:`validate_pdps_steps`, which asserts
    tau_x*L/2 + tau_x*tau_y*k_norm_sq_bound <= 1.
    """

    tau_x: float
    tau_y: float
    omega: float
    lipschitz_e: float
    k_norm_sq_bound: float

    def __post_init__(self):
        if not (self.tau_x > 0 and self.tau_y > 0 and self.omega > 0):
            raise StepLengthViolation("tau_x, tau_y and omega must be positive")
        if self.lipschitz_e < 0 or self.k_norm_sq_bound < 0:
            raise StepLengthViolation("Lipschitz and norm bounds must be nonnegative")
        lhs = self.tau_x * self.lipschitz_e / 2.0 + self.tau_x * self.tau_y * self.k_norm_sq_bound
        if lhs > 1.0:
            raise StepLengthViolation(
                f"step condition violated: tau_x*L/2 + tau_x*tau_y*||K||^2 = {lhs:.6f} "
                f"exceeds 1 by {lhs - 1.0:.6f}"
            )


def validate_pdps_steps(
    tau_x: float, tau_y: float, lipschitz_e: float, k_norm_sq: float, omega: float = 1.0
) -> PdpsStepParams:
    """Accept the step lengths iff tau_x*L/2 + tau_x*tau_y*||K||^2 <= 1."""
    return PdpsStepParams(tau_x, tau_y, omega, lipschitz_e, k_norm_sq)


@dataclass(frozen=True)
class InnerProblemCallbacks:
    """Problem pieces consumed by one PDPS step.

    prox_f0(x_arr, tau, alpha) and prox_g_conj(y_arr, tau, alpha) act on grid
    arrays ((n1, n2) and (n1, n2, 2)); grad_e(x_arr, alpha) returns an
    (n1, n2) gradient.  K maps images to dual fields.
    """

    prox_f0: Callable
    grad_e: Callable
    prox_g_conj: Callable
    K: LinearOperator


def pdps_step(
    u: PrimalDualState,
    alpha: np.ndarray,
    cb: InnerProblemCallbacks,
    sp: PdpsStepParams,
) -> PrimalDualState:
    """One primal-dual step with a forward step on the smooth part e.

    x+ = prox_{tau_x f0}(x - tau_x (K* y + grad e(x)))
    y+ = prox_{tau_y g*}(y + tau_y K((1 + omega) x+ - omega x))

    Applies each prox once and K, K* once each.
    """
    x = u.x.matrix
    y = u.y.field
    x_new = cb.prox_f0(x - sp.tau_x * (cb.K.adjoint(y) + cb.grad_e(x, alpha)), sp.tau_x, alpha)
    y_arg = y + sp.tau_y * cb.K.apply((1.0 + sp.omega) * x_new - sp.omega * x)
    y_new = cb.prox_g_conj(y_arg, sp.tau_y, alpha)
    n1, n2 = u.shape
    return PrimalDualState(Grid2(n1, n2, x_new.ravel()), DualField(n1, n2, y_new.ravel()))


def fb_step(
    u: Grid2,
    alpha: np.ndarray,
    grad_f: Callable,
    prox_g: Callable,
    tau: float,
    lipschitz_f: float | None = None,
) -> Grid2:
    """One forward-backward step u+ = prox_{tau g}(u - tau grad f(u)).

    When a Lipschitz bound for grad f is supplied, tau*L <= 2 is enforced.
    """
    if tau <= 0:
        raise StepLengthViolation("tau must be positive")
    if lipschitz_f is not None and tau * lipschitz_f > 2.0:
        raise StepLengthViolation(
            f"forward-backward step condition violated: tau*L = {tau * lipschitz_f:.6f} > 2"
        )
    x = u.matrix
    x_new = prox_g(x - tau * grad_f(x, alpha), tau, alpha)
    return Grid2(u.n1, u.n2, x_new.ravel())
