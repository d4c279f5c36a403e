"""Proximal maps and derivatives of the smoothed dual TV regulariser, the two
outer regularisers (kernel-sum penalty and weighted sparsity budget), and the
Fourier-diagonal data-term prox for masked k-space measurements.

Dual fields are handled as (..., 2) arrays of pixelwise 2-vectors; all maps
are vectorised over the leading axes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .linops import MaskParams, fft2_adjoint, fft2_apply, mask_row_weights

__all__ = [
    "SmoothedTVConjParams",
    "MriOuterRegParams",
    "DeblurOuterRegParams",
    "TieBreakError",
    "smoothed_tv_conj_value",
    "prox_smoothed_tv_conj",
    "grad_smoothed_tv_conj",
    "hess_smoothed_tv_conj",
    "prox_deblur_outer",
    "prox_mri_outer",
    "prox_mri_data",
]

MAX_TIE_ENUMERATION = 2**12


class TieBreakError(RuntimeError):
    """No valid active set found within the tie-break enumeration budget."""


@dataclass(frozen=True)
class SmoothedTVConjParams:
    """Parameters of the C^2, delta-strongly-convex dual TV approximation.

    Pixelwise value: max(0, (|y_j| - alpha0)^3 / (3 eps)) + delta/2 |y_j|^2.
    """

    epsilon: float
    delta: float
    alpha0: float

    def __post_init__(self):
        if self.epsilon <= 0 or self.delta <= 0:
            raise ValueError("epsilon and delta must be positive")
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be nonnegative")


@dataclass(frozen=True)
class MriOuterRegParams:
    """Weighted L1 with a hard budget: beta * w'a + indicator(w'a <= M, a >= 0)."""

    w: np.ndarray
    M: float
    beta: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).ravel()
        if np.any(w <= 0):
            raise ValueError("all group weights must be positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"group weights must sum to 1, got {w.sum()!r}")
        if self.M <= 0 or self.beta <= 0:
            raise ValueError("M and beta must be positive")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class DeblurOuterRegParams:
    """Kernel-sum penalty beta*(a2 + a3 + a4 - 1)^2 + indicator(a1 >= 0)."""

    beta: float

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


# ---------------------------------------------------------------------------
# Smoothed dual TV: value, gradient, Hessian, prox


def _pixel_norms(y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(y), axis=-1))


def smoothed_tv_conj_value(y: np.ndarray, p: SmoothedTVConjParams) -> float:
    """Sum over pixels of the smoothed conjugate regulariser."""
    n = _pixel_norms(y)
    hinge = np.maximum(0.0, n - p.alpha0)
    return float(np.sum(hinge**3) / (3.0 * p.epsilon) + 0.5 * p.delta * np.sum(n**2))


def prox_smoothed_tv_conj(v: np.ndarray, tau: float, p: SmoothedTVConjParams) -> np.ndarray:
    """Pixelwise prox of tau * g* for the smoothed conjugate regulariser.

    Inside the scaled ball |v_j| < (1 + tau delta) alpha0 the map is a plain
    shrinkage; outside, the output is t*v_j with t the positive root of the
    scalar quadratic coming from the optimality condition.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = _pixel_norms(v)
    # n == 0 is routed through the shrinkage branch: prox(0) = 0 on both sides.
    inner = (n < (1.0 + tau * p.delta) * p.alpha0) | (n == 0.0)
    out = v / (1.0 + tau * p.delta)

    if not np.all(inner):
        nv = n[~inner]
        a = 1.0 / tau + p.delta
        # |v| t^2 + (eps*a - 2 alpha0) t + alpha0^2/|v| - eps/tau = 0
        disc = (p.epsilon * a) ** 2 + 4.0 * p.epsilon * (nv / tau - a * p.alpha0)
        disc = np.maximum(disc, 0.0)  # cancellation guard near the branch boundary
        t = (2.0 * p.alpha0 - p.epsilon * a + np.sqrt(disc)) / (2.0 * nv)
        out[~inner] = t[..., None] * v[~inner]
    return out


def grad_smoothed_tv_conj(y: np.ndarray, p: SmoothedTVConjParams) -> np.ndarray:
    """Pixelwise gradient: delta*y_j plus the cubic hinge term outside the ball."""
    n = _pixel_norms(y)
    out = p.delta * y.astype(float, copy=True)
    outside = n >= p.alpha0
    if np.any(outside):
        n_out = n[outside]
        safe = np.where(n_out > 0, n_out, 1.0)
        coef = (n_out - p.alpha0) ** 2 / (p.epsilon * safe)
        out[outside] += coef[..., None] * y[outside]
    return out


def hess_smoothed_tv_conj(y: np.ndarray, p: SmoothedTVConjParams) -> np.ndarray:
    """Pixelwise 2x2 Hessian blocks, shape (..., 2, 2).

    delta*I inside the ball; outside, delta*I plus the rank-structured hinge
    curvature.  Each block is symmetric and positive definite for delta > 0.
    """
    y = np.asarray(y, dtype=float)
    n = _pixel_norms(y)
    eye = np.eye(2)
    out = np.broadcast_to(p.delta * eye, y.shape[:-1] + (2, 2)).copy()
    outside = n >= p.alpha0
    if np.any(outside):
        yo = y[outside]
        no = n[outside]
        safe = np.where(no > 0, no, 1.0)
        yhat = yo / safe[..., None]
        proj = yhat[..., :, None] * yhat[..., None, :]
        perp = eye - proj
        h = no - p.alpha0
        out[outside] += (
            (h**2 / (p.epsilon * safe))[..., None, None] * perp
            + (2.0 * h / p.epsilon)[..., None, None] * proj
        )
    return out


# ---------------------------------------------------------------------------
# Outer prox for the deconvolution parameters


def prox_deblur_outer(a_bar: np.ndarray, sigma: float, p: DeblurOuterRegParams) -> np.ndarray:
    """Prox of sigma * [beta*(a2+a3+a4-1)^2 + indicator(a1 >= 0)] on R^4.

    Components 2..4 solve (I + 2 sigma beta 11') a = a_bar + 2 sigma beta 1,
    inverted in closed form through the rank-1 structure.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    a_bar = np.asarray(a_bar, dtype=float).ravel()
    if a_bar.size != 4:
        raise ValueError(f"expected a 4-vector, got length {a_bar.size}")
    s = 2.0 * sigma * p.beta
    d = a_bar[1:] + s
    tail = d - s * d.sum() / (1.0 + 3.0 * s)
    return np.concatenate(([max(0.0, a_bar[0])], tail))


# ---------------------------------------------------------------------------
# Outer prox for the MRI sampling-budget regulariser


def _mri_candidate(a_bar, w, M, taubeta, include_mask):
    """lambda-tilde and validity for a given active set (boolean mask)."""
    if include_mask.any():
        wi = w[include_mask]
        lam = max((wi @ a_bar[include_mask] - M) / (wi @ wi), taubeta)
    else:
        lam = taubeta
    ratios = a_bar / w
    ok = np.all(ratios[~include_mask] <= lam) and np.all(ratios[include_mask] >= lam)
    return lam, bool(ok)


def prox_mri_outer(a_bar: np.ndarray, tau: float, p: MriOuterRegParams) -> np.ndarray:
    """Prox of tau * [beta w'a + indicator(w'a <= M) + indicator(a >= 0)].

    Output is max(0, a_bar - w*lambda) where lambda = max((w_I'a_I - M)/|w_I|^2,
    tau*beta) for an active set I located by scanning the sorted ratios
    a_bar_i / w_i.  Ties between equal ratios with unequal weights are broken
    by enumerating subset assignments of the tied indices.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    a_bar = np.asarray(a_bar, dtype=float).ravel()
    w = p.w
    if a_bar.size != w.size:
        raise ValueError(f"expected {w.size} components, got {a_bar.size}")
    taubeta = tau * p.beta
    ratios = a_bar / w
    order = np.argsort(-ratios, kind="stable")

    for k in range(a_bar.size + 1):
        mask = np.zeros(a_bar.size, dtype=bool)
        mask[order[:k]] = True
        lam, ok = _mri_candidate(a_bar, w, p.M, taubeta, mask)
        if ok:
            return np.maximum(0.0, a_bar - w * lam)

    # Plain scan can only fail on ties between indices with unequal weights.
    sorted_ratios = ratios[order]
    for k in range(a_bar.size):
        tied = np.isclose(ratios, sorted_ratios[k], rtol=1e-12, atol=0.0)
        idx = np.flatnonzero(tied)
        if idx.size < 2:
            continue
        if 2 ** idx.size > MAX_TIE_ENUMERATION:
            raise TieBreakError(f"{idx.size} tied components exceed the enumeration budget")
        base = np.zeros(a_bar.size, dtype=bool)
        base[ratios > sorted_ratios[k]] = True
        for subset in itertools.product((False, True), repeat=idx.size):
            mask = base.copy()
            mask[idx] = subset
            lam, ok = _mri_candidate(a_bar, w, p.M, taubeta, mask)
            if ok:
                return np.maximum(0.0, a_bar - w * lam)
    raise TieBreakError("no valid dividing index found; this should be unreachable")


# ---------------------------------------------------------------------------
# Fourier-diagonal data-term prox for masked k-space measurements


def prox_mri_data(v: np.ndarray, tau: float, m: MaskParams, z: np.ndarray) -> np.ndarray:
    """Prox of tau/2 * ||Z(Fx - z)||^2, solved bin-by-bin in Fourier space.

    x = F*((Fv + tau Z^2 z) / (1 + tau Z^2)); the vanishing imaginary residue
    of the inverse transform is discarded.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    row_w2 = mask_row_weights(m) ** 2
    denom = 1.0 + tau * row_w2[:, None]
    vhat = fft2_apply(v)
    xhat = (vhat + tau * row_w2[:, None] * z) / denom
    return fft2_adjoint(xhat)
