"""Structured linear operators: unitary 2-D FFT, backward differences with
Dirichlet boundary, parametrised small-stencil convolution, k-space line
masks, and small-angle image rotation for data simulation.

Operators act on plain ndarrays in grid shape: images are (..., n1, n2) and
dual fields are (..., n1, n2, 2); leading axes are broadcast, so the same
handles serve single images and stacked adjoint rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .containers import DimensionMismatch

__all__ = [
    "LinearOperator",
    "KernelParams",
    "MaskParams",
    "fft2_apply",
    "fft2_adjoint",
    "diff_apply",
    "diff_adjoint",
    "diff_operator",
    "zero_operator",
    "conv_kernel_array",
    "conv_build",
    "conv_param_derivative",
    "conv_multiplier",
    "build_line_map",
    "mask_apply",
    "mask_row_weights",
    "rotate",
    "power_iteration_norm",
    "adjoint_probe_error",
]

DIFF_NORM_SQ_BOUND = 8.0  # classical bound on the squared norm of the difference operator


@dataclass(frozen=True)
class LinearOperator:
    """A linear map given by matching apply/adjoint callbacks.

    ``norm_bound`` is an upper bound on the operator norm, used by step
    length validation.  ``in_shape`` is the grid the operator expects.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    norm_bound: float
    in_shape: tuple


# ---------------------------------------------------------------------------
# Fourier transform (unitary normalisation)


def fft2_apply(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D FFT of a real image; ||Fx|| = ||x||."""
    return np.fft.fft2(x, norm="ortho", axes=(-2, -1))


def fft2_adjoint(z: np.ndarray) -> np.ndarray:
    """Adjoint (= inverse) of the unitary FFT, restricted to real output."""
    return np.fft.ifft2(z, norm="ortho", axes=(-2, -1)).real


# ---------------------------------------------------------------------------
# Backward differences with Dirichlet boundary


def diff_apply(x: np.ndarray) -> np.ndarray:
    """Pixelwise (horizontal, vertical) backward differences.

    Dirichlet boundary: values outside the grid are zero, so the first
    row/column keep their own value as the difference.
    Output shape (..., n1, n2, 2); component 0 differences along columns
    (horizontal direction), component 1 along rows.
    """
    out = np.empty(x.shape + (2,), dtype=float)
    out[..., 0] = x
    out[..., 1:, 0] -= x[..., :-1]
    out[..., 1] = x
    out[..., 1:, :, 1] -= x[..., :-1, :]
    return out


def diff_adjoint(y: np.ndarray) -> np.ndarray:
    """Adjoint of ``diff_apply`` (a negative divergence)."""
    h = y[..., 0]
    v = y[..., 1]
    out = h.copy()
    out[..., :-1] -= h[..., 1:]
    out += v
    out[..., :-1, :] -= v[..., 1:, :]
    return out


def diff_operator(n1: int, n2: int) -> LinearOperator:
    return LinearOperator(diff_apply, diff_adjoint, float(np.sqrt(DIFF_NORM_SQ_BOUND)), (n1, n2))


def zero_operator(n1: int, n2: int) -> LinearOperator:
    """The zero map from images to dual fields (decoupled primal/dual)."""

    def apply(x):
        return np.zeros(x.shape + (2,))

    def adjoint(y):
        return np.zeros(y.shape[:-1])

    return LinearOperator(apply, adjoint, 0.0, (n1, n2))


# ---------------------------------------------------------------------------
# Parametrised convolution on a 5x5 stencil


@dataclass(frozen=True)
class KernelParams:
    """Weights of the three stencil groups: centre, edge-adjacent, diagonal.

    The remaining cells of the 5x5 stencil, including the four far corners,
    are zero.
    """

    alpha2: float
    alpha3: float
    alpha4: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.alpha2, self.alpha3, self.alpha4])):
            raise ValueError("kernel weights must be finite")


# Offsets of each stencil group relative to the centre cell.
_GROUP_OFFSETS = {
    2: [(0, 0)],
    3: [(-1, 0), (1, 0), (0, -1), (0, 1)],
    4: [(-1, -1), (-1, 1), (1, -1), (1, 1)],
}


def conv_kernel_array(k: KernelParams) -> np.ndarray:
    """5x5 stencil array with groups filled per their weights."""
    arr = np.zeros((5, 5))
    for j, w in ((2, k.alpha2), (3, k.alpha3), (4, k.alpha4)):
        for dr, dc in _GROUP_OFFSETS[j]:
            arr[2 + dr, 2 + dc] = w
    return arr


def _embed_stencil(stencil: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """Place a (2m+1)-sized stencil on the periodic grid, centre at (0, 0)."""
    m = stencil.shape[0] // 2
    if n1 < stencil.shape[0] or n2 < stencil.shape[1]:
        raise DimensionMismatch(f"grid {n1}x{n2} smaller than the stencil")
    big = np.zeros((n1, n2))
    big[: 2 * m + 1, : 2 * m + 1] = stencil
    return np.roll(np.roll(big, -m, axis=0), -m, axis=1)


def conv_multiplier(k: KernelParams, n1: int, n2: int) -> np.ndarray:
    """Fourier multiplier of the periodic convolution (complex, (n1, n2)).

    Scaled so the operator in image space is plain kernel summation:
    A x = F* diag(mult) F x with mult = sqrt(n1 n2) * F(embedded kernel).
    """
    emb = _embed_stencil(conv_kernel_array(k), n1, n2)
    return np.fft.fft2(emb)  # unnormalised fft == sqrt(n1 n2) * unitary fft


def _multiplier_operator(mult: np.ndarray, norm_bound: float) -> LinearOperator:
    n1, n2 = mult.shape

    def apply(x):
        return np.fft.ifft2(mult * np.fft.fft2(x, axes=(-2, -1)), axes=(-2, -1)).real

    def adjoint(x):
        return np.fft.ifft2(np.conj(mult) * np.fft.fft2(x, axes=(-2, -1)), axes=(-2, -1)).real

    return LinearOperator(apply, adjoint, norm_bound, (n1, n2))


def conv_build(k: KernelParams, n1: int, n2: int) -> LinearOperator:
    """Periodic-boundary convolution by the parametrised 5x5 stencil.

    Realised by Fourier multiplication, so it diagonalises under the FFT;
    the adjoint uses the conjugate multiplier.
    """
    mult = conv_multiplier(k, n1, n2)
    bound = abs(k.alpha2) + 4.0 * abs(k.alpha3) + 4.0 * abs(k.alpha4)
    return _multiplier_operator(mult, bound)


def conv_param_derivative(j: int, n1: int, n2: int) -> LinearOperator:
    """d A_alpha / d alpha_j: convolution with the indicator stencil of group j."""
    if j not in _GROUP_OFFSETS:
        raise ValueError(f"kernel group index must be one of 2, 3, 4, got {j}")
    params = KernelParams(*(1.0 if g == j else 0.0 for g in (2, 3, 4)))
    mult = conv_multiplier(params, n1, n2)
    return _multiplier_operator(mult, float(len(_GROUP_OFFSETS[j])))


# ---------------------------------------------------------------------------
# k-space line masks


@dataclass(frozen=True)
class MaskParams:
    """Per-group nonnegative line weights and the row -> group assignment.

    ``line_map[r]`` is the group of image row r (a k-space line); the
    assignment is symmetric about the zero-frequency line.
    """

    weights: np.ndarray
    line_map: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        lm = np.asarray(self.line_map, dtype=int).ravel()
        if np.any(w < 0):
            raise ValueError("mask weights must be nonnegative")
        if lm.min() < 0 or lm.max() >= w.size:
            raise DimensionMismatch(
                f"line map references group {lm.max()} but only {w.size} weights given"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "line_map", lm)

    @property
    def n_groups(self) -> int:
        return self.weights.size


def build_line_map(n1: int, n_groups: int) -> np.ndarray:
    """Assign each of n1 rows to one of n_groups contiguous |frequency| bands.

    Rows follow the unshifted FFT layout (DC at row 0); rows r and n1 - r
    carry the same |frequency| and land in the same group, so the assignment
    is symmetric about the zero-frequency line.  Group 0 holds the lowest
    frequencies.
    """
    if n_groups <= 0 or n_groups > n1 // 2 + 1:
        raise ValueError(f"cannot split {n1} rows into {n_groups} symmetric groups")
    freqs = np.fft.fftfreq(n1, d=1.0 / n1).astype(int)
    absf = np.abs(freqs)
    n_levels = n1 // 2 + 1
    groups = np.minimum((absf * n_groups) // n_levels, n_groups - 1)
    return groups.astype(int)


def mask_row_weights(m: MaskParams) -> np.ndarray:
    """Length-n1 vector of per-row weights alpha[line_map[r]]."""
    return m.weights[m.line_map]


def mask_apply(m: MaskParams, z: np.ndarray) -> np.ndarray:
    """Scale row r of the k-space field z by weights[line_map[r]]."""
    row_w = mask_row_weights(m)
    if z.shape[-2] != row_w.size:
        raise DimensionMismatch(
            f"field has {z.shape[-2]} rows but the line map covers {row_w.size}"
        )
    return z * row_w[..., :, None]


# ---------------------------------------------------------------------------
# Rotation for data simulation


def rotate(x: np.ndarray, theta_degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre, clockwise for theta > 0.

    Samples falling outside the domain take the value 0.  Intended for the
    small angles used in data simulation.
    """
    if theta_degrees == 0.0:
        return x.copy()
    n1, n2 = x.shape
    t = np.deg2rad(theta_degrees)
    c0, c1 = (n1 - 1) / 2.0, (n2 - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(n1) - c0, np.arange(n2) - c1, indexing="ij")
    # Output pixel (r, c) samples the input at the point rotated by -theta
    # (clockwise output rotation pulls from counterclockwise source points).
    src_r = np.cos(t) * rows - np.sin(t) * cols + c0
    src_c = np.sin(t) * rows + np.cos(t) * cols + c1
    return ndimage.map_coordinates(x, [src_r, src_c], order=1, mode="constant", cval=0.0)


# ---------------------------------------------------------------------------
# Probe utilities


def power_iteration_norm(apply, adjoint, shape, iters: int = 50, seed: int = 0) -> float:
    """Estimate ||A||^2 = largest eigenvalue of A*A by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = adjoint(apply(v))
        lam = float(np.linalg.norm(w.ravel()))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def adjoint_probe_error(op: LinearOperator, n_probes: int = 20, seed: int = 0) -> float:
    """Largest relative defect of <Ax, y> = <x, A*y> over random probes."""
    rng = np.random.default_rng(seed)
    n1, n2 = op.in_shape
    worst = 0.0
    for _ in range(n_probes):
        x = rng.standard_normal((n1, n2))
        ax = op.apply(x)
        y = rng.standard_normal(ax.shape)
        lhs = float(np.vdot(ax, y).real)
        rhs = float(np.vdot(x, op.adjoint(y)).real)
        scale = max(abs(lhs), abs(rhs), 1e-30)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst
