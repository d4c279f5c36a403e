"""Core value types for images, pixelwise dual fields, and the primal-dual metric.

Flattening convention used everywhere in this package: images are stored
row-major with pixel index j = r*n2 + c, and dual fields carry one 2-vector
per pixel in the same order, so ``values.reshape(n1, n2)`` and
``values.reshape(-1, 2)`` are always consistent views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionMismatch",
    "MetricNotPositive",
    "Grid2",
    "DualField",
    "PrimalDualState",
    "PdpsMetric",
    "inner_product",
    "q_form",
    "q_norm",
]

# Quadratic-form values in [-PSD_SLACK * ||u||^2, 0) are treated as round-off zeros.
PSD_SLACK = 1e-10


class DimensionMismatch(ValueError):
    """Operands live on different grids or have incompatible lengths."""


class MetricNotPositive(ValueError):
    """The primal-dual quadratic form evaluated negative beyond round-off."""


@dataclass(frozen=True)
class Grid2:
    """A real n1 x n2 image stored as a flat row-major array."""

    n1: int
    n2: int
    values: np.ndarray

    def __post_init__(self):
        if self.n1 <= 0 or self.n2 <= 0:
            raise DimensionMismatch(f"grid dims must be positive, got {self.n1}x{self.n2}")
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != self.n1 * self.n2:
            raise DimensionMismatch(
                f"expected {self.n1 * self.n2} values for a {self.n1}x{self.n2} grid, got {v.size}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, a) -> "Grid2":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2:
            raise DimensionMismatch(f"expected a 2-d array, got shape {a.shape}")
        return cls(a.shape[0], a.shape[1], a.ravel())

    @property
    def shape(self):
        return (self.n1, self.n2)

    @property
    def matrix(self) -> np.ndarray:
        """(n1, n2) view of the stored values."""
        return self.values.reshape(self.n1, self.n2)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class DualField:
    """One 2-vector per pixel of an n1 x n2 grid, stored pixel-major.

    ``pairs[j]`` is the 2-vector at pixel j = r*n2 + c.
    """

    n1: int
    n2: int
    values: np.ndarray

    def __post_init__(self):
        if self.n1 <= 0 or self.n2 <= 0:
            raise DimensionMismatch(f"grid dims must be positive, got {self.n1}x{self.n2}")
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != 2 * self.n1 * self.n2:
            raise DimensionMismatch(
                f"expected {2 * self.n1 * self.n2} values for a dual field on a "
                f"{self.n1}x{self.n2} grid, got {v.size}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("dual field values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_pairs(cls, pairs, n1: int, n2: int) -> "DualField":
        return cls(n1, n2, np.asarray(pairs, dtype=float).ravel())

    @property
    def shape(self):
        return (self.n1, self.n2)

    @property
    def pairs(self) -> np.ndarray:
        """(n1*n2, 2) view, one row per pixel."""
        return self.values.reshape(-1, 2)

    @property
    def field(self) -> np.ndarray:
        """(n1, n2, 2) view."""
        return self.values.reshape(self.n1, self.n2, 2)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class PrimalDualState:
    """Inner iterate u = (x, y) of the saddle-point problem."""

    x: Grid2
    y: DualField

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise DimensionMismatch(
                f"primal grid {self.x.shape} and dual grid {self.y.shape} differ"
            )

    @property
    def shape(self):
        return self.x.shape

    @classmethod
    def zeros(cls, n1: int, n2: int) -> "PrimalDualState":
        return cls(Grid2(n1, n2, np.zeros(n1 * n2)), DualField(n1, n2, np.zeros(2 * n1 * n2)))

    def __add__(self, other: "PrimalDualState") -> "PrimalDualState":
        return PrimalDualState(
            Grid2(self.x.n1, self.x.n2, self.x.values + other.x.values),
            DualField(self.y.n1, self.y.n2, self.y.values + other.y.values),
        )

    def __sub__(self, other: "PrimalDualState") -> "PrimalDualState":
        return PrimalDualState(
            Grid2(self.x.n1, self.x.n2, self.x.values - other.x.values),
            DualField(self.y.n1, self.y.n2, self.y.values - other.y.values),
        )

    def scaled(self, t: float) -> "PrimalDualState":
        return PrimalDualState(
            Grid2(self.x.n1, self.x.n2, t * self.x.values),
            DualField(self.y.n1, self.y.n2, t * self.y.values),
        )


@dataclass(frozen=True)
class PdpsMetric:
    """The preconditioner Q = [[1/tau_x, -K*], [-K, 1/(omega tau_y)]] as a quadratic form.

    Q is never materialised; ``q_form``/``q_norm`` evaluate the structured
    expression directly.  ``K`` maps an (n1, n2) image array to an
    (n1, n2, 2) dual array (see linops.LinearOperator).
    """

    tau_x: float
    tau_y: float
    omega: float
    K: "object" = field(repr=False)

    def __post_init__(self):
        if not (self.tau_x > 0 and self.tau_y > 0 and self.omega > 0):
            raise ValueError("step lengths tau_x, tau_y and omega must be positive")


def inner_product(a, b) -> float:
    """Euclidean pairing of two equal-length flat arrays.

    Uses the BLAS dot product, which is deterministic for a fixed build and
    thread configuration; reproducibility of driver trajectories relies on
    this, not on a particular mathematical summation order.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise DimensionMismatch(f"length mismatch: {a.size} vs {b.size}")
    return float(np.dot(a, b))


def _check_state(u: PrimalDualState, Q: PdpsMetric):
    n1, n2 = u.shape
    kshape = getattr(Q.K, "in_shape", None)
    if kshape is not None and tuple(kshape) != (n1, n2):
        raise DimensionMismatch(f"state grid {(n1, n2)} does not match operator grid {kshape}")


def q_form(u: PrimalDualState, v: PrimalDualState, Q: PdpsMetric) -> float:
    """Bilinear form <Qu, v> of the primal-dual metric."""
    _check_state(u, Q)
    if u.shape != v.shape:
        raise DimensionMismatch(f"state grids {u.shape} and {v.shape} differ")
    ku = Q.K.apply(u.x.matrix)
    xx = inner_product(u.x.values, v.x.values)
    yy = inner_product(u.y.values, v.y.values)
    kv = Q.K.apply(v.x.matrix)
    cross = inner_product(ku, v.y.field) + inner_product(kv, u.y.field)
    return xx / Q.tau_x + yy / (Q.omega * Q.tau_y) - cross


def q_norm(u: PrimalDualState, Q: PdpsMetric) -> float:
    """Norm sqrt(<Qu, u>), clamped at zero against round-off.

    Raises MetricNotPositive if the quadratic form is negative beyond the
    round-off slack, which signals invalid step lengths.
    """
    _check_state(u, Q)
    ku = Q.K.apply(u.x.matrix)
    val = (
        inner_product(u.x.values, u.x.values) / Q.tau_x
        + inner_product(u.y.values, u.y.values) / (Q.omega * Q.tau_y)
        - 2.0 * inner_product(ku, u.y.field)
    )
    if val < 0:
        scale = float(np.dot(u.x.values, u.x.values) + np.dot(u.y.values, u.y.values))
        if val >= -PSD_SLACK * max(scale, 1.0):
            val = 0.0
        else:
            raise MetricNotPositive(
                f"quadratic form evaluated to {val:.3e}; the metric is not positive "
                "semi-definite for these step lengths"
            )
    return float(np.sqrt(val))
