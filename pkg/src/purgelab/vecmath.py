"""Dense vector primitives: normalized cosine distance, exponential moving
averages in sequential and closed form, and a finite-difference gradient
oracle used by the gradient audits.

All arithmetic is 64-bit. Distances live in [0, 1] with 0 at collinearity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateVectorError,
    DimensionError,
    EmptyBatchError,
    NumericError,
)


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Coerce to a finite, nonempty 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"{name} must be a nonempty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite components")
    return v


def cosine_distance(a, b) -> float:
    """Normalized cosine distance: 1 - (cossim(a, b) + 1) / 2.

    Codomain is [0, 1]: 0 for collinear vectors, 0.5 for orthogonal ones,
    1 for antiparallel ones. The similarity is clamped into [-1, 1] before
    the mapping so float drift cannot push the result outside [0, 1].
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateVectorError("cosine distance is undefined for a zero vector")
    cos = float(np.dot(a, b)) / (norm_a * norm_b)
    cos = min(1.0, max(-1.0, cos))
    return min(1.0, max(0.0, 1.0 - (cos + 1.0) / 2.0))


def cosine_distance_gradient(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of ``cosine_distance`` with respect to both inputs.

    Valid on the smooth interior (strictly between collinear and antiparallel),
    for vectors of any norm, so it agrees with central differences even when a
    perturbation leaves the unit sphere.
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateVectorError("cosine distance is undefined for a zero vector")
    unit_a = a / norm_a
    unit_b = b / norm_b
    cos = float(np.dot(unit_a, unit_b))
    grad_a = -0.5 * (unit_b - cos * unit_a) / norm_a
    grad_b = -0.5 * (unit_a - cos * unit_b) / norm_b
    return grad_a, grad_b


@dataclass(frozen=True)
class EmaParams:
    """Smoothing factor for exponential moving averages.

    The per-observation step is s = 2 / (gamma + 1); gamma >= 1 keeps s in
    (0, 1] so every update is a convex combination.
    """

    gamma: float

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma <= 0.0:
            raise ConfigError(f"gamma must be positive and finite, got {self.gamma!r}")
        if self.gamma < 1.0:
            raise ConfigError(f"gamma={self.gamma!r} gives step > 1; need gamma >= 1")

    @property
    def step(self) -> float:
        return 2.0 / (self.gamma + 1.0)


def ema_step(current: float, x: float, params: EmaParams) -> float:
    """One EMA update: current * (1 - s) + x * s."""
    if not (np.isfinite(current) and np.isfinite(x)):
        raise NumericError(f"EMA inputs must be finite, got current={current!r}, x={x!r}")
    s = params.step
    return current * (1.0 - s) + x * s


def ema_batch(current: float, xs: Sequence[float], params: EmaParams) -> float:
    """Closed-form EMA over an ordered batch of observations.

    For h observations this computes
    current * (1-s)^h + s * sum_j xs[j] * (1-s)^(h-j), which equals folding
    ``ema_step`` over xs in order. Order matters: later observations weigh
    more.
    """
    xs = [float(x) for x in xs]
    if not xs:
        raise EmptyBatchError("ema_batch needs at least one observation")
    if not np.isfinite(current) or not all(np.isfinite(x) for x in xs):
        raise NumericError("EMA inputs must be finite")
    s = params.step
    keep = 1.0 - s
    h = len(xs)
    weighted = 0.0
    for j, x in enumerate(xs, start=1):
        weighted += x * keep ** (h - j)
    return current * keep**h + s * weighted


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], at, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector.

    This is the independent oracle the analytic gradients are checked
    against; it never shares code with them.
    """
    if step <= 0.0:
        raise ConfigError(f"step must be positive, got {step!r}")
    at = as_vector(at, "at")
    grad = np.zeros_like(at)
    for i in range(at.size):
        hi = at.copy()
        lo = at.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = float(f(hi))
        f_lo = float(f(lo))
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError(f"non-finite function value near component {i}")
        grad[i] = (f_hi - f_lo) / (2.0 * step)
    return grad
