"""Optimality-criteria update with a linear volume constraint."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np


class OCBracketError(RuntimeError):
    """The volume constraint cannot be met inside the move-limit box."""

    def __init__(self, v_low: float, v_high: float, limit: float):
        super().__init__(
            f"volume limit {limit:.6g} not bracketed: volume ranges over [{v_low:.6g}, {v_high:.6g}] "
            "within the move limits"
        )
        self.v_low, self.v_high, self.limit = v_low, v_high, limit


@dataclass
class DesignField:
    """Design variables with per-variable measure (element volume or bar length).

    The volume constraint reads ``measure @ values <= volume_limit``.
    """

    values: np.ndarray
    measure: np.ndarray
    volume_limit: float
    lower: Union[float, np.ndarray]
    upper: Union[float, np.ndarray]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.measure = np.asarray(self.measure, dtype=float)

    @property
    def volume(self) -> float:
        return float(self.measure @ self.values)

    def within_bounds(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.values >= self.lower - tol) and np.all(self.values <= self.upper + tol))

    def feasible(self, tol: float = 1e-9) -> bool:
        return self.within_bounds(tol) and self.volume <= self.volume_limit + tol

    def with_values(self, values: np.ndarray) -> "DesignField":
        return replace(self, values=np.asarray(values, dtype=float))


LAMBDA_RANGE = (1e-30, 1e30)
MAX_BISECTIONS = 200


def oc_update(design: DesignField, gradient: np.ndarray, volume_gradient: np.ndarray,
              move: float, eta: float = 0.5) -> DesignField:
    """One optimality-criteria step.

    Each variable is scaled by ``B_e**eta`` with
    ``B_e = -gradient_e / (lam * volume_gradient_e)`` and clipped to the move
    box intersected with the bounds. ``lam`` is found by bisection in log
    space so that the volume constraint is active, unless it is already
    satisfied with every variable at its upper move limit.
    """
    x = design.values
    g = np.asarray(gradient, dtype=float)
    dv = np.asarray(volume_gradient, dtype=float)
    if np.any(g > 0.0):
        # Compliance sensitivities are non-positive; tiny positive values are roundoff.
        g = np.minimum(g, 0.0)
    if move < 0.0:
        raise ValueError("move limit must be non-negative")
    lo = np.maximum(x - move, design.lower)
    hi = np.minimum(x + move, design.upper)
    ratio = -g / dv

    def candidate(lam: float) -> np.ndarray:
        return np.clip(x * (ratio / lam) ** eta, lo, hi)

    def volume(y: np.ndarray) -> float:
        return float(design.measure @ y)

    limit = design.volume_limit
    if volume(hi) <= limit:
        return design.with_values(hi)
    if volume(lo) > limit:
        raise OCBracketError(volume(lo), volume(hi), limit)
    l1, l2 = LAMBDA_RANGE
    if volume(candidate(l1)) <= limit:
        return design.with_values(candidate(l1))
    if volume(candidate(l2)) > limit:
        raise OCBracketError(volume(candidate(l2)), volume(candidate(l1)), limit)
    for _ in range(MAX_BISECTIONS):
        mid = np.sqrt(l1 * l2)
        if volume(candidate(mid)) > limit:
            l1 = mid
        else:
            l2 = mid
        if l2 / l1 - 1.0 < 1e-15:
            break
    return design.with_values(candidate(l2))
