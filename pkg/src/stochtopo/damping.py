"""Move-limit damping for the randomized optimizer, plus run diagnostics.

The effective step ratio compares the average displacement over a window of
``n_step`` designs with the latest step. When it drops below ``tau_step`` the
updates are judged noise-dominated and the move limit is divided by ``gamma``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


def effective_step_ratio(history: Sequence[np.ndarray], n_step: int, full_window: bool = False) -> float:
    """``(1/n_step) |x_k - x_{k-n_step+1}| / |x_k - x_{k-1}|`` (Euclidean).

    ``history`` is ordered oldest to newest and must hold at least
    ``n_step + 1`` designs. With ``full_window`` the numerator spans
    ``n_step`` steps (``x_k - x_{k-n_step}``) instead of ``n_step - 1``.
    A zero latest step returns ``inf``.
    """
    if n_step < 2:
        raise ValueError("n_step must be at least 2")
    if len(history) < n_step + 1:
        raise ValueError(f"history holds {len(history)} designs, need {n_step + 1}")
    xk = history[-1]
    last = np.linalg.norm(xk - history[-2])
    if last == 0.0:
        return math.inf
    start = history[-n_step - 1] if full_window else history[-n_step]
    return float(np.linalg.norm(xk - start) / n_step / last)


@dataclass
class DampingState:
    """Move limit plus the design history needed for the effective step ratio.

    ``full_window`` selects the ``n_step``-step numerator. With the shorter
    ``n_step - 1`` window and an odd step count, move-limited sign-flipping
    steps can never bring the ratio under small tolerances.
    """

    move: float
    gamma: float = 2.0
    tau_step: float = 0.1
    n_step: int = 100
    enabled: bool = True
    full_window: bool = True
    steps: int = 0
    events: list = field(default_factory=list)
    history: deque = field(default=None, repr=False)

    def __post_init__(self):
        if self.move <= 0.0:
            raise ValueError("move limit must be positive")
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")
        if self.history is None:
            self.history = deque(maxlen=self.n_step + 1)

    @property
    def warm(self) -> bool:
        return self.steps >= self.n_step

    def restart(self, move: float):
        """Reset the move limit (e.g. after a continuation step); history is kept."""
        if move <= 0.0:
            raise ValueError("move limit must be positive")
        self.move = move

    def observe(self, design: np.ndarray) -> Optional[float]:
        """Record a new design; return the effective step ratio once warm.

        The first call stores the starting design and does not count as a step.
        """
        first = not self.history
        self.history.append(np.array(design, dtype=float, copy=True))
        if first:
            return None
        self.steps += 1
        if not self.warm:
            return None
        R = effective_step_ratio(self.history, self.n_step, self.full_window)
        if self.enabled:
            maybe_damp(self, R)
        return R


def maybe_damp(state: DampingState, R: float) -> DampingState:
    if R < state.tau_step:
        old = state.move
        state.move = old / state.gamma
        state.events.append(state.steps)
        log.debug("step %d: R=%.4g < %.4g, move %.4g -> %.4g", state.steps, R, state.tau_step, old, state.move)
    return state


def gradient_alignment(exact: np.ndarray, estimate: np.ndarray) -> Optional[float]:
    """Cosine of the angle between two gradients; None if either is zero."""
    a = np.linalg.norm(exact)
    b = np.linalg.norm(estimate)
    if a == 0.0 or b == 0.0:
        return None
    return float(np.clip(np.dot(exact, estimate) / (a * b), -1.0, 1.0))


def kkt_angle(objective_grad: np.ndarray, volume_grad: np.ndarray,
              free: Optional[np.ndarray] = None) -> Optional[float]:
    """Angle between objective and volume gradients restricted to ``free``.

    ``free`` marks variables strictly inside their bounds. The angle is
    ``pi`` at a KKT point of a single-constraint problem with an active
    volume constraint. Returns None when no variable is free.
    """
    g = np.asarray(objective_grad, dtype=float)
    v = np.asarray(volume_grad, dtype=float)
    if free is not None:
        g, v = g[free], v[free]
    if g.size == 0:
        return None
    c = gradient_alignment(g, v)
    return None if c is None else float(np.arccos(c))


def free_variables(x: np.ndarray, lower, upper, rtol: float = 1e-6) -> np.ndarray:
    """Variables not sitting on a bound (relative tolerance ``rtol``)."""
    lo = np.broadcast_to(lower, x.shape)
    hi = np.broadcast_to(upper, x.shape)
    return (x > lo + rtol * np.abs(lo)) & (x < hi - rtol * np.abs(hi))


@dataclass
class StepRecord:
    step: int
    compliance_est: float
    compliance_true: Optional[float]
    step_norm: float
    max_change: float
    move: float
    n_solve: int
    ratio: Optional[float] = None
    cos_theta: Optional[float] = None
    kkt_angle: Optional[float] = None
    penal: Optional[float] = None
    n_active: Optional[int] = None


class RunMetrics:
    """Per-step history of an optimization run."""

    columns = [f.name for f in fields(StepRecord)]

    def __init__(self):
        self.records: list[StepRecord] = []

    def append(self, record: StepRecord):
        if self.records and record.n_solve < self.records[-1].n_solve:
            raise ValueError("cumulative N_solve must not decrease")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records],
                        dtype=float)

    def moving_average(self, name: str, window: int = 50) -> np.ndarray:
        """Trailing moving average; entries with missing values are skipped."""
        vals = self.column(name)
        vals = vals[~np.isnan(vals)]
        if vals.size < window:
            return np.array([])
        return np.convolve(vals, np.ones(window) / window, mode="valid")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.records:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v)
                        for v in asdict(r).values()])
        return buf.getvalue()
