"""Outcome of a single optimization run."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .damping import RunMetrics
from .oc import DesignField


@dataclass
class RunResult:
    """Final design and bookkeeping of one run.

    ``n_solve`` is the analytical cost ``sample_size * n_step``;
    ``solver_count`` is what the linear solver actually counted. The two
    must agree.
    """

    engine: str
    design: DesignField
    metrics: RunMetrics
    converged: bool
    compliance: float
    n_step: int
    n_solve: int
    solver_count: int
    sample_size: int
    physical: Optional[np.ndarray] = None
    seed: Optional[int] = None
    damping_events: list = field(default_factory=list)
    active: Optional[np.ndarray] = None
    kkt_angle: Optional[float] = None

    def mean_cos_theta(self) -> Optional[float]:
        c = self.metrics.column("cos_theta")
        c = c[~np.isnan(c)]
        return float(c.mean()) if c.size else None

    def check_accounting(self):
        if self.n_solve != self.solver_count:
            raise AssertionError(f"N_solve {self.n_solve} != solver counter {self.solver_count}")
        if len(self.metrics) != self.n_step:
            raise AssertionError(f"{len(self.metrics)} metric rows for {self.n_step} steps")
