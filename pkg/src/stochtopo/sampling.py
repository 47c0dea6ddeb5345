"""Rademacher sampling, Hutchinson trace estimates and SAA objective estimates.

The weighted compliance is ``trace(F^T K^-1 F)``. Drawing Rademacher vectors
``xi_k`` and solving only for the combined loads ``g_k = F xi_k`` gives an
unbiased estimate from ``n`` solves instead of ``m``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .fem import LoadSet, StiffnessSystem


class StaleSolutionError(RuntimeError):
    """Sensitivity requested for a batch whose displacements are not cached."""


@dataclass
class SampleBatch:
    """``n`` Rademacher vectors of length ``m`` (rows of ``xi``).

    ``loads`` holds the combined loads ``F xi_k`` as columns once the batch
    has been bound to a load set.
    """

    xi: np.ndarray
    seed: Optional[int] = None
    step: int = 0
    loads: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.xi.shape[0]

    @property
    def m(self) -> int:
        return self.xi.shape[1]

    def bind(self, loadset: LoadSet) -> "SampleBatch":
        if loadset.m != self.m:
            raise ValueError(f"batch has m={self.m}, load set has {loadset.m} cases")
        return SampleBatch(self.xi, self.seed, self.step, loadset.F @ self.xi.T)


@dataclass
class TraceEstimate:
    mean: float
    sample_variance: float
    sample_std_dev: float
    n: int
    samples: Optional[np.ndarray] = None


def _generator(seed: Optional[int], step: int) -> np.random.Generator:
    # Philox is counter-based; keying on (seed, step) makes batches
    # independent across steps and reproducible on rerun.
    if seed is None:
        return np.random.Generator(np.random.Philox())
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))


def draw_rademacher(m: int, n: int, seed: Optional[int] = None, step: int = 0) -> SampleBatch:
    """Draw ``n`` i.i.d. Rademacher vectors of length ``m``.

    Row ``k`` of the batch is sample ``k`` of step ``step``; the same
    ``(seed, step)`` always yields the same batch.
    """
    if m < 1 or n < 1:
        raise ValueError(f"need m >= 1 and n >= 1, got m={m}, n={n}")
    bits = _generator(seed, step).integers(0, 2, size=(n, m), dtype=np.int8)
    return SampleBatch(xi=(2.0 * bits - 1.0), seed=seed, step=step)


def all_sign_vectors(m: int) -> SampleBatch:
    """Every vector in ``{-1, +1}^m`` (``2**m`` rows)."""
    idx = np.arange(2**m)[:, None]
    bits = (idx >> np.arange(m)) & 1
    return SampleBatch(xi=2.0 * bits - 1.0)


def sample_variance(samples: Sequence[float]) -> float:
    """Biased (divide-by-n) sample variance."""
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("sample_variance needs at least one sample")
    return float(np.mean((s - s.mean()) ** 2))


def exact_variance(A: np.ndarray) -> float:
    """Variance of ``xi^T A xi`` for Rademacher ``xi``: ``2 sum_{i!=j} A_ij^2``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("exact_variance needs a square matrix")
    if not np.allclose(A, A.T, rtol=1e-12, atol=0.0):
        raise ValueError("exact_variance needs a symmetric matrix")
    off = A - np.diag(np.diag(A))
    return float(2.0 * np.sum(off**2))


def _estimate(samples: np.ndarray) -> TraceEstimate:
    var = sample_variance(samples)
    return TraceEstimate(float(samples.mean()), var, float(np.sqrt(var)), samples.size, samples)


def hutchinson_trace(apply_A: Callable[[np.ndarray], np.ndarray], batch: SampleBatch) -> TraceEstimate:
    """Estimate ``trace(A)`` as the mean of ``xi_k^T A xi_k`` over the batch.

    ``apply_A`` maps a ``(q, k)`` block of vectors to ``A`` times the block.
    A dense matrix may be passed instead of a callable.
    """
    Xi = batch.xi.T
    AX = apply_A @ Xi if isinstance(apply_A, np.ndarray) else apply_A(Xi)
    AX = np.asarray(AX, dtype=float)
    if AX.shape != Xi.shape:
        raise ValueError(f"operator returned shape {AX.shape}, expected {Xi.shape}")
    return _estimate(np.sum(Xi * AX, axis=0))


def estimate_compliance(system: StiffnessSystem, batch: SampleBatch) -> TraceEstimate:
    """SAA compliance ``(1/n) sum_k g_k^T K^-1 g_k`` from ``n`` solves.

    The displacements are cached on ``system`` for :func:`estimate_sensitivity`.
    """
    if batch.loads is None:
        raise ValueError("batch is not bound to a load set; call batch.bind(loads)")
    U = system.solve(batch.loads)
    samples = np.sum(batch.loads * U, axis=0)
    system.cached_batch = batch
    system.cached_displacements = U
    return _estimate(samples)


def estimate_sensitivity(system: StiffnessSystem, batch: SampleBatch) -> np.ndarray:
    """SAA gradient ``-(1/n) sum_k u_k^T (dK/dv_e) u_k`` reusing cached solves.

    The gradient is with respect to the variables ``system`` was assembled
    from (physical densities or member areas).
    """
    if getattr(system, "cached_batch", None) is not batch:
        raise StaleSolutionError("no displacements cached for this batch; call estimate_compliance first")
    return -system.sensitivity(system.cached_displacements) / batch.n


def exact_compliance(system: StiffnessSystem, loads: LoadSet, diagnostic: bool = False):
    """Weighted compliance ``sum_i alpha_i f_i^T u_i`` and its gradient (m solves)."""
    U = system.solve(loads.F, diagnostic=diagnostic)
    return float(np.sum(loads.F * U)), -system.sensitivity(U)
