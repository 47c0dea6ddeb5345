"""Density-based (SIMP) continuum optimization under many load cases."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .damping import DampingState, RunMetrics, StepRecord, gradient_alignment
from .fem import LoadSet, Material, Mesh, SolveCounter, assemble_stiffness
from .oc import DesignField, oc_update
from .results import RunResult
from .sampling import draw_rademacher, estimate_compliance, estimate_sensitivity, exact_compliance

log = logging.getLogger(__name__)

STANDARD = "standard"
STOCHASTIC = "stochastic"


@dataclass
class DensityFilter:
    """Row-stochastic filter ``rho_phys = H rho``."""

    H: sp.csr_matrix
    radius: float
    kind: str

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.H @ x

    def backprop(self, grad_phys: np.ndarray) -> np.ndarray:
        """Chain rule: gradient w.r.t. design from gradient w.r.t. physical field."""
        return self.H.T @ grad_phys


def build_filter(mesh: Mesh, radius: float, kind: str = "linear") -> DensityFilter:
    """Distance-weighted density filter over element centroids.

    Weights are ``max(0, r - d)`` (linear) or ``max(0, r - d)**2``
    (quadratic), normalized so each row sums to one.
    """
    if radius <= 0.0:
        raise ValueError("filter radius must be positive")
    if kind not in ("linear", "quadratic"):
        raise ValueError(f"unknown filter kind {kind!r}")
    c = mesh.centroids()
    M = c.shape[0]
    pairs = cKDTree(c).query_pairs(radius, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    w = radius - np.linalg.norm(c[i] - c[j], axis=1)
    keep = w > 0.0
    i, j, w = i[keep], j[keep], w[keep]
    if i.size == 0:
        warnings.warn(f"filter radius {radius} reaches no neighbouring element; filter is the identity")
    self_w = np.full(M, radius)
    if kind == "quadratic":
        w, self_w = w**2, self_w**2
    rows = np.concatenate([i, j, np.arange(M)])
    cols = np.concatenate([j, i, np.arange(M)])
    W = sp.csr_matrix((np.concatenate([w, w, self_w]), (rows, cols)), shape=(M, M))
    H = sp.diags(1.0 / np.asarray(W.sum(axis=1)).ravel()) @ W
    return DensityFilter(H.tocsr(), radius, kind)


def symmetry_maps(mesh: Mesh, axes: Sequence[str], tol: float = 1e-8) -> list[np.ndarray]:
    """Element permutations for every mirror combination over ``axes``.

    ``"x"`` mirrors the x coordinate about the mesh's vertical centre line
    (left-right symmetry), ``"y"`` mirrors y about the horizontal one.
    """
    c = mesh.centroids()
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    mid = 0.5 * (lo + hi)
    scale = float(np.max(hi - lo))
    tree = cKDTree(c)
    flips = {"x": 0, "y": 1, "z": 2}
    single = []
    for ax in axes:
        if ax not in flips or flips[ax] >= mesh.dim:
            raise ValueError(f"unknown symmetry axis {ax!r}")
        mirrored = c.copy()
        k = flips[ax]
        mirrored[:, k] = 2.0 * mid[k] - mirrored[:, k]
        dist, idx = tree.query(mirrored)
        if np.any(dist > tol * scale):
            bad = int(np.argmax(dist))
            raise ValueError(f"mesh is not symmetric about {ax!r}: element {bad} has no mirror image")
        single.append(idx)
    maps = [np.arange(c.shape[0])]
    for perm in single:
        maps = maps + [m[perm] for m in maps]
    return maps


def enforce_symmetry(values: np.ndarray, mesh: Mesh, axes: Sequence[str],
                     maps: Optional[list] = None) -> np.ndarray:
    """Replace every value by the mean over its mirror orbit."""
    if not axes:
        return np.asarray(values, dtype=float).copy()
    maps = maps if maps is not None else symmetry_maps(mesh, axes)
    values = np.asarray(values, dtype=float)
    return np.mean([values[m] for m in maps], axis=0)


@dataclass(frozen=True)
class ContinuationSchedule:
    values: tuple = (1.0, 1.5, 2.0, 2.5, 3.0)

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        object.__setattr__(self, "values", v)
        if not v or v[0] != 1.0:
            raise ValueError("penalization schedule must start at 1")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("penalization schedule must be strictly increasing")

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


def true_compliance_and_gradient(design: np.ndarray, mesh: Mesh, loads: LoadSet, material: Material,
                                 density_filter: Optional[DensityFilter] = None,
                                 counter: Optional[SolveCounter] = None, diagnostic: bool = False):
    """Weighted compliance and its gradient with respect to the design densities."""
    phys = design if density_filter is None else density_filter.apply(design)
    system = assemble_stiffness(mesh, phys, material, counter)
    C, g_phys = exact_compliance(system, loads, diagnostic=diagnostic)
    g = g_phys if density_filter is None else density_filter.backprop(g_phys)
    return C, g


@dataclass
class DensityProblem:
    mesh: Mesh
    loads: LoadSet
    material: Material = field(default_factory=Material)
    volume_fraction: float = 0.3


@dataclass
class DensityParams:
    filter_radius: float = 0.15
    filter_kind: str = "linear"
    move: float = 0.05
    eta: float = 0.5
    tau_opt: float = 1e-2
    rho_min: float = 1e-3
    schedule: ContinuationSchedule = field(default_factory=ContinuationSchedule)
    stage_cap: int = 300
    max_steps: int = 2000
    symmetry: tuple = ()
    n: int = 6
    n_s: int = 1
    n_step: int = 100
    tau_step: float = 0.1
    gamma: float = 2.0
    damping: bool = True
    full_window: bool = True
    seed: Optional[int] = 0
    diagnostics: bool = False


def run_density(problem: DensityProblem, engine: str = STANDARD,
                params: Optional[DensityParams] = None, initial: Optional[np.ndarray] = None) -> RunResult:
    """Minimize weighted compliance with OC and penalization continuation.

    The standard engine solves all ``m`` load cases per step. The stochastic
    engine solves ``n`` Rademacher-combined loads per step and damps the move
    limit when progress stalls. Each continuation stage runs until the
    maximum density change drops below ``tau_opt`` or ``stage_cap`` steps
    pass. The move limit is reset at every stage while the damping history
    carries over.

    ``initial`` overrides the uniform starting design; it must be feasible.
    """
    if engine not in (STANDARD, STOCHASTIC):
        raise ValueError(f"unknown engine {engine!r}")
    p = params or DensityParams()
    mesh, loads = problem.mesh, problem.loads
    v = mesh.element_sizes()
    v_max = problem.volume_fraction * v.sum()
    filt = build_filter(mesh, p.filter_radius, p.filter_kind)
    maps = symmetry_maps(mesh, p.symmetry) if p.symmetry else None
    start = np.full(mesh.n_elements, v_max / v.sum()) if initial is None else np.asarray(initial, dtype=float)
    design = DesignField(start.copy(), v, v_max, p.rho_min, 1.0)
    if start.shape != (mesh.n_elements,) or not design.feasible():
        raise ValueError("initial design must have one value per element, within bounds and volume")
    counter = SolveCounter()
    metrics = RunMetrics()
    stochastic = engine == STOCHASTIC
    step = 0
    converged = False
    batch = None
    material = problem.material
    damping = DampingState(move=p.move, gamma=p.gamma, tau_step=p.tau_step, n_step=p.n_step,
                           enabled=stochastic and p.damping, full_window=p.full_window)
    damping.observe(design.values)

    for stage, penal in enumerate(p.schedule):
        material = replace(problem.material, penal=penal)
        if stage > 0:
            damping.restart(p.move)
        stage_done = False
        for _ in range(p.stage_cap):
            if step >= p.max_steps:
                break
            phys = filt.apply(design.values)
            system = assemble_stiffness(mesh, phys, material, counter)
            c_true = cos = None
            if stochastic:
                if batch is None or step % p.n_s == 0:
                    batch = draw_rademacher(loads.m, p.n, p.seed, step).bind(loads)
                c_est = estimate_compliance(system, batch).mean
                grad = filt.backprop(estimate_sensitivity(system, batch))
                if p.diagnostics:
                    c_true, g_exact = exact_compliance(system, loads, diagnostic=True)
                    cos = gradient_alignment(filt.backprop(g_exact), grad)
            else:
                c_est, g_phys = exact_compliance(system, loads)
                c_true = c_est
                grad = filt.backprop(g_phys)
            move = damping.move
            new = oc_update(design, grad, v, move, p.eta)
            if maps is not None:
                new = new.with_values(enforce_symmetry(new.values, mesh, p.symmetry, maps))
            delta = new.values - design.values
            change = float(np.max(np.abs(delta)))
            ratio = damping.observe(new.values)
            step += 1
            metrics.append(StepRecord(step=step, compliance_est=c_est, compliance_true=c_true,
                                      step_norm=float(np.linalg.norm(delta)), max_change=change,
                                      move=move, n_solve=counter.optimization, ratio=ratio,
                                      cos_theta=cos, penal=penal))
            design = new
            if change < p.tau_opt:
                stage_done = True
                break
        log.info("stage p=%g done=%s after %d steps", penal, stage_done, step)
        if step >= p.max_steps and not stage_done:
            break
        if stage == len(p.schedule) - 1:
            converged = stage_done

    phys = filt.apply(design.values)
    final_c, _ = exact_compliance(assemble_stiffness(mesh, phys, material, counter), loads, diagnostic=True)
    return RunResult(engine=engine, design=design, physical=phys, metrics=metrics, converged=converged,
                     compliance=final_c, n_step=step, n_solve=step * (p.n if stochastic else loads.m),
                     solver_count=counter.optimization, sample_size=p.n if stochastic else loads.m,
                     seed=p.seed if stochastic else None,
                     damping_events=list(damping.events) if damping else [])
