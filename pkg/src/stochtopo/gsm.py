"""Ground-structure truss optimization under many load cases."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import reduce
from typing import Optional, Sequence

import numpy as np

from .damping import DampingState, RunMetrics, StepRecord, free_variables, gradient_alignment, kkt_angle
from .fem import BAR, LoadSet, Material, Mesh, SolveCounter, assemble_stiffness, bar_direction_matrix
from .oc import DesignField, oc_update
from .results import RunResult
from .sampling import draw_rademacher, estimate_compliance, estimate_sensitivity, exact_compliance

log = logging.getLogger(__name__)

STANDARD = "standard"
STOCHASTIC = "stochastic"


class GroundStructureError(ValueError):
    pass


class DegenerateDesignError(ValueError):
    pass


@dataclass
class GroundStructure:
    """Candidate bars over a lattice of nodes.

    ``lattice`` holds the integer grid coordinates of each node; ``nodes``
    the physical coordinates.
    """

    nodes: np.ndarray
    lattice: np.ndarray
    members: np.ndarray
    level: Optional[int] = None
    void_zones: list = field(default_factory=list)

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.nodes[self.members[:, 1]] - self.nodes[self.members[:, 0]], axis=1)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def mesh(self, fixed_dofs) -> Mesh:
        return Mesh(self.nodes, self.members, BAR, fixed_dofs)


def _segments_cross_box(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """True where segment ``p0 -> p1`` passes through the open box ``(lo, hi)``."""
    d = p1 - p0
    tmin = np.zeros(len(p0))
    tmax = np.ones(len(p0))
    for k in range(p0.shape[1]):
        dk = d[:, k]
        flat = dk == 0.0
        inside = (p0[:, k] > lo[k]) & (p0[:, k] < hi[k])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[k] - p0[:, k]) / dk
            t2 = (hi[k] - p0[:, k]) / dk
        tmin = np.where(flat, np.where(inside, tmin, np.inf), np.maximum(tmin, np.minimum(t1, t2)))
        tmax = np.where(flat, np.where(inside, tmax, -np.inf), np.minimum(tmax, np.maximum(t1, t2)))
    return tmin < tmax


def generate_ground_structure(shape: Sequence[int], size: Optional[Sequence[float]] = None,
                              level: Optional[int] = None, void_zones: Sequence = ()) -> GroundStructure:
    """Ground structure on a regular grid without overlapping bars.

    Parameters
    ----------
    shape : node counts per axis, e.g. ``(17, 5)`` for a 16x4-cell grid.
    size : physical extent per axis; defaults to unit node spacing.
    level : connectivity level. Two nodes are joined when every lattice
        offset component is at most ``level`` in magnitude; ``None`` joins
        all pairs (full level). Bars whose lattice offset has a common
        divisor would pass through an intermediate node and are skipped.
    void_zones : boxes ``(lower_corner, upper_corner)`` in physical
        coordinates. Nodes strictly inside are dropped, as are bars crossing
        a box interior.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (2, 3) or min(shape) < 1:
        raise GroundStructureError(f"invalid grid shape {shape}")
    if level is not None and level < 1:
        raise GroundStructureError("level must be at least 1")
    d = len(shape)
    spacing = np.ones(d) if size is None else np.asarray(size, float) / np.maximum(np.array(shape) - 1, 1)
    grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    lattice = np.column_stack([g.transpose(*reversed(range(d))).ravel() for g in grids])
    nodes = lattice * spacing
    zones = [(np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in void_zones]
    keep = np.ones(len(nodes), dtype=bool)
    for lo, hi in zones:
        keep &= ~np.all((nodes > lo) & (nodes < hi), axis=1)
    lattice, nodes = lattice[keep], nodes[keep]

    i, j = np.triu_indices(len(nodes), k=1)
    off = np.abs(lattice[j] - lattice[i])
    ok = reduce(np.gcd, off.T) == 1
    if level is not None:
        ok &= off.max(axis=1) <= level
    for lo, hi in zones:
        ok &= ~_segments_cross_box(nodes[i], nodes[j], lo, hi)
    members = np.column_stack([i[ok], j[ok]])
    if members.size == 0:
        raise GroundStructureError("ground structure has no members")
    return GroundStructure(nodes, lattice, members, level, [(lo.tolist(), hi.tolist()) for lo, hi in zones])


def true_compliance_and_gradient_gsm(design: np.ndarray, mesh: Mesh, loads: LoadSet, material: Material,
                                     counter: Optional[SolveCounter] = None,
                                     active: Optional[np.ndarray] = None, floor: float = 0.0,
                                     void: float = 0.0, diagnostic: bool = False):
    """Weighted compliance and its area gradient (``m`` solves).

    Members outside ``active`` keep the area ``void`` in the analysis (zero
    drops them) and get a zero gradient; active members use at least ``floor``.
    """
    system = _assemble(mesh, design, material, counter, active, floor, void)
    C, g = exact_compliance(system, loads, diagnostic=diagnostic)
    if active is not None:
        g = np.where(active, g, 0.0)
    return C, g


def _assemble(mesh, x, material, counter, active, floor, void):
    if active is None:
        return assemble_stiffness(mesh, x, material, counter, floor=floor)
    if void > 0.0:
        # Removed members stay as a faint background so that filtering
        # cannot leave mechanisms in the analysis.
        return assemble_stiffness(mesh, np.where(active, np.maximum(x, floor), void), material, counter)
    return assemble_stiffness(mesh, x, material, counter, active=active, floor=floor)


def discrete_filter_standard(x: np.ndarray, alpha_f: float, active: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero every active member whose area relative to the largest active area is below ``alpha_f``."""
    if not 0.0 < alpha_f < 1.0:
        raise ValueError(f"filter value must lie in (0, 1), got {alpha_f}")
    x = np.asarray(x, dtype=float)
    act = np.ones(x.shape, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    xmax = x[act].max() if act.any() else 0.0
    if xmax <= 0.0:
        raise DegenerateDesignError("cannot filter a design without positive areas")
    out = x.copy()
    out[act & (x / xmax < alpha_f)] = 0.0
    return out


@dataclass
class FilterState:
    """Rolling window of normalized areas for the persistence filter."""

    alpha_f: float = 1e-4
    n_f: int = 10
    removed: Optional[np.ndarray] = None
    history: deque = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.alpha_f < 1.0:
            raise ValueError(f"filter value must lie in (0, 1), got {self.alpha_f}")
        if self.n_f < 1:
            raise ValueError("n_f must be at least 1")
        if self.history is None:
            self.history = deque(maxlen=self.n_f)


def discrete_filter_stochastic(x: np.ndarray, state: FilterState):
    """Remove members that stayed below ``alpha_f`` (relative) for ``n_f`` consecutive steps.

    Returns the filtered areas and the updated state. Removed members stay
    removed.
    """
    x = np.asarray(x, dtype=float)
    if state.removed is None:
        state.removed = np.zeros(x.shape, dtype=bool)
    active = ~state.removed
    xmax = x[active].max() if active.any() else 0.0
    if xmax <= 0.0:
        raise DegenerateDesignError("cannot filter a design without positive areas")
    state.history.append(np.where(active, x / xmax, 0.0))
    out = x.copy()
    out[state.removed] = 0.0
    if len(state.history) == state.n_f:
        window_max = np.max(np.array(state.history), axis=0)
        drop = active & (window_max < state.alpha_f)
        out[drop] = 0.0
        state.removed = state.removed | drop
    return out, state


@dataclass
class Topology:
    """Final truss after cutoff and removal of unstable nodes."""

    members: np.ndarray
    areas: np.ndarray
    removed_nodes: np.ndarray
    residual: float
    in_equilibrium: bool
    rolled_back: bool = False


def equilibrium_residual(mesh: Mesh, members: np.ndarray, loads: LoadSet) -> float:
    """Largest relative residual of ``min_q |B q - f|`` over the load cases.

    Checks that the kept members can carry every load case by axial forces
    alone, independent of stiffness.
    """
    B = bar_direction_matrix(mesh)[:, members].toarray()
    free = mesh.free_dofs
    Bf = B[free]
    F = loads.forces[free]
    if F.size == 0:
        return 0.0
    if Bf.shape[1] == 0:
        return 1.0 if np.any(F) else 0.0
    q, *_ = np.linalg.lstsq(Bf, F, rcond=None)
    res = np.linalg.norm(Bf @ q - F, axis=0)
    scale = np.maximum(np.linalg.norm(F, axis=0), 1e-300)
    return float(np.max(res / scale))


def cleanup_final(mesh: Mesh, design: np.ndarray, loads: LoadSet, cutoff: float = 1e-2,
                  tol: float = 1e-8) -> Topology:
    """Apply the area cutoff, strip unstable nodes and verify equilibrium.

    Members below ``cutoff`` times the largest area are dropped. Then free,
    unloaded nodes joined by fewer than ``dim`` members are removed together
    with their members, repeatedly, until none remain. If the remaining
    truss cannot equilibrate every load case the cleanup is rolled back.
    """
    x = np.asarray(design, dtype=float)
    if x.max() <= 0.0:
        raise DegenerateDesignError("degenerate design: no member has positive area")
    start = np.flatnonzero(x > 0.0)
    keep = x / x.max() >= cutoff
    fixed_nodes = np.unique(mesh.fixed_dofs // mesh.dim)
    loaded = np.flatnonzero(np.any(loads.forces.reshape(mesh.n_nodes, mesh.dim, -1) != 0.0, axis=(1, 2)))
    protected = np.zeros(mesh.n_nodes, dtype=bool)
    protected[fixed_nodes] = True
    protected[loaded] = True
    removed_nodes = np.zeros(mesh.n_nodes, dtype=bool)
    while True:
        count = np.bincount(mesh.elements[keep].ravel(), minlength=mesh.n_nodes)
        unstable = (count > 0) & (count < mesh.dim) & ~protected
        if not unstable.any():
            break
        removed_nodes |= unstable
        keep &= ~np.any(unstable[mesh.elements], axis=1)
    members = np.flatnonzero(keep)
    if members.size == 0:
        raise DegenerateDesignError("degenerate design: cleanup removed every member")
    res = equilibrium_residual(mesh, members, loads)
    if res > tol:
        log.warning("cleanup breaks equilibrium (residual %.3e); keeping pre-cleanup topology", res)
        res0 = equilibrium_residual(mesh, start, loads)
        return Topology(start, x[start], np.flatnonzero(np.zeros(mesh.n_nodes, bool)), res0, res0 <= tol, True)
    return Topology(members, x[members], np.flatnonzero(removed_nodes), res, True)


@dataclass
class GSMProblem:
    mesh: Mesh
    loads: LoadSet
    volume: float
    material: Material = field(default_factory=Material)
    structure: Optional[GroundStructure] = None


@dataclass
class GSMParams:
    move_ratio: float = 1e4
    eta: float = 0.5
    tau_opt: float = 1e-8
    x_min_ratio: float = 1e-2
    x_max_ratio: float = 1e4
    max_steps: int = 5000
    n: int = 6
    n_s: int = 1
    n_step: int = 100
    tau_step: float = 0.05
    gamma: float = 2.0
    damping: bool = True
    full_window: bool = True
    seed: Optional[int] = 0
    diagnostics: bool = False
    filter: str = "none"
    alpha_f: float = 1e-4
    n_f: int = 10
    final_alpha_f: Optional[float] = None
    max_norm: bool = False


def run_gsm(problem: GSMProblem, engine: str = STANDARD, params: Optional[GSMParams] = None) -> RunResult:
    """Minimize weighted compliance over member areas with OC.

    Bounds and the move limit are multiples of the uniform start
    ``x0 = V / sum(L)``. With a discrete filter (``"standard"`` or
    ``"stochastic"``) the lower bound is zero and filtered members are
    dropped from the analysis for the rest of the run. Convergence is
    ``|x_k - x_{k-1}| < tau_opt`` (Euclidean).
    """
    if engine not in (STANDARD, STOCHASTIC):
        raise ValueError(f"unknown engine {engine!r}")
    p = params or GSMParams()
    if p.filter not in ("none", "standard", "stochastic"):
        raise ValueError(f"unknown filter {p.filter!r}")
    mesh, loads, mat = problem.mesh, problem.loads, problem.material
    L = mesh.element_sizes()
    x0 = problem.volume / L.sum()
    filtering = p.filter != "none"
    lower = 0.0 if filtering else p.x_min_ratio * x0
    upper = p.x_max_ratio * x0
    floor = 1e-12 * x0 if filtering else 0.0
    void = 1e-9 * x0 if filtering else 0.0
    x = np.full(mesh.n_elements, x0)
    active = np.ones(mesh.n_elements, dtype=bool)
    fstate = FilterState(p.alpha_f, p.n_f) if p.filter == "stochastic" else None
    stochastic = engine == STOCHASTIC
    damping = DampingState(move=p.move_ratio * x0, gamma=p.gamma, tau_step=p.tau_step, n_step=p.n_step,
                           enabled=stochastic and p.damping, full_window=p.full_window)
    damping.observe(x)
    counter = SolveCounter()
    metrics = RunMetrics()
    converged = False
    batch = None
    step = 0

    while step < p.max_steps:
        system = _assemble(mesh, x, mat, counter, active if filtering else None, floor, void)
        g_true = c_true = cos = None
        if stochastic:
            if batch is None or step % p.n_s == 0:
                batch = draw_rademacher(loads.m, p.n, p.seed, step).bind(loads)
            c_est = estimate_compliance(system, batch).mean
            grad = estimate_sensitivity(system, batch)
            if p.diagnostics:
                c_true, g_true = exact_compliance(system, loads, diagnostic=True)
                cos = gradient_alignment(g_true[active], grad[active])
        else:
            c_est, grad = exact_compliance(system, loads)
            c_true, g_true = c_est, grad
        theta = None
        if g_true is not None:
            free = active & free_variables(x, lower, upper)
            theta = kkt_angle(g_true[free], L[free])

        move = damping.move
        sub = DesignField(x[active], L[active], problem.volume, lower, upper)
        x_new = np.zeros_like(x)
        x_new[active] = oc_update(sub, grad[active], L[active], move, p.eta).values
        if p.filter == "standard":
            x_new = discrete_filter_standard(x_new, p.alpha_f, active)
        elif p.filter == "stochastic":
            x_new, fstate = discrete_filter_stochastic(x_new, fstate)
        if filtering:
            active = active & (x_new > 0.0)
        delta = x_new - x
        norm = float(np.linalg.norm(delta))
        ratio = damping.observe(x_new)
        step += 1
        metrics.append(StepRecord(step=step, compliance_est=c_est, compliance_true=c_true, step_norm=norm,
                                  max_change=float(np.max(np.abs(delta))), move=move,
                                  n_solve=counter.optimization, ratio=ratio, cos_theta=cos,
                                  kkt_angle=theta, n_active=int(active.sum())))
        x = x_new
        if (float(np.max(np.abs(delta))) if p.max_norm else norm) < p.tau_opt:
            converged = True
            break

    if p.final_alpha_f is not None:
        x = discrete_filter_standard(x, p.final_alpha_f, active)
        active = active & (x > 0.0)
    final_c, g = true_compliance_and_gradient_gsm(x, mesh, loads, mat, counter,
                                                  active=active if filtering else None, floor=floor, void=void,
                                                  diagnostic=True)
    free = active & free_variables(x, lower, upper)
    design = DesignField(x, L, problem.volume, lower, upper)
    result = RunResult(engine=engine, design=design, metrics=metrics, converged=converged, compliance=final_c,
                       n_step=step, n_solve=step * (p.n if stochastic else loads.m),
                       solver_count=counter.optimization, sample_size=p.n if stochastic else loads.m,
                       seed=p.seed if stochastic else None, damping_events=list(damping.events),
                       active=active)
    result.kkt_angle = kkt_angle(g[free], L[free])
    return result
