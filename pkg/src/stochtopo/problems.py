"""Benchmark problems and the YAML problem-file format.

Problem file schema (``version: 1``)::

    version: 1
    method: density | gsm
    engine: standard | stochastic
    seed: 0
    budget: 2000             # step budget
    diagnostics: false
    material: {E0: 1.0, nu: 0.3, E_min_ratio: 1.0e-9, thickness: 1.0}
    # density
    mesh: {nelx: 40, nely: 10, width: 4.0, height: 1.0}
    volume_fraction: 0.3
    # gsm: either a grid or explicit nodes and members
    grid: {shape: [9, 3], size: [4.0, 1.0], level: null, void_zones: []}
    nodes: [[0, 0], [1, 0]]
    members: [[0, 1]]
    volume: 1.2
    supports:
      - {edge: left}                     # or {node: 3} or {point: [0, 0.5]}
        dofs: [0, 1]                     # optional, default all
    loads:
      - {point: [1, 0.5], angle: 90, magnitude: 1, weight: 1}
      - {node: 4, direction: [1, 0]}
      - {sweep: {point: [2, 0.5], count: 36, start: 0, end: 350, magnitude: 1}}
    params: {n: 6, tau_step: 0.1}        # engine parameter overrides

Weights default to equal; weights that do not sum to one are normalized
with a warning.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from .density import DensityParams, DensityProblem
from .fem import BAR, QUAD4, LoadSet, Material, Mesh, rectangle_mesh
from .gsm import GSMParams, GSMProblem, GroundStructure, generate_ground_structure

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Three-bar demo: supports on x = 0, joint on y = 0, total length 3.6 so
# that the uniform start is 0.1 / 3.6 = 0.0278. The modulus scales the
# compliance of the optimum to 8.1666.
THREE_BAR_NODES = np.array([
    [0.0, 1.764742069014],
    [0.0, -0.189117375275],
    [0.0, -0.574576884498],
    [0.733337330422, 0.0],
])
THREE_BAR_E0 = 4.316285251
THREE_BAR_VOLUME = 0.1


class ProblemError(ValueError):
    """Problem definition failed validation; ``errors`` lists every issue."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid problem:\n  " + "\n  ".join(self.errors))


def angular_sweep(count: int, start: float = 0.0, end: float = 350.0, magnitude: float = 1.0) -> np.ndarray:
    """``count`` unit directions (scaled by ``magnitude``) from ``start`` to ``end`` degrees inclusive.

    Returns a ``(count, 2)`` array.
    """
    if count < 1:
        raise ValueError("sweep count must be at least 1")
    step = 0.0 if count == 1 else (end - start) / (count - 1)
    theta = np.deg2rad(start + step * np.arange(count))
    return magnitude * np.column_stack([np.cos(theta), np.sin(theta)])


def point_loads(n_nodes: int, dim: int, nodes: Sequence[int], vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Force matrix with one column per (node, vector) pair."""
    F = np.zeros((n_nodes * dim, len(vectors)))
    for k, (node, vec) in enumerate(zip(nodes, vectors)):
        F[node * dim:(node + 1) * dim, k] = vec
    return F


def _edge_nodes(nodes: np.ndarray, edge: str, tol: float = 1e-9) -> np.ndarray:
    axis, side = {"left": (0, "min"), "right": (0, "max"), "bottom": (1, "min"), "top": (1, "max"),
                  "back": (2, "min"), "front": (2, "max")}[edge]
    c = nodes[:, axis]
    ref = c.min() if side == "min" else c.max()
    return np.flatnonzero(np.abs(c - ref) <= tol * max(1.0, abs(ref)))


def _dofs(nodes: Sequence[int], dim: int, components: Sequence[int] = None) -> np.ndarray:
    comps = range(dim) if components is None else components
    return np.array(sorted(int(n) * dim + c for n in nodes for c in comps), dtype=int)


BOX_POINTS = ((1.0, 0.5), (2.0, 0.5), (3.0, 0.5))


def _box_loads(mesh: Mesh, count: int = 36) -> LoadSet:
    dirs = angular_sweep(count, 0.0, 350.0)
    nodes, vecs = [], []
    for pt in BOX_POINTS:
        node = mesh.node_at(pt)
        if node is None:
            raise ValueError(f"mesh has no node at load point {pt}")
        nodes += [node] * count
        vecs += list(dirs)
    return LoadSet.equal_weights(point_loads(mesh.n_nodes, mesh.dim, nodes, vecs))


def box_density_problem(nelx: int = 40, nely: int = 10, volume_fraction: float = 0.3,
                        sweep_count: int = 36) -> DensityProblem:
    """4x1 box clamped on both ends, angular load sweeps at three mid-height points."""
    nodes, elements = rectangle_mesh(nelx, nely, 4.0, 1.0)
    fixed = _dofs(np.r_[_edge_nodes(nodes, "left"), _edge_nodes(nodes, "right")], 2)
    mesh = Mesh(nodes, elements, QUAD4, fixed)
    return DensityProblem(mesh, _box_loads(mesh, sweep_count), Material(), volume_fraction)


def box_gsm_problem(cells: Sequence[int] = (8, 2), level: Optional[int] = None, volume: float = 1.2,
                    sweep_count: int = 36) -> GSMProblem:
    """Ground-structure version of the box domain on a ``cells`` grid."""
    gs = generate_ground_structure((cells[0] + 1, cells[1] + 1), (4.0, 1.0), level)
    fixed = _dofs(np.r_[_edge_nodes(gs.nodes, "left"), _edge_nodes(gs.nodes, "right")], 2)
    mesh = gs.mesh(fixed)
    return GSMProblem(mesh, _box_loads(mesh, sweep_count), volume, Material(), gs)


def three_bar_problem() -> GSMProblem:
    """Three bars from fixed supports to a free joint, 9 unit loads at 40 degree steps."""
    members = np.array([[0, 3], [1, 3], [2, 3]])
    mesh = Mesh(THREE_BAR_NODES.copy(), members, BAR, np.arange(6))
    F = point_loads(4, 2, [3] * 9, angular_sweep(9, 0.0, 320.0))
    return GSMProblem(mesh, LoadSet.equal_weights(F), THREE_BAR_VOLUME, Material(E0=THREE_BAR_E0))


def three_bar_params(**overrides) -> GSMParams:
    base = dict(move_ratio=0.1, x_min_ratio=1e-8, x_max_ratio=1e4, tau_opt=1e-8, n=6, n_step=10,
                tau_step=0.05, gamma=2.0)
    base.update(overrides)
    return GSMParams(**base)


def box_gsm_params(**overrides) -> GSMParams:
    return dataclasses.replace(GSMParams(), **overrides)


def initial_area(problem: GSMProblem) -> float:
    return problem.volume / float(problem.mesh.element_sizes().sum())


# ---------------------------------------------------------------- problem files

TOP_LEVEL = {"version", "method", "engine", "seed", "budget", "diagnostics", "material", "mesh",
             "volume_fraction", "grid", "nodes", "members", "volume", "supports", "loads", "params", "name"}
MESH_KEYS = {"nelx", "nely", "width", "height"}
GRID_KEYS = {"shape", "size", "level", "void_zones"}
MATERIAL_KEYS = {"E0", "nu", "E_min_ratio", "thickness"}
LOAD_KEYS = {"point", "node", "angle", "direction", "magnitude", "weight", "sweep"}
SWEEP_KEYS = {"point", "node", "count", "start", "end", "magnitude", "weight"}
SUPPORT_KEYS = {"edge", "node", "point", "dofs"}


@dataclass
class ProblemSpec:
    """Validated problem definition, ready to build."""

    method: str
    engine: str
    mesh: Mesh
    loads: LoadSet
    material: Material
    volume: float
    params: Any
    seed: Optional[int] = 0
    name: str = "problem"
    structure: Optional[GroundStructure] = None
    raw: dict = field(default_factory=dict, repr=False)

    def problem(self):
        if self.method == "density":
            v = self.mesh.element_sizes()
            return DensityProblem(self.mesh, self.loads, self.material, self.volume / v.sum())
        return GSMProblem(self.mesh, self.loads, self.volume, self.material, self.structure)

    @property
    def initial_design(self) -> float:
        """Uniform starting value: volume fraction (density) or ``V / sum(L)`` (gsm)."""
        return self.volume / float(self.mesh.element_sizes().sum())


def _check_keys(d, allowed, where, errors):
    if not isinstance(d, dict):
        errors.append(f"{where}: expected a mapping, got {type(d).__name__}")
        return False
    for k in sorted(set(d) - allowed):
        errors.append(f"{where}: unknown field {k!r}")
    return True


def _resolve_node(entry, mesh: Mesh, where, errors) -> Optional[int]:
    if "node" in entry:
        node = entry["node"]
        if not isinstance(node, int) or not 0 <= node < mesh.n_nodes:
            errors.append(f"{where}: node {node} does not exist (mesh has {mesh.n_nodes} nodes)")
            return None
        return node
    if "point" in entry:
        pt = entry["point"]
        if not isinstance(pt, (list, tuple)) or len(pt) != mesh.dim:
            errors.append(f"{where}: point {pt} must have {mesh.dim} coordinates")
            return None
        node = mesh.node_at(pt)
        if node is None:
            errors.append(f"{where}: no node at point {list(pt)}")
        return node
    errors.append(f"{where}: needs 'node' or 'point'")
    return None


def _direction(entry, dim, where, errors) -> Optional[np.ndarray]:
    if "direction" in entry and "angle" in entry:
        errors.append(f"{where}: give 'direction' or 'angle', not both")
        return None
    if "angle" in entry:
        if dim != 2:
            errors.append(f"{where}: 'angle' is only valid in 2D")
            return None
        t = math.radians(float(entry["angle"]))
        d = np.array([math.cos(t), math.sin(t)])
    elif "direction" in entry:
        d = np.asarray(entry["direction"], dtype=float)
        if d.shape != (dim,) or not np.any(d):
            errors.append(f"{where}: direction must be a nonzero vector of length {dim}")
            return None
        d = d / np.linalg.norm(d)
    else:
        errors.append(f"{where}: needs 'direction' or 'angle'")
        return None
    return float(entry.get("magnitude", 1.0)) * d


def _build_mesh(data, method, errors):
    if method == "density":
        m = data.get("mesh")
        if m is None:
            errors.append("mesh: required for method 'density'")
            return None, None
        if not _check_keys(m, MESH_KEYS, "mesh", errors):
            return None, None
        try:
            nelx, nely = int(m["nelx"]), int(m["nely"])
            nodes, elements = rectangle_mesh(nelx, nely, float(m.get("width", nelx)), float(m.get("height", nely)))
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"mesh: {exc}")
            return None, None
        return (nodes, elements, QUAD4), None
    if "grid" in data and "nodes" in data:
        errors.append("give either 'grid' or 'nodes'/'members', not both")
        return None, None
    if "grid" in data:
        g = data["grid"]
        if not _check_keys(g, GRID_KEYS, "grid", errors):
            return None, None
        try:
            gs = generate_ground_structure(g["shape"], g.get("size"), g.get("level"), g.get("void_zones", ()))
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"grid: {exc}")
            return None, None
        return (gs.nodes, gs.members, BAR), gs
    if "nodes" in data and "members" in data:
        nodes = np.asarray(data["nodes"], dtype=float)
        members = np.asarray(data["members"], dtype=int)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            errors.append("nodes: expected a list of 2D or 3D coordinates")
            return None, None
        if members.ndim != 2 or members.shape[1] != 2:
            errors.append("members: expected a list of node pairs")
            return None, None
        bad = members[(members < 0) | (members >= len(nodes))]
        if bad.size:
            errors.append(f"members: node {int(bad[0])} does not exist ({len(nodes)} nodes)")
            return None, None
        return (nodes, members, BAR), None
    errors.append("gsm problems need 'grid' or 'nodes' and 'members'")
    return None, None


def _supports(data, nodes, dim, errors) -> np.ndarray:
    dofs = []
    entries = data.get("supports")
    if not entries:
        errors.append("supports: at least one support is required")
        return np.array([], dtype=int)
    for k, s in enumerate(entries):
        where = f"supports[{k}]"
        if not _check_keys(s, SUPPORT_KEYS, where, errors):
            continue
        comps = s.get("dofs")
        if comps is not None and any(c not in range(dim) for c in comps):
            errors.append(f"{where}: dofs must be components in 0..{dim - 1}")
            continue
        if "edge" in s:
            try:
                found = _edge_nodes(nodes, s["edge"])
            except KeyError:
                errors.append(f"{where}: unknown edge {s['edge']!r}")
                continue
        else:
            node = _resolve_node(s, _NodeLookup(nodes), where, errors)
            if node is None:
                continue
            found = [node]
        dofs.append(_dofs(found, dim, comps))
    return np.unique(np.concatenate(dofs)) if dofs else np.array([], dtype=int)


class _NodeLookup:
    """Node queries on a bare coordinate array."""

    def __init__(self, nodes: np.ndarray):
        self.nodes = nodes
        self.n_nodes = len(nodes)
        self.dim = nodes.shape[1]

    def node_at(self, point, tol: float = 1e-9):
        d = np.linalg.norm(self.nodes - np.asarray(point, dtype=float), axis=1)
        i = int(np.argmin(d))
        return i if d[i] <= tol * max(1.0, float(np.abs(self.nodes).max())) else None


def _loads(data, nodes, errors):
    lookup = _NodeLookup(nodes)
    dim = nodes.shape[1]
    cols, weights = [], []
    entries = data.get("loads")
    if not entries:
        errors.append("loads: at least one load case is required")
        return None
    for k, entry in enumerate(entries):
        where = f"loads[{k}]"
        if not _check_keys(entry, LOAD_KEYS, where, errors):
            continue
        if "sweep" in entry:
            sw = entry["sweep"]
            if not _check_keys(sw, SWEEP_KEYS, where + ".sweep", errors):
                continue
            if dim != 2:
                errors.append(f"{where}: angular sweeps are only valid in 2D")
                continue
            node = _resolve_node(sw, lookup, where + ".sweep", errors)
            if node is None:
                continue
            try:
                vecs = angular_sweep(int(sw["count"]), float(sw.get("start", 0.0)), float(sw.get("end", 350.0)),
                                     float(sw.get("magnitude", 1.0)))
            except (KeyError, ValueError) as exc:
                errors.append(f"{where}.sweep: {exc}")
                continue
            w = sw.get("weight")
            for v in vecs:
                cols.append((node, v))
                weights.append(None if w is None else float(w))
            continue
        node = _resolve_node(entry, lookup, where, errors)
        vec = _direction(entry, dim, where, errors)
        if node is None or vec is None:
            continue
        cols.append((node, vec))
        weights.append(None if entry.get("weight") is None else float(entry["weight"]))
    if errors or not cols:
        return None
    F = point_loads(len(nodes), dim, [c[0] for c in cols], [c[1] for c in cols])
    if all(w is None for w in weights):
        return LoadSet.equal_weights(F)
    if any(w is None for w in weights):
        errors.append("loads: give a weight for every load case or for none")
        return None
    w = np.array(weights)
    if np.any(w <= 0.0):
        errors.append("loads: weights must be positive")
        return None
    if abs(w.sum() - 1.0) > 1e-12:
        warnings.warn(f"load weights sum to {w.sum():.6g}; normalizing to 1")
        w = w / w.sum()
    return LoadSet(F, w)


def _params(data, method, errors):
    cls = DensityParams if method == "density" else GSMParams
    known = {f.name for f in dataclasses.fields(cls)}
    over = dict(data.get("params") or {})
    for k in sorted(set(over) - known):
        errors.append(f"params: unknown field {k!r}")
        over.pop(k)
    if "budget" in data:
        over["max_steps"] = int(data["budget"])
    if "seed" in data:
        over["seed"] = data["seed"]
    if "diagnostics" in data:
        over["diagnostics"] = bool(data["diagnostics"])
    if "symmetry" in over:
        over["symmetry"] = tuple(over["symmetry"])
    if "schedule" in over:
        from .density import ContinuationSchedule
        try:
            over["schedule"] = ContinuationSchedule(tuple(over["schedule"]))
        except ValueError as exc:
            errors.append(f"params.schedule: {exc}")
            over.pop("schedule")
    return cls(**over)


def parse_problem_dict(data: dict) -> ProblemSpec:
    """Validate a problem mapping, collecting every error before raising."""
    errors: list[str] = []
    if not isinstance(data, dict):
        raise ProblemError(["problem file must contain a mapping"])
    _check_keys(data, TOP_LEVEL, "problem", errors)
    version = data.get("version")
    if version != SCHEMA_VERSION:
        errors.append(f"version: expected {SCHEMA_VERSION}, got {version!r}")
    method = data.get("method")
    if method not in ("density", "gsm"):
        errors.append(f"method: expected 'density' or 'gsm', got {method!r}")
        raise ProblemError(errors)
    engine = data.get("engine", "standard")
    if engine not in ("standard", "stochastic"):
        errors.append(f"engine: expected 'standard' or 'stochastic', got {engine!r}")
    mat = data.get("material") or {}
    material = Material()
    if _check_keys(mat, MATERIAL_KEYS, "material", errors):
        try:
            material = Material(**{k: float(v) for k, v in mat.items() if k in MATERIAL_KEYS})
        except (TypeError, ValueError) as exc:
            errors.append(f"material: {exc}")

    built, structure = _build_mesh(data, method, errors)
    mesh = loads = None
    volume = float("nan")
    if built is not None:
        nodes, elements, kind = built
        fixed = _supports(data, nodes, nodes.shape[1], errors)
        loads = _loads(data, nodes, errors)
        if fixed.size:
            try:
                mesh = Mesh(nodes, elements, kind, fixed)
            except ValueError as exc:
                errors.append(f"mesh: {exc}")
        if mesh is not None:
            if method == "density":
                vf = data.get("volume_fraction")
                if vf is None or not 0.0 < float(vf) <= 1.0:
                    errors.append(f"volume_fraction: expected a value in (0, 1], got {vf!r}")
                else:
                    volume = float(vf) * float(mesh.element_sizes().sum())
            else:
                v = data.get("volume")
                if v is None or float(v) <= 0.0:
                    errors.append(f"volume: expected a positive value, got {v!r}")
                else:
                    volume = float(v)
        if loads is not None and mesh is not None:
            fixed_load = np.any(loads.forces[mesh.fixed_dofs] != 0.0, axis=1)
            if fixed_load.any():
                errors.append(f"loads: applied at supported dof {int(mesh.fixed_dofs[np.argmax(fixed_load)])}")
    params = _params(data, method, errors)
    if errors:
        raise ProblemError(errors)
    return ProblemSpec(method, engine, mesh, loads, material, volume, params, data.get("seed", 0),
                       str(data.get("name", "problem")), structure, data)


def parse_problem(path) -> ProblemSpec:
    """Read and validate a YAML problem file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"problem file not found: {path}")
    with path.open() as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ProblemError([f"{path}: not valid YAML: {exc}"]) from exc
    spec = parse_problem_dict(data)
    if spec.name == "problem":
        spec.name = path.stem
    return spec


def builtin_problem(name: str, engine: str = "standard") -> ProblemSpec:
    """Named benchmark as a :class:`ProblemSpec` (``three-bar``, ``box-density``, ``box-gsm``)."""
    from .density import DensityParams
    if name == "three-bar":
        prob, params, method = three_bar_problem(), three_bar_params(), "gsm"
    elif name == "box-density":
        prob, params, method = box_density_problem(), DensityParams(symmetry=("x", "y")), "density"
    elif name == "box-gsm":
        prob, params, method = box_gsm_problem(), GSMParams(), "gsm"
    else:
        raise ProblemError([f"unknown built-in problem {name!r}; choose from {', '.join(BUILTINS)}"])
    if method == "density":
        volume = prob.volume_fraction * float(prob.mesh.element_sizes().sum())
        return ProblemSpec(method, engine, prob.mesh, prob.loads, prob.material, volume, params, 0, name)
    return ProblemSpec(method, engine, prob.mesh, prob.loads, prob.material, prob.volume, params, 0, name,
                       prob.structure)


BUILTINS = ("three-bar", "box-density", "box-gsm")
