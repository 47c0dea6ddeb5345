"""Meshes, element stiffness, sparse assembly and linear solves.

Two element families are supported: bilinear quadrilaterals (plane stress,
2D only) for density-based continuum designs, and pin-jointed bars in 2D or
3D for ground-structure trusses. Degrees of freedom are numbered node-major,
``dof = dim * node + component``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

QUAD4 = "quad4"
BAR = "bar"

# Factor dense below this many free DOFs, SuperLU above.
DENSE_LIMIT = 2000
# Relative pivot below which the reduced stiffness is treated as singular.
PIVOT_TOL = 1e-13


class UnrestrainedStructureError(RuntimeError):
    """Reduced stiffness matrix is singular (mechanism or missing supports)."""


class SolverError(RuntimeError):
    """Iterative solve failed to reach the requested residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Material:
    """Linear elastic material with SIMP interpolation parameters.

    ``E_min_ratio`` sets the ersatz modulus ``E_min = E_min_ratio * E0`` used by
    the continuum interpolation; trusses ignore it.
    """

    E0: float = 1.0
    nu: float = 0.3
    E_min_ratio: float = 1e-9
    penal: float = 3.0
    thickness: float = 1.0

    @property
    def E_min(self) -> float:
        return self.E_min_ratio * self.E0

    def modulus(self, rho_phys: np.ndarray) -> np.ndarray:
        return self.E_min + rho_phys**self.penal * (self.E0 - self.E_min)

    def modulus_derivative(self, rho_phys: np.ndarray) -> np.ndarray:
        return self.penal * rho_phys ** (self.penal - 1.0) * (self.E0 - self.E_min)


@dataclass
class Mesh:
    """Nodes, element connectivity and supports.

    Parameters
    ----------
    nodes : (N, d) array
        Node coordinates.
    elements : (M, k) int array
        Node indices per element; ``k = 4`` for ``quad4`` (counter-clockwise),
        ``k = 2`` for ``bar``.
    kind : {"quad4", "bar"}
    fixed_dofs : int array
        Restrained global DOFs. Must be non-empty.
    """

    nodes: np.ndarray
    elements: np.ndarray
    kind: str
    fixed_dofs: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        self.elements = np.atleast_2d(np.asarray(self.elements, dtype=np.int64))
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        if self.kind not in (QUAD4, BAR):
            raise ValueError(f"unknown element kind {self.kind!r}")
        if self.dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dim}")
        if self.kind == QUAD4 and (self.dim != 2 or self.elements.shape[1] != 4):
            raise ValueError("quad4 elements need 2D nodes and 4 nodes per element")
        if self.kind == BAR and self.elements.shape[1] != 2:
            raise ValueError("bar elements need exactly 2 nodes")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= self.n_nodes):
            raise ValueError("element references a node index outside the mesh")
        if self.fixed_dofs.size == 0:
            raise ValueError("fixed-DOF set is empty; the structure is unrestrained")
        if self.fixed_dofs.min() < 0 or self.fixed_dofs.max() >= self.n_dofs:
            raise ValueError("fixed DOF outside the DOF range")
        if self.kind == BAR and np.any(self.element_sizes() <= 0.0):
            bad = np.flatnonzero(self.element_sizes() <= 0.0)
            raise ValueError(f"zero-length bars: {bad.tolist()}")

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_dofs(self) -> int:
        return self.dim * self.n_nodes

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def free_dofs(self) -> np.ndarray:
        if "free" not in self._cache:
            mask = np.ones(self.n_dofs, dtype=bool)
            mask[self.fixed_dofs] = False
            self._cache["free"] = np.flatnonzero(mask)
        return self._cache["free"]

    @property
    def element_dofs(self) -> np.ndarray:
        """(M, k*d) global DOF indices of each element."""
        if "edofs" not in self._cache:
            d = self.dim
            self._cache["edofs"] = (self.elements[:, :, None] * d + np.arange(d)).reshape(
                self.n_elements, -1
            )
        return self._cache["edofs"]

    def element_sizes(self) -> np.ndarray:
        """Areas of quads (shoelace) or lengths of bars."""
        xy = self.nodes[self.elements]
        if self.kind == BAR:
            return np.linalg.norm(xy[:, 1] - xy[:, 0], axis=1)
        x, y = xy[..., 0], xy[..., 1]
        return 0.5 * np.abs(np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1))

    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def node_at(self, point: Sequence[float], tol: float = 1e-9) -> Optional[int]:
        """Index of the node within ``tol`` of ``point``, or None."""
        dist = np.linalg.norm(self.nodes - np.asarray(point, dtype=float), axis=1)
        i = int(np.argmin(dist))
        return i if dist[i] <= tol else None

    def node_dofs(self, node: int) -> np.ndarray:
        return self.dim * node + np.arange(self.dim)


def rectangle_mesh(nelx: int, nely: int, width: float, height: float) -> tuple[np.ndarray, np.ndarray]:
    """Structured quad grid over ``[0, width] x [0, height]``.

    Returns ``(nodes, elements)``. Node ``(i, j)`` has index ``j*(nelx+1)+i``
    and element ``(i, j)`` has index ``j*nelx+i``, so both run x-fastest.
    """
    xs = np.linspace(0.0, width, nelx + 1)
    ys = np.linspace(0.0, height, nely + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nelx), np.arange(nely))
    i, j = i.ravel(), j.ravel()
    n0 = j * (nelx + 1) + i
    elements = np.column_stack([n0, n0 + 1, n0 + nelx + 2, n0 + nelx + 1])
    return nodes, elements


_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def plane_stress_matrix(E: float, nu: float) -> np.ndarray:
    return E / (1.0 - nu**2) * np.array(
        [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]]
    )


def q4_stiffness(coords: np.ndarray, nu: float, E: float = 1.0, thickness: float = 1.0) -> np.ndarray:
    """Stiffness of bilinear quads by 2x2 Gauss quadrature.

    ``coords`` is ``(4, 2)`` for one element or ``(M, 4, 2)`` for a batch;
    the result is ``(8, 8)`` or ``(M, 8, 8)`` accordingly.
    """
    coords = np.asarray(coords, dtype=float)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
    D = plane_stress_matrix(E, nu)
    Ke = np.zeros((coords.shape[0], 8, 8))
    for xi in _GAUSS:
        for eta in _GAUSS:
            dN = 0.25 * np.array(
                [
                    [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
                    [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
                ]
            )
            J = np.einsum("ak,mkb->mab", dN, coords)
            detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            if np.any(detJ <= 0):
                raise ValueError("quad element with non-positive Jacobian (check node ordering)")
            dNdx = np.linalg.solve(J, np.broadcast_to(dN, (coords.shape[0], 2, 4)))
            B = np.zeros((coords.shape[0], 3, 8))
            B[:, 0, 0::2] = dNdx[:, 0]
            B[:, 1, 1::2] = dNdx[:, 1]
            B[:, 2, 0::2] = dNdx[:, 1]
            B[:, 2, 1::2] = dNdx[:, 0]
            Ke += np.einsum("mai,ab,mbj,m->mij", B, D, B, detJ * thickness)
    return Ke[0] if single else Ke


def bar_direction_matrix(mesh: Mesh) -> sp.csc_matrix:
    """Sparse ``B`` (dofs x members) with columns ``[-n, +n]`` on the end DOFs.

    The member stiffness is ``(E A / L) b b^T`` with ``b`` the column.
    """
    if "B" not in mesh._cache:
        d = mesh.dim
        xy = mesh.nodes[mesh.elements]
        L = np.linalg.norm(xy[:, 1] - xy[:, 0], axis=1)
        n = (xy[:, 1] - xy[:, 0]) / L[:, None]
        rows = mesh.element_dofs
        vals = np.hstack([-n, n])
        cols = np.repeat(np.arange(mesh.n_elements), 2 * d)
        mesh._cache["B"] = sp.csc_matrix(
            (vals.ravel(), (rows.ravel(), cols)), shape=(mesh.n_dofs, mesh.n_elements)
        )
    return mesh._cache["B"]


def unit_element_stiffness(mesh: Mesh, material: Material) -> np.ndarray:
    """Unit-modulus quad stiffness stack, cached on the mesh per (nu, thickness)."""
    key = ("Ke", material.nu, material.thickness)
    if key not in mesh._cache:
        mesh._cache[key] = q4_stiffness(mesh.nodes[mesh.elements], material.nu, 1.0, material.thickness)
    return mesh._cache[key]


class SolveCounter:
    """Thread-safe tally of right-hand sides solved.

    Solves made for the optimization itself and those made only for
    diagnostics (true compliance, gradient alignment) are kept apart so the
    cost metric is not polluted by monitoring.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.optimization = 0
        self.diagnostic = 0

    def add(self, k: int, diagnostic: bool = False):
        with self._lock:
            if diagnostic:
                self.diagnostic += k
            else:
                self.optimization += k

    @property
    def total(self) -> int:
        return self.optimization + self.diagnostic


class StiffnessSystem:
    """Reduced stiffness ``K`` over free DOFs with a reusable factorization.

    ``sensitivity(U, V)`` returns, for every design variable ``v_e``,
    ``sum_columns U[:, c]^T (dK/dv_e) V[:, c]``.
    """

    def __init__(self, mesh: Mesh, design: np.ndarray, material: Material, K: sp.spmatrix,
                 free: np.ndarray, counter: Optional[SolveCounter] = None, method: str = "auto"):
        self.mesh = mesh
        self.design = design
        self.material = material
        self.K = K.tocsc()
        self.free = free
        self.counter = counter if counter is not None else SolveCounter()
        self.method = method
        self._factor = None
        self._kind = None

    @property
    def n_free(self) -> int:
        return self.free.size

    def factorize(self):
        if self._factor is not None:
            return
        n = self.n_free
        method = self.method
        if method == "auto":
            method = "cholesky" if n <= DENSE_LIMIT else "lu"
        diag = self.K.diagonal()
        scale = np.max(np.abs(diag)) if n else 1.0
        if method == "cholesky":
            try:
                c, low = scipy.linalg.cho_factor(self.K.toarray(), lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise UnrestrainedStructureError("unrestrained structure: stiffness not positive definite") from exc
            piv = np.diag(c) ** 2
            if piv.min() <= PIVOT_TOL * scale:
                raise UnrestrainedStructureError(
                    f"unrestrained structure: pivot {piv.min():.3e} vs diagonal scale {scale:.3e}"
                )
            self._factor = (c, low)
        elif method == "lu":
            try:
                lu = spla.splu(self.K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                               options={"SymmetricMode": True})
            except RuntimeError as exc:
                raise UnrestrainedStructureError(f"unrestrained structure: {exc}") from exc
            piv = lu.U.diagonal()
            if piv.min() <= PIVOT_TOL * scale:
                raise UnrestrainedStructureError(
                    f"unrestrained structure: pivot {piv.min():.3e} vs diagonal scale {scale:.3e}"
                )
            self._factor = lu
        elif method == "cg":
            self._factor = sp.diags(1.0 / diag)
        else:
            raise ValueError(f"unknown solver method {self.method!r}")
        self._kind = method

    def _solve_free(self, b: np.ndarray) -> np.ndarray:
        if self._kind == "cholesky":
            return scipy.linalg.cho_solve(self._factor, b, check_finite=False)
        if self._kind == "lu":
            return self._factor.solve(b)
        out = np.zeros_like(b)
        for j in range(b.shape[1]):
            bj = b[:, j]
            nb = np.linalg.norm(bj)
            if nb == 0.0:
                continue
            x, info = spla.cg(self.K, bj, rtol=1e-10, atol=0.0, M=self._factor, maxiter=20 * self.n_free)
            res = np.linalg.norm(self.K @ x - bj) / nb
            if info != 0 or res > 1e-9:
                raise SolverError("conjugate gradient did not converge", res)
            out[:, j] = x
        return out

    def solve(self, rhs: np.ndarray, diagnostic: bool = False) -> np.ndarray:
        """Solve ``K U = RHS`` for full-length columns; fixed DOFs stay zero."""
        rhs = np.asarray(rhs, dtype=float)
        vector = rhs.ndim == 1
        R = rhs[:, None] if vector else rhs
        if R.shape[0] != self.mesh.n_dofs:
            raise ValueError(f"rhs has {R.shape[0]} rows, expected {self.mesh.n_dofs}")
        mask = np.ones(self.mesh.n_dofs, dtype=bool)
        mask[self.free] = False
        if np.any(R[mask] != 0.0):
            raise ValueError("right-hand side is nonzero on a restrained DOF")
        self.factorize()
        U = np.zeros_like(R)
        if self.n_free:
            U[self.free] = self._solve_free(R[self.free])
        self.counter.add(R.shape[1], diagnostic=diagnostic)
        return U[:, 0] if vector else U

    def sensitivity(self, U: np.ndarray, V: Optional[np.ndarray] = None) -> np.ndarray:
        U = U[:, None] if U.ndim == 1 else U
        V = U if V is None else (V[:, None] if V.ndim == 1 else V)
        mesh, mat = self.mesh, self.material
        if mesh.kind == BAR:
            B = bar_direction_matrix(mesh)
            L = mesh.element_sizes()
            return mat.E0 / L * np.sum((B.T @ U) * (B.T @ V), axis=1)
        Ke = unit_element_stiffness(mesh, mat)
        edofs = mesh.element_dofs
        Ue, Ve = U[edofs], V[edofs]
        energy = np.einsum("mik,mik->m", Ue, np.einsum("mij,mjk->mik", Ke, Ve))
        return mat.modulus_derivative(self.design) * energy

    def element_sensitivity(self, e: int, u_left: np.ndarray, u_right: np.ndarray) -> float:
        mesh, mat = self.mesh, self.material
        if not 0 <= e < mesh.n_elements:
            raise IndexError(f"element {e} out of range")
        dofs = mesh.element_dofs[e]
        ul, ur = np.asarray(u_left)[dofs], np.asarray(u_right)[dofs]
        if mesh.kind == BAR:
            b = bar_direction_matrix(mesh)[:, e].toarray().ravel()[dofs]
            return float(mat.E0 / mesh.element_sizes()[e] * (b @ ul) * (b @ ur))
        Ke = unit_element_stiffness(mesh, mat)[e]
        return float(mat.modulus_derivative(self.design[e]) * ul @ Ke @ ur)


def _reduce(K: sp.spmatrix, free: np.ndarray) -> sp.csc_matrix:
    K = K.tocsr()[free][:, free]
    return K.tocsc()


def assemble_stiffness(mesh: Mesh, design: np.ndarray, material: Material,
                       counter: Optional[SolveCounter] = None, active: Optional[np.ndarray] = None,
                       floor: float = 0.0, method: str = "auto") -> StiffnessSystem:
    """Assemble the reduced stiffness for a design.

    For ``quad4`` meshes ``design`` holds physical (filtered) densities and
    ``E_e = E_min + rho_e**p (E0 - E_min)``. For ``bar`` meshes it holds member
    areas and ``K = sum_e x_e (E0/L_e) b_e b_e^T``.

    Parameters
    ----------
    active : bool array, optional
        Bars only. Inactive members are left out and nodes touched by no
        active member lose their DOFs.
    floor : float
        Bars only. Minimum area used for active members, keeps members
        driven to zero from producing exact zero stiffness.
    """
    design = np.asarray(design, dtype=float)
    if design.shape != (mesh.n_elements,):
        raise ValueError(f"design has shape {design.shape}, expected ({mesh.n_elements},)")
    free = mesh.free_dofs
    if mesh.kind == BAR:
        B = bar_direction_matrix(mesh)
        L = mesh.element_sizes()
        areas = design
        if active is not None:
            areas = np.where(active, np.maximum(design, floor), 0.0)
            used = np.zeros(mesh.n_nodes, dtype=bool)
            used[mesh.elements[active].ravel()] = True
            node_ok = np.repeat(used, mesh.dim)
            free = free[node_ok[free]]
        elif floor > 0.0:
            areas = np.maximum(design, floor)
        K = B @ sp.diags(material.E0 * areas / L) @ B.T
        return StiffnessSystem(mesh, design, material, _reduce(K, free), free, counter, method)

    Ke = unit_element_stiffness(mesh, material)
    E = material.modulus(design)
    edofs = mesh.element_dofs
    k = edofs.shape[1]
    rows = np.repeat(edofs, k, axis=1).ravel()
    cols = np.tile(edofs, (1, k)).ravel()
    vals = (E[:, None, None] * Ke).ravel()
    K = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs))
    return StiffnessSystem(mesh, design, material, _reduce(K, free), free, counter, method)


def solve_displacements(system: StiffnessSystem, rhs: np.ndarray, diagnostic: bool = False) -> np.ndarray:
    return system.solve(rhs, diagnostic=diagnostic)


def element_sensitivity_kernel(mesh: Mesh, design: np.ndarray, material: Material, e: int,
                               u_left: np.ndarray, u_right: np.ndarray) -> float:
    """``u_left^T (dK/dv_e) u_right`` for a single element, without assembly."""
    system = StiffnessSystem(mesh, np.asarray(design, dtype=float), material,
                             sp.csc_matrix((0, 0)), np.empty(0, dtype=np.int64))
    return system.element_sensitivity(e, u_left, u_right)


@dataclass
class LoadSet:
    """Load cases ``f_i`` (columns of ``forces``) with weights ``alpha_i``.

    ``F`` is the weighted load matrix with columns ``sqrt(alpha_i) f_i``.
    """

    forces: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=float)
        if self.forces.ndim == 1:
            self.forces = self.forces[:, None]
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size != self.forces.shape[1]:
            raise ValueError(f"{self.weights.size} weights for {self.forces.shape[1]} load cases")
        if np.any(self.weights <= 0.0):
            raise ValueError("load-case weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"load-case weights sum to {self.weights.sum():.15g}, not 1")
        self.F = self.forces * np.sqrt(self.weights)

    @classmethod
    def equal_weights(cls, forces: np.ndarray) -> "LoadSet":
        forces = np.asarray(forces, dtype=float)
        m = 1 if forces.ndim == 1 else forces.shape[1]
        return cls(forces, np.full(m, 1.0 / m))

    @property
    def m(self) -> int:
        return self.forces.shape[1]

    @property
    def n_dofs(self) -> int:
        return self.forces.shape[0]
