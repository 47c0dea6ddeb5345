"""Independent brute-force references for the numerical kernels.

Each function here is written without reusing the code it checks: plain
loops, enumeration and finite differences. :func:`run_all` runs the
standard battery and is exposed through the ``oracle`` CLI command.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


def sign_vectors(q: int):
    for signs in itertools.product((-1.0, 1.0), repeat=q):
        yield np.array(signs)


def trace_by_enumeration(A: np.ndarray) -> float:
    """Mean of ``xi^T A xi`` over all ``2**q`` sign vectors."""
    vals = [xi @ A @ xi for xi in sign_vectors(A.shape[0])]
    return float(np.mean(vals))


def variance_by_enumeration(A: np.ndarray) -> float:
    """Population variance of ``xi^T A xi`` over all sign vectors."""
    vals = np.array([xi @ A @ xi for xi in sign_vectors(A.shape[0])])
    return float(np.mean((vals - vals.mean()) ** 2))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6,
                       relative: bool = True) -> np.ndarray:
    """Central finite-difference gradient; ``relative`` scales ``h`` by ``|x_i|``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        hi = h * max(abs(x[i]), 1e-12) if relative else h
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        g[i] = (f(xp) - f(xm)) / (2.0 * hi)
    return g


def q4_stiffness_reference(coords: np.ndarray, E: float, nu: float, t: float = 1.0) -> np.ndarray:
    """Bilinear quadrilateral, plane stress, 2x2 Gauss rule, element by element."""
    D = E / (1.0 - nu**2) * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]])
    g = 1.0 / np.sqrt(3.0)
    K = np.zeros((8, 8))
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    for xi in (-g, g):
        for eta in (-g, g):
            dN = np.zeros((2, 4))
            for a, (xa, ya) in enumerate(corners):
                dN[0, a] = 0.25 * xa * (1 + ya * eta)
                dN[1, a] = 0.25 * ya * (1 + xa * xi)
            J = dN @ coords
            detJ = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
            dNx = np.linalg.solve(J, dN)
            B = np.zeros((3, 8))
            for a in range(4):
                B[0, 2 * a] = dNx[0, a]
                B[1, 2 * a + 1] = dNx[1, a]
                B[2, 2 * a] = dNx[1, a]
                B[2, 2 * a + 1] = dNx[0, a]
            K += t * detJ * B.T @ D @ B
    return K


def bar_stiffness_reference(nodes: np.ndarray, members: np.ndarray, areas: np.ndarray, E: float) -> np.ndarray:
    """Dense global stiffness of a pin-jointed truss."""
    d = nodes.shape[1]
    K = np.zeros((nodes.shape[0] * d, nodes.shape[0] * d))
    for (a, b), A in zip(members, areas):
        v = nodes[b] - nodes[a]
        L = np.linalg.norm(v)
        n = v / L
        k = E * A / L * np.outer(n, n)
        ia = list(range(a * d, a * d + d))
        ib = list(range(b * d, b * d + d))
        for I, J, s in ((ia, ia, 1.0), (ib, ib, 1.0), (ia, ib, -1.0), (ib, ia, -1.0)):
            K[np.ix_(I, J)] += s * k
    return K


def dense_weighted_compliance(K: np.ndarray, F: np.ndarray, weights: np.ndarray, free: np.ndarray) -> float:
    """``sum_i w_i f_i^T K^-1 f_i`` on the free DOFs with a dense solve."""
    Kf = K[np.ix_(free, free)]
    total = 0.0
    for i in range(F.shape[1]):
        f = F[free, i]
        total += weights[i] * f @ np.linalg.solve(Kf, f)
    return float(total)


def filter_weights_reference(centroids: np.ndarray, radius: float, quadratic: bool = False) -> np.ndarray:
    """Dense normalized filter matrix from all pairwise distances."""
    M = centroids.shape[0]
    W = np.zeros((M, M))
    for i in range(M):
        for j in range(M):
            w = max(0.0, radius - float(np.linalg.norm(centroids[i] - centroids[j])))
            W[i, j] = w**2 if quadratic else w
    return W / W.sum(axis=1, keepdims=True)


def standard_filter_reference(x: Sequence[float], alpha: float, active: Sequence[bool] = None) -> list:
    active = [True] * len(x) if active is None else list(active)
    top = max(v for v, a in zip(x, active) if a)
    return [0.0 if (a and v / top < alpha) else float(v) for v, a in zip(x, active)]


def stochastic_filter_reference(trace: Sequence[Sequence[float]], alpha: float, n_f: int) -> list:
    """Outputs of the persistence filter for a sequence of raw designs.

    A member is dropped at step ``k`` when its area relative to the largest
    surviving area was below ``alpha`` at each of the steps ``k - n_f + 1 .. k``.
    """
    M = len(trace[0])
    removed = [False] * M
    below = [[] for _ in range(M)]
    outputs = []
    for x in trace:
        top = max(x[e] for e in range(M) if not removed[e])
        for e in range(M):
            below[e].append((not removed[e]) and x[e] / top < alpha)
        out = []
        for e in range(M):
            if not removed[e] and len(below[e]) >= n_f and all(below[e][-n_f:]):
                removed[e] = True
            out.append(0.0 if removed[e] else float(x[e]))
        outputs.append(out)
    return outputs


def prune_reference(members: Sequence[Sequence[int]], keep: Sequence[bool], n_nodes: int, dim: int,
                    protected: Sequence[int]) -> set:
    """Surviving member ids after repeatedly deleting under-connected unprotected nodes."""
    alive = {e for e, k in enumerate(keep) if k}
    protected = set(int(p) for p in protected)
    changed = True
    while changed:
        changed = False
        for node in range(n_nodes):
            if node in protected:
                continue
            touching = [e for e in alive if node in members[e]]
            if 0 < len(touching) < dim:
                alive -= set(touching)
                changed = True
    return alive


@dataclass
class OracleCheck:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)


def run_all(seed: int = 0) -> list:
    """Battery of oracle comparisons against the package implementation."""
    from .density import build_filter
    from .fem import QUAD4, Material, Mesh, assemble_stiffness, q4_stiffness, rectangle_mesh
    from .gsm import FilterState, discrete_filter_standard, discrete_filter_stochastic
    from .problems import three_bar_problem
    from .sampling import all_sign_vectors, exact_compliance, exact_variance, hutchinson_trace

    rng = np.random.default_rng(seed)
    out = []

    err = 0.0
    for _ in range(20):
        q = int(rng.integers(1, 9))
        A = rng.standard_normal((q, q))
        A = A + A.T
        est = hutchinson_trace(A, all_sign_vectors(q)).mean
        err = max(err, abs(est - trace_by_enumeration(A)) / max(abs(np.trace(A)), 1.0))
        err = max(err, abs(exact_variance(A) - variance_by_enumeration(A)) / max(variance_by_enumeration(A), 1.0))
    out.append(OracleCheck("trace and variance enumeration", err < 1e-10, f"max rel err {err:.2e}"))

    coords = np.array([[0.0, 0.0], [1.3, 0.1], [1.2, 0.9], [-0.1, 1.0]])
    e = np.abs(q4_stiffness(coords[None], 0.3)[0] - q4_stiffness_reference(coords, 1.0, 0.3)).max()
    out.append(OracleCheck("Q4 element stiffness", e < 1e-12, f"max abs err {e:.2e}"))

    prob = three_bar_problem()
    x = rng.uniform(0.01, 0.05, 3)

    def c_of(a):
        K = bar_stiffness_reference(prob.mesh.nodes, prob.mesh.elements, a, prob.material.E0)
        return dense_weighted_compliance(K, prob.loads.forces, prob.loads.weights, prob.mesh.free_dofs)

    system = assemble_stiffness(prob.mesh, x, prob.material)
    C, g = exact_compliance(system, prob.loads)
    fd = central_difference(c_of, x)
    e1 = abs(C - c_of(x)) / C
    e2 = np.abs(g - fd).max() / np.abs(fd).max()
    out.append(OracleCheck("truss compliance and gradient", e1 < 1e-10 and e2 < 1e-6,
                           f"compliance rel err {e1:.2e}, gradient rel err {e2:.2e}"))

    nodes, elems = rectangle_mesh(3, 3, 3.0, 3.0)
    mesh = Mesh(nodes, elems, QUAD4, np.arange(8))
    filt = build_filter(mesh, 1.6)
    e = np.abs(filt.H.toarray() - filter_weights_reference(mesh.centroids(), 1.6)).max()
    out.append(OracleCheck("density filter weights", e < 1e-14, f"max abs err {e:.2e}"))

    mismatches = 0
    for _ in range(200):
        M = int(rng.integers(2, 12))
        xs = 10.0 ** rng.uniform(-6, 0, M)
        a = float(10.0 ** rng.uniform(-5, -1))
        mismatches += list(discrete_filter_standard(xs, a)) != standard_filter_reference(xs, a)
        n_f = int(rng.integers(1, 6))
        trace = [10.0 ** rng.uniform(-6, 0, M) for _ in range(20)]
        st = FilterState(a, n_f)
        got = []
        for xk in trace:
            y, st = discrete_filter_stochastic(xk, st)
            got.append(list(y))
        mismatches += got != stochastic_filter_reference(trace, a, n_f)
    out.append(OracleCheck("discrete filters", mismatches == 0, f"{mismatches} mismatches in 400 cases"))
    return out
