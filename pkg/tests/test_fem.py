import numpy as np
import pytest
import scipy.sparse as sp

from stochtopo.fem import (BAR, QUAD4, LoadSet, Material, Mesh, SolveCounter, StiffnessSystem,
                           UnrestrainedStructureError, assemble_stiffness, element_sensitivity_kernel,
                           q4_stiffness, rectangle_mesh)
from stochtopo.oracles import (bar_stiffness_reference, central_difference, dense_weighted_compliance,
                               q4_stiffness_reference)


def patch_mesh(nx=2, ny=2):
    nodes, elems = rectangle_mesh(nx, ny, float(nx), float(ny))
    left = np.flatnonzero(np.isclose(nodes[:, 0], 0.0))
    return Mesh(nodes, elems, QUAD4, np.r_[2 * left, 2 * left + 1])


def test_single_bar_axial_stiffness_is_one():
    mesh = Mesh([[0.0, 0.0], [1.0, 0.0]], [[0, 1]], BAR, [0, 1, 3])
    system = assemble_stiffness(mesh, np.array([1.0]), Material(E0=1.0))
    assert system.K.shape == (1, 1)
    assert system.K[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_void_density_gives_ersatz_modulus():
    mat = Material()
    rho = np.full(5, 1e-3)
    expected = mat.E_min + 1e-3**3 * (mat.E0 - mat.E_min)
    np.testing.assert_allclose(mat.modulus(rho), expected, rtol=1e-14)


def test_q4_matches_gauss_oracle_on_patch():
    mesh = patch_mesh()
    coords = mesh.nodes[mesh.elements]
    K = q4_stiffness(coords, 0.3)
    for e in range(4):
        np.testing.assert_allclose(K[e], q4_stiffness_reference(coords[e], 1.0, 0.3), atol=1e-13)


def test_q4_distorted_element_matches_oracle():
    coords = np.array([[0.0, 0.0], [2.0, 0.3], [1.7, 1.4], [0.2, 1.1]])
    np.testing.assert_allclose(q4_stiffness(coords[None], 0.25)[0],
                               q4_stiffness_reference(coords, 1.0, 0.25), atol=1e-13)


def test_q4_rigid_body_modes_have_zero_energy():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    K = q4_stiffness(coords[None], 0.3)[0]
    tx = np.tile([1.0, 0.0], 4)
    ty = np.tile([0.0, 1.0], 4)
    rot = np.column_stack([-coords[:, 1], coords[:, 0]]).ravel()
    for mode in (tx, ty, rot):
        assert np.abs(K @ mode).max() < 1e-14


def test_uniform_extension_patch():
    mesh = patch_mesh()
    system = assemble_stiffness(mesh, np.ones(4), Material())
    right = np.flatnonzero(np.isclose(mesh.nodes[:, 0], 2.0))
    f = np.zeros(mesh.n_dofs)
    f[2 * right] = [0.5, 1.0, 0.5]
    u = system.solve(f)
    # Constant traction on a clamped-left patch: right edge moves out
    assert np.all(u[2 * right] > 0.0)
    assert u[2 * right][0] == pytest.approx(u[2 * right][2], rel=1e-12)


def test_zero_rhs_gives_zero_displacement():
    mesh = patch_mesh()
    system = assemble_stiffness(mesh, np.full(4, 0.5), Material())
    assert np.all(system.solve(np.zeros(mesh.n_dofs)) == 0.0)


def test_scalar_system():
    mesh = Mesh([[0.0, 0.0], [1.0, 0.0]], [[0, 1]], BAR, [0, 1, 3])
    system = assemble_stiffness(mesh, np.array([2.0]), Material(E0=1.0))
    f = np.zeros(4)
    f[2] = 6.0
    assert system.solve(f)[2] == pytest.approx(3.0, rel=1e-15)


def test_three_bar_solve_matches_dense_oracle(three_bar):
    mesh, mat = three_bar.mesh, three_bar.material
    x = np.full(3, 0.1 / 3.6)
    system = assemble_stiffness(mesh, x, mat)
    K = bar_stiffness_reference(mesh.nodes, mesh.elements, x, mat.E0)
    free = mesh.free_dofs
    for i in range(three_bar.loads.m):
        f = three_bar.loads.forces[:, i]
        u = system.solve(f)
        ref = np.linalg.solve(K[np.ix_(free, free)], f[free])
        np.testing.assert_allclose(u[free], ref, rtol=1e-10, atol=1e-14)


def test_restrained_rhs_rejected(three_bar):
    system = assemble_stiffness(three_bar.mesh, np.ones(3), three_bar.material)
    f = np.zeros(8)
    f[0] = 1.0
    with pytest.raises(ValueError, match="restrained"):
        system.solve(f)


def test_mechanism_raises_unrestrained():
    # Two collinear bars meeting at a free node: transverse mechanism
    mesh = Mesh([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [[0, 1], [1, 2]], BAR, [0, 1, 4, 5])
    system = assemble_stiffness(mesh, np.ones(2), Material())
    f = np.zeros(6)
    f[3] = 1.0
    with pytest.raises(UnrestrainedStructureError):
        system.solve(f)


def test_empty_support_set_rejected():
    with pytest.raises(ValueError, match="unrestrained"):
        Mesh([[0.0, 0.0], [1.0, 0.0]], [[0, 1]], BAR, [])


def test_element_sensitivity_zero_displacements():
    mesh = patch_mesh()
    z = np.zeros(mesh.n_dofs)
    assert element_sensitivity_kernel(mesh, np.full(4, 0.5), Material(), 0, z, z) == 0.0


def test_bar_sensitivity_unit_elongation():
    L = 2.5
    mesh = Mesh([[0.0, 0.0], [L, 0.0]], [[0, 1]], BAR, [0, 1, 3])
    u = np.array([0.0, 0.0, 1.0, 0.0])
    assert element_sensitivity_kernel(mesh, np.array([1.0]), Material(E0=3.0), 0, u, u) == pytest.approx(3.0 / L)


def test_q4_sensitivity_matches_finite_difference(rng):
    mesh = patch_mesh()
    mat = Material()
    rho = rng.uniform(0.3, 0.9, 4)
    u = rng.standard_normal(mesh.n_dofs)
    u[mesh.fixed_dofs] = 0.0

    def energy(r):
        return float(u[mesh.free_dofs] @ assemble_stiffness(mesh, r, mat).K @ u[mesh.free_dofs])

    fd = central_difference(energy, rho)
    for e in range(4):
        got = element_sensitivity_kernel(mesh, rho, mat, e, u, u)
        assert got == pytest.approx(fd[e], rel=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_stiffness_symmetric_positive_definite(seed):
    rng = np.random.default_rng(seed)
    mesh = patch_mesh(3, 2)
    K = assemble_stiffness(mesh, rng.uniform(1e-3, 1.0, 6), Material()).K.toarray()
    np.testing.assert_allclose(K, K.T, atol=1e-14)
    np.linalg.cholesky(K)


def test_energy_identity(three_bar, rng):
    x = rng.uniform(0.01, 0.05, 3)
    system = assemble_stiffness(three_bar.mesh, x, three_bar.material)
    f = three_bar.loads.forces[:, 2]
    u = system.solve(f)
    free = three_bar.mesh.free_dofs
    assert f @ u == pytest.approx(u[free] @ system.K @ u[free], rel=1e-9)


def test_solve_counter_counts_columns(three_bar):
    counter = SolveCounter()
    system = assemble_stiffness(three_bar.mesh, np.ones(3), three_bar.material, counter)
    system.solve(three_bar.loads.forces)
    system.solve(three_bar.loads.forces[:, 0])
    system.solve(three_bar.loads.forces[:, :2], diagnostic=True)
    assert counter.optimization == 10
    assert counter.diagnostic == 2
    assert counter.total == 12


def test_weighted_compliance_dense_oracle(three_bar):
    from stochtopo.sampling import exact_compliance
    x = np.array([0.03, 0.02, 0.01])
    system = assemble_stiffness(three_bar.mesh, x, three_bar.material)
    C, _ = exact_compliance(system, three_bar.loads)
    K = bar_stiffness_reference(three_bar.mesh.nodes, three_bar.mesh.elements, x, three_bar.material.E0)
    ref = dense_weighted_compliance(K, three_bar.loads.forces, three_bar.loads.weights, three_bar.mesh.free_dofs)
    assert C == pytest.approx(ref, rel=1e-10)


def test_sparse_path_matches_dense():
    nodes, elems = rectangle_mesh(40, 30, 4.0, 3.0)
    left = np.flatnonzero(np.isclose(nodes[:, 0], 0.0))
    mesh = Mesh(nodes, elems, QUAD4, np.r_[2 * left, 2 * left + 1])
    rho = np.random.default_rng(0).uniform(0.2, 1.0, mesh.n_elements)
    f = np.zeros(mesh.n_dofs)
    f[-1] = -1.0
    a = assemble_stiffness(mesh, rho, Material(), method="lu").solve(f)
    b = assemble_stiffness(mesh, rho, Material(), method="cholesky").solve(f)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_loadset_weights_validated():
    with pytest.raises(ValueError):
        LoadSet(np.ones((4, 2)), [0.5, 0.6])
    ls = LoadSet.equal_weights(np.ones((4, 4)))
    np.testing.assert_allclose(ls.F, 0.5 * np.ones((4, 4)))
