import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochtopo.fem import BAR, LoadSet, Material, Mesh
from stochtopo.gsm import (DegenerateDesignError, FilterState, GroundStructureError, GSMParams, GSMProblem,
                           cleanup_final, discrete_filter_standard, discrete_filter_stochastic,
                           equilibrium_residual, generate_ground_structure, run_gsm,
                           true_compliance_and_gradient_gsm)
from stochtopo.oracles import (bar_stiffness_reference, central_difference, dense_weighted_compliance,
                               prune_reference, standard_filter_reference, stochastic_filter_reference)
from stochtopo.problems import three_bar_params


# ---------------------------------------------------------------- ground structure

def test_square_level_one():
    gs = generate_ground_structure((2, 2), level=1)
    assert len(gs.members) == 6


def test_full_level_box_grid():
    assert len(generate_ground_structure((17, 5), (16.0, 4.0)).members) == 2196


def test_collinear_overlap_excluded():
    gs = generate_ground_structure((3, 1))
    assert sorted(map(tuple, gs.members)) == [(0, 1), (1, 2)]


def _brute_count(nx, ny, level):
    pts = [(i, j) for j in range(ny) for i in range(nx)]
    count = 0
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            dx, dy = abs(pts[b][0] - pts[a][0]), abs(pts[b][1] - pts[a][1])
            if level is not None and max(dx, dy) > level:
                continue
            # reject when any other lattice point lies strictly on the segment
            hit = any((q[0] - pts[a][0]) * (pts[b][1] - pts[a][1]) == (q[1] - pts[a][1]) * (pts[b][0] - pts[a][0])
                      and min(pts[a][0], pts[b][0]) <= q[0] <= max(pts[a][0], pts[b][0])
                      and min(pts[a][1], pts[b][1]) <= q[1] <= max(pts[a][1], pts[b][1])
                      for k, q in enumerate(pts) if k not in (a, b))
            count += not hit
    return count


@pytest.mark.parametrize("shape,level", [((4, 3), None), ((5, 4), 2), ((6, 2), 1), ((4, 4), 3)])
def test_member_count_matches_brute_force(shape, level):
    assert len(generate_ground_structure(shape, level=level).members) == _brute_count(*shape, level)


def test_members_unique_and_nonzero_length():
    gs = generate_ground_structure((5, 3), (4.0, 1.0), level=2)
    assert len({tuple(m) for m in gs.members}) == len(gs.members)
    assert np.all(gs.lengths > 0.0)


def test_three_dimensional_grid():
    gs = generate_ground_structure((2, 2, 2), level=1)
    assert gs.dim == 3
    assert len(gs.members) == 28


def test_void_zone_drops_nodes_and_crossing_bars():
    gs = generate_ground_structure((5, 5), (4.0, 4.0), void_zones=[((0.5, 0.5), (3.5, 3.5))])
    assert len(gs.nodes) == 16
    mid = 0.5 * (gs.nodes[gs.members[:, 0]] + gs.nodes[gs.members[:, 1]])
    assert not np.any(np.all((mid > 0.5) & (mid < 3.5), axis=1))


def test_bad_grid_arguments():
    with pytest.raises(GroundStructureError):
        generate_ground_structure((1,))
    with pytest.raises(GroundStructureError):
        generate_ground_structure((3, 3), level=0)
    with pytest.raises(GroundStructureError):
        generate_ground_structure((1, 1))


# ---------------------------------------------------------------- compliance

@pytest.mark.parametrize("P,L,x,E", [(1.0, 1.0, 1.0, 1.0), (3.0, 2.5, 0.4, 7.0)])
def test_single_bar_closed_form(P, L, x, E):
    mesh = Mesh([[0.0, 0.0], [L, 0.0]], [[0, 1]], BAR, [0, 1, 3])
    f = np.zeros(4)
    f[2] = P
    C, g = true_compliance_and_gradient_gsm(np.array([x]), mesh, LoadSet.equal_weights(f), Material(E0=E))
    assert C == pytest.approx(P**2 * L / (E * x), rel=1e-13)
    assert g[0] == pytest.approx(-P**2 * L / (E * x**2), rel=1e-13)


def test_three_bar_gradient_finite_difference(three_bar, rng):
    x = rng.uniform(0.01, 0.05, 3)
    args = (three_bar.mesh, three_bar.loads, three_bar.material)
    _, g = true_compliance_and_gradient_gsm(x, *args)
    fd = central_difference(lambda y: true_compliance_and_gradient_gsm(y, *args)[0], x)
    np.testing.assert_allclose(g, fd, rtol=1e-6)


def test_three_bar_dense_trace(three_bar, rng):
    x = rng.uniform(0.01, 0.05, 3)
    C, _ = true_compliance_and_gradient_gsm(x, three_bar.mesh, three_bar.loads, three_bar.material)
    K = bar_stiffness_reference(three_bar.mesh.nodes, three_bar.mesh.elements, x, three_bar.material.E0)
    free = three_bar.mesh.free_dofs
    Kf = K[np.ix_(free, free)]
    F = three_bar.loads.F[free]
    assert C == pytest.approx(np.trace(F.T @ np.linalg.solve(Kf, F)), rel=1e-10)
    assert C == pytest.approx(dense_weighted_compliance(K, three_bar.loads.forces, three_bar.loads.weights, free),
                              rel=1e-10)


# ---------------------------------------------------------------- filters

def test_standard_filter_equal_areas():
    x = np.full(5, 0.3)
    np.testing.assert_array_equal(discrete_filter_standard(x, 1e-4), x)


def test_standard_filter_removes_small():
    np.testing.assert_array_equal(discrete_filter_standard(np.array([1.0, 1e-6]), 1e-4), [1.0, 0.0])


def test_standard_filter_rejects_bad_alpha():
    with pytest.raises(ValueError):
        discrete_filter_standard(np.ones(2), 1.0)
    with pytest.raises(DegenerateDesignError):
        discrete_filter_standard(np.zeros(2), 0.1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-8, 1.0), min_size=1, max_size=15), st.floats(1e-5, 0.5))
def test_standard_filter_matches_oracle(xs, alpha):
    assert list(discrete_filter_standard(np.array(xs), alpha)) == standard_filter_reference(xs, alpha)


def _run_stochastic(trace, alpha, n_f):
    state = FilterState(alpha, n_f)
    outs = []
    for x in trace:
        y, state = discrete_filter_stochastic(np.array(x), state)
        outs.append(list(y))
    return outs


def test_stochastic_filter_short_dip_retained():
    n_f = 4
    trace = [[1.0, 1e-6]] * (n_f - 1) + [[1.0, 0.5]] + [[1.0, 1e-6]] * (n_f - 1)
    assert _run_stochastic(trace, 1e-4, n_f)[-1] == [1.0, 1e-6]


def test_stochastic_filter_persistent_dip_removed():
    n_f = 4
    out = _run_stochastic([[1.0, 0.5]] + [[1.0, 1e-6]] * n_f, 1e-4, n_f)
    assert out[-2][1] == 1e-6
    assert out[-1][1] == 0.0


def test_stochastic_filter_removed_stays_removed():
    out = _run_stochastic([[1.0, 1e-6]] * 3 + [[1.0, 0.9]] * 3, 1e-4, 3)
    assert [o[1] for o in out[2:]] == [0.0] * 4


@pytest.mark.parametrize("seed", range(5))
def test_stochastic_filter_matches_window_oracle(seed):
    rng = np.random.default_rng(seed)
    for _ in range(40):
        M = int(rng.integers(2, 10))
        n_f = int(rng.integers(1, 6))
        alpha = float(10 ** rng.uniform(-4, -1))
        trace = [list(10 ** rng.uniform(-5, 0, M)) for _ in range(20)]
        assert _run_stochastic(trace, alpha, n_f) == stochastic_filter_reference(trace, alpha, n_f)


@pytest.mark.parametrize("seed", range(5))
def test_stochastic_filter_conservative(seed):
    # A member dropped by the persistence filter is dropped by the standard
    # filter at each of the last n_f steps.
    rng = np.random.default_rng(100 + seed)
    M, n_f, alpha = 8, 3, 1e-2
    state = FilterState(alpha, n_f)
    trace, removed_sets = [], []
    for _ in range(25):
        x = 10 ** rng.uniform(-3, 0, M)
        trace.append(x)
        before = set() if state.removed is None else set(np.flatnonzero(state.removed))
        _, state = discrete_filter_stochastic(x, state)
        after = set(np.flatnonzero(state.removed))
        assert before <= after
        for e in after - before:
            for past in trace[-n_f:]:
                active = np.ones(M, bool)
                active[list(before)] = False
                assert discrete_filter_standard(past, alpha, active)[e] == 0.0


def test_filter_state_validation():
    with pytest.raises(ValueError):
        FilterState(0.0)
    with pytest.raises(ValueError):
        FilterState(1e-3, 0)


# ---------------------------------------------------------------- cleanup

def test_cleanup_keeps_three_bar_optimum(three_bar, three_bar_standard):
    topo = cleanup_final(three_bar.mesh, three_bar_standard.design.values, three_bar.loads)
    assert list(topo.members) == [0, 1, 2]
    assert topo.in_equilibrium and not topo.rolled_back


def test_cleanup_removes_dangling_bar():
    # Triangle carrying the load, plus a bar to an unloaded free node
    nodes = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.5], [2.0, 0.5]]
    mesh = Mesh(nodes, [[0, 2], [1, 2], [2, 3]], BAR, [0, 1, 2, 3])
    f = np.zeros(8)
    f[5] = -1.0
    topo = cleanup_final(mesh, np.array([1.0, 1.0, 0.5]), LoadSet.equal_weights(f))
    assert list(topo.members) == [0, 1]
    assert list(topo.removed_nodes) == [3]


def test_cleanup_cutoff():
    nodes = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.5], [0.0, 0.5]]
    mesh = Mesh(nodes, [[0, 2], [1, 2], [3, 2]], BAR, [0, 1, 2, 3, 6, 7])
    f = np.zeros(8)
    f[5] = -1.0
    topo = cleanup_final(mesh, np.array([1.0, 1.0, 1e-4]), LoadSet.equal_weights(f))
    assert list(topo.members) == [0, 1]


def test_cleanup_rolls_back_when_equilibrium_breaks():
    # Horizontal load needs the thin bar, which the cutoff drops
    nodes = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.5]]
    mesh = Mesh(nodes, [[0, 2], [1, 2]], BAR, [0, 1, 2, 3])
    mesh2 = Mesh(nodes + [[2.0, 0.5]], [[0, 2], [1, 2], [2, 3]], BAR, [0, 1, 2, 3, 6, 7])
    f = np.zeros(8)
    f[4] = 1.0
    topo = cleanup_final(mesh2, np.array([1.0, 1e-3, 1e-3]), LoadSet.equal_weights(f))
    assert topo.rolled_back
    assert list(topo.members) == [0, 1, 2]
    assert equilibrium_residual(mesh, np.array([0]), LoadSet.equal_weights(f[:6])) > 1e-3


def test_cleanup_degenerate():
    mesh = Mesh([[0.0, 0.0], [1.0, 0.0]], [[0, 1]], BAR, [0, 1, 3])
    with pytest.raises(DegenerateDesignError):
        cleanup_final(mesh, np.zeros(1), LoadSet.equal_weights(np.r_[0, 0, 1.0, 0]))


@pytest.mark.parametrize("seed", range(6))
def test_cleanup_matches_pruning_oracle(seed):
    rng = np.random.default_rng(seed)
    gs = generate_ground_structure((5, 3), (4.0, 2.0), level=1)
    fixed_nodes = [0, 5, 10]
    mesh = gs.mesh(np.r_[[2 * n for n in fixed_nodes], [2 * n + 1 for n in fixed_nodes]])
    f = np.zeros(mesh.n_dofs)
    f[2 * 9 + 1] = -1.0
    x = np.where(rng.uniform(size=len(gs.members)) < 0.5, 1.0, 1e-6)
    keep = x >= 1e-2
    expected = prune_reference(gs.members.tolist(), keep, mesh.n_nodes, 2, fixed_nodes + [9])
    topo = cleanup_final(mesh, x, LoadSet.equal_weights(f), tol=np.inf)
    assert set(topo.members.tolist()) == expected


# ---------------------------------------------------------------- runs

def test_three_bar_standard_optimum(three_bar, three_bar_standard):
    r = three_bar_standard
    assert r.converged
    assert np.all(r.design.values > 1e-3)
    assert r.compliance == pytest.approx(8.1666, abs=5e-4)
    np.testing.assert_allclose(r.design.values, [0.0344, 0.0290, 0.0132], atol=5e-4)
    assert r.design.volume == pytest.approx(three_bar.volume, rel=1e-6)
    assert abs(r.kkt_angle - np.pi) < 1e-3
    assert r.n_solve == 9 * r.n_step == r.solver_count


def test_three_bar_stochastic_damped(three_bar, three_bar_standard):
    r = run_gsm(three_bar, "stochastic", three_bar_params(seed=3, diagnostics=True))
    assert r.converged
    assert r.compliance >= three_bar_standard.compliance * (1 - 1e-6)
    assert abs(r.compliance - three_bar_standard.compliance) / three_bar_standard.compliance < 1e-3
    assert r.n_solve == 6 * r.n_step == r.solver_count
    cos = r.metrics.column("cos_theta")
    assert np.all(cos[~np.isnan(cos)] > 0.0)
    moves = r.metrics.column("move")
    np.testing.assert_allclose(moves[-1], moves[0] / 2.0 ** len(r.damping_events), rtol=1e-12)


def test_three_bar_stochastic_undamped_does_not_converge(three_bar):
    r = run_gsm(three_bar, "stochastic", three_bar_params(seed=3, damping=False, max_steps=500))
    assert not r.converged and r.n_step == 500


def test_filtered_run_removes_members():
    gs = generate_ground_structure((5, 3), (4.0, 2.0), level=2)
    fixed = np.r_[0, 1, 10, 11, 20, 21]
    mesh = gs.mesh(fixed)
    f = np.zeros(mesh.n_dofs)
    f[2 * 9 + 1] = -1.0
    problem = GSMProblem(mesh, LoadSet.equal_weights(f), 1.0, Material())
    for kind in ("standard", "stochastic"):
        r = run_gsm(problem, "standard", GSMParams(filter=kind, alpha_f=1e-3, n_f=3, max_steps=300))
        assert r.active.sum() < len(gs.members)
        assert np.all(r.design.values[~r.active] == 0.0)
        assert np.all(np.diff(r.metrics.column("n_active")) <= 0)


def test_unknown_filter_rejected(three_bar):
    with pytest.raises(ValueError):
        run_gsm(three_bar, "standard", GSMParams(filter="median"))
