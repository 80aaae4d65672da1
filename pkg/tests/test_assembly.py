import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nemelec import assembly as asm
from nemelec.mesh import build_structured_mesh, mesh_from_arrays
from nemelec.quadrature import simplex_rule
from oracles import (Element, max_relative_discrepancy, oracle_operators, package_operators,
                     random_operator_data, random_two_element_mesh)


def unit_directors(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1)[:, None]


# ---------------------------------------------------------------------------
# permittivity


def test_epsilon_out_of_plane_director_is_isotropic():
    assert np.array_equal(asm.epsilon_of_d(np.array([0.0, 0, 1]), 1.0, 10.0, 2), np.eye(2))


def test_epsilon_axis_aligned():
    assert np.allclose(asm.epsilon_of_d(np.array([1.0, 0, 0]), 0.1, 10.0, 2), np.diag([10.1, 0.1]))


def test_epsilon_diagonal_director_eigenvalues():
    d = np.ones(3) / np.sqrt(3)
    eps = asm.epsilon_of_d(d, 0.1, 10.0, 3)
    assert np.allclose(eps, 0.1 * np.eye(3) + 10.0 / 3.0 * np.ones((3, 3)))
    assert np.allclose(np.linalg.eigvalsh(eps), [0.1, 0.1, 10.1])


@settings(max_examples=50, deadline=None)
@given(arrays(float, 3, elements=st.floats(-1, 1)), st.floats(0.01, 5), st.floats(0, 50), st.sampled_from([2, 3]))
def test_epsilon_spectrum_bounds(d, ep, ea, dim):
    eps = asm.epsilon_of_d(d, ep, ea, dim)
    ev = np.linalg.eigvalsh(eps)
    assert np.allclose(eps, eps.T)
    top = ep + ea * float(np.sum(d[:dim] ** 2))
    assert ev.min() >= ep - 1e-12 * top and ev.max() <= top * (1 + 1e-12)


# ---------------------------------------------------------------------------
# stiffness


def test_isotropic_reduction_is_the_p1_laplacian():
    m = build_structured_mesh(3)
    d = unit_directors(np.random.default_rng(1), m.n_nodes)
    K = asm.assemble_stiffness_aniso(m, d, 1.0, 0.0, 1.0)
    assert abs(K - asm.p1_stiffness(m)).max() < 1e-14


def test_reference_triangle_laplacian_by_hand():
    m = mesh_from_arrays(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    K = asm.assemble_stiffness_aniso(m, np.tile([0.0, 0.0, 1.0], (3, 1)), 1.0, 0.0).toarray()
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_unit_right_triangle_anisotropic_against_oracle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    m = mesh_from_arrays(nodes, np.array([[0, 1, 2]]))
    d = np.tile([1.0, 0.0, 0.0], (3, 1))
    K = asm.assemble_stiffness_aniso(m, d, 1.0, 1.0).toarray()
    el = Element(nodes)
    x, w = el.points()
    eps = np.diag([2.0, 1.0])
    ref = np.array([[w.sum() * el.grads[a] @ eps @ el.grads[b] for b in range(3)] for a in range(3)])
    assert np.allclose(K, ref, atol=1e-14)


@pytest.mark.parametrize("dim", [2, 3])
def test_stiffness_symmetric_psd_constants_in_kernel(dim):
    rng = np.random.default_rng(dim)
    m = build_structured_mesh(3, dim=dim)
    K = asm.assemble_stiffness_aniso(m, unit_directors(rng, m.n_nodes), 0.1, 25.0, 0.3)
    assert abs(K - K.T).max() <= 1e-13 * abs(K).max()
    assert np.abs(K @ np.ones(m.n_nodes)).max() <= 1e-12 * abs(K).max()
    for _ in range(100):
        x = rng.normal(size=m.n_nodes)
        assert x @ (K @ x) >= -1e-12 * abs(K).max() * (x @ x)


# ---------------------------------------------------------------------------
# charge operators


def test_convection_zero_velocity():
    m = build_structured_mesh(2)
    assert asm.assemble_convection_charge(m, np.zeros((m.n_nodes + m.n_elements, 2))).nnz == 0 or \
        abs(asm.assemble_convection_charge(m, np.zeros((m.n_nodes + m.n_elements, 2)))).max() == 0


def test_convection_constant_velocity_single_element():
    nodes = np.array([[0.0, 0.0], [2.0, 0.5], [0.3, 1.0]])
    m = mesh_from_arrays(nodes, np.array([[0, 1, 2]]))
    vel = np.array([0.7, -1.3])
    v = np.vstack([np.tile(vel, (3, 1)), np.zeros((1, 2))])
    C = asm.assemble_convection_charge(m, v).toarray()
    el = Element(nodes)
    # int phi_b = |K|/3 for P1
    ref = np.array([[-el.volume / 3 * vel @ el.grads[c] for c in range(3)] for b in range(3)])
    assert np.allclose(C, ref, atol=1e-14)
    # transpose applied to ones: sum_b entries = -int v . grad phi_b'
    assert np.allclose(C.T @ np.ones(3), -el.volume * el.grads @ vel, atol=1e-14)


def test_drift_zero_potential_and_sign_symmetry():
    rng = np.random.default_rng(3)
    m = build_structured_mesh(3)
    d = unit_directors(rng, m.n_nodes)
    assert abs(asm.assemble_drift_charge(m, d, np.zeros(m.n_nodes), 0.1, 10.0, 1)).max() == 0
    phi = rng.normal(size=m.n_nodes)
    plus = asm.assemble_drift_charge(m, d, phi, 0.1, 10.0, 1)
    minus = asm.assemble_drift_charge(m, d, phi, 0.1, 10.0, -1)
    assert abs(plus + minus).max() == 0
    with pytest.raises(ValueError):
        asm.assemble_drift_charge(m, d, phi, 0.1, 10.0, 0)


def test_drift_single_element_linear_potential_constant_director():
    nodes = np.array([[0.0, 0.0], [1.0, 0.2], [0.1, 0.9]])
    m = mesh_from_arrays(nodes, np.array([[0, 1, 2]]))
    d = np.tile([0.6, 0.8, 0.0], (3, 1))
    phi = nodes @ np.array([1.5, -0.5])
    B = asm.assemble_drift_charge(m, d, phi, 0.2, 3.0, 1).toarray()
    el = Element(nodes)
    eps = 0.2 * np.eye(2) + 3.0 * np.outer([0.6, 0.8], [0.6, 0.8])
    flux = eps @ np.array([1.5, -0.5])
    ref = np.array([[el.volume / 3 * flux @ el.grads[c] for c in range(3)] for b in range(3)])
    assert np.allclose(B, ref, atol=1e-14)


def test_weighted_variants_reduce_to_unweighted_for_unit_weight():
    rng = np.random.default_rng(4)
    m = build_structured_mesh(2)
    lam, _ = simplex_rule(2, 6)
    one = np.ones((m.n_elements, len(lam)))
    v = rng.normal(size=(m.n_nodes + m.n_elements, 2))
    d = unit_directors(rng, m.n_nodes)
    phi = rng.normal(size=m.n_nodes)
    a = asm.assemble_convection_charge(m, v)
    b = asm.assemble_convection_charge(m, v, one)
    assert abs(a - b).max() < 1e-13
    a = asm.assemble_drift_charge(m, d, phi, 0.1, 5.0, -1)
    b = asm.assemble_drift_charge(m, d, phi, 0.1, 5.0, -1, weight=one)
    assert abs(a - b).max() < 1e-12


@pytest.mark.parametrize("dim", [2, 3])
def test_all_operators_against_brute_force_oracle(dim):
    rng = np.random.default_rng(10 + dim)
    for _ in range(5):
        nodes, elements = random_two_element_mesh(rng, dim)
        mesh = mesh_from_arrays(nodes, elements)
        data = random_operator_data(rng, nodes, elements)
        errs = max_relative_discrepancy(package_operators(mesh, data), oracle_operators(nodes, elements, data))
        assert max(errs.values()) <= 1e-12, errs


# ---------------------------------------------------------------------------
# projection, Laplacian, lumped products


@pytest.mark.parametrize("dim", [2, 3])
def test_projection_reproduces_affine_gradients(dim):
    rng = np.random.default_rng(5)
    m = build_structured_mesh(3, dim=dim)
    G = rng.normal(size=(3, dim))
    d = m.nodes @ G.T + rng.normal(size=3)
    P = asm.lumped_l2_project_gradient(m, d)
    assert np.allclose(P, G[None], atol=1e-13)


def test_projection_of_a_kink_is_volume_weighted():
    # two triangles sharing the edge (1,0)-(0,1)
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    elements = np.array([[0, 1, 2], [1, 3, 2]])
    m = mesh_from_arrays(nodes, elements)
    u = np.array([0.0, 1.0, 0.0, 3.0])  # gradient (1, 0) on the first and (3, 2) on the second
    P = asm.lumped_l2_project_gradient(m, u)
    # shared nodes see both elements with equal areas
    assert np.allclose(P[1], [2.0, 1.0]) and np.allclose(P[2], [2.0, 1.0])
    assert np.allclose(P[0], [1.0, 0.0]) and np.allclose(P[3], [3.0, 2.0])


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_projection_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    m = build_structured_mesh(2)
    d1, d2 = rng.normal(size=(2, m.n_nodes, 3))
    lhs = asm.lumped_l2_project_gradient(m, a * d1 + b * d2)
    rhs = a * asm.lumped_l2_project_gradient(m, d1) + b * asm.lumped_l2_project_gradient(m, d2)
    assert np.allclose(lhs, rhs, atol=1e-11)


def test_discrete_laplacian_of_constants_vanishes():
    m = build_structured_mesh(4)
    assert np.abs(asm.discrete_laplacian(m, np.full((m.n_nodes, 3), 2.5))).max() < 1e-12


def test_discrete_laplacian_of_x_squared_kuhn_mesh_is_exact():
    m = build_structured_mesh(6, dim=3)
    lap = asm.discrete_laplacian(m, m.nodes[:, 0] ** 2)
    assert np.allclose(lap[~m.boundary_mask], 2.0, atol=1e-10)


def test_discrete_laplacian_of_x_squared_converges_weakly_on_crisscross():
    # pointwise values alternate between 1.5 (corners) and 3 (centres); tested against a bump
    errs = []
    for n in (8, 16, 32):
        m = build_structured_mesh(n)
        x = m.nodes
        lap = asm.discrete_laplacian(m, x[:, 0] ** 2)
        y = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
        errs.append(abs(np.sum(m.lumped_mass * lap * y) - 8 / np.pi ** 2))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8) and errs[-1] < 1e-3


def test_discrete_laplacian_linear_and_dirichlet_mask():
    rng = np.random.default_rng(6)
    m = build_structured_mesh(3)
    f, g = rng.normal(size=(2, m.n_nodes, 3))
    assert np.allclose(asm.discrete_laplacian(m, 2 * f - g),
                       2 * asm.discrete_laplacian(m, f) - asm.discrete_laplacian(m, g))
    masked = asm.discrete_laplacian(m, f, free_mask=~m.boundary_mask)
    assert np.all(masked[m.boundary_nodes] == 0)


def test_mass_lumped_inner_examples():
    m = build_structured_mesh(3)
    one = np.ones(m.n_nodes)
    assert asm.mass_lumped_inner(m, one, one) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(ValueError):
        asm.mass_lumped_inner(m, one, one[:-1])


@pytest.mark.parametrize("dim", [2, 3])
def test_lumped_norm_equivalence(dim):
    rng = np.random.default_rng(7)
    m = build_structured_mesh(3, dim=dim)
    M = asm.p1_mass(m)
    for _ in range(50):
        f = rng.normal(size=m.n_nodes)
        lumped = asm.mass_lumped_inner(m, f, f)
        consistent = f @ (M @ f)
        assert lumped >= consistent * (1 - 1e-12)
        assert lumped <= (dim + 2) * consistent * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-2, 2))
def test_mass_lumped_inner_bilinear_symmetric(seed, a):
    rng = np.random.default_rng(seed)
    m = build_structured_mesh(2)
    f, g, h = rng.normal(size=(3, m.n_nodes, 3))
    ip = lambda x, y: asm.mass_lumped_inner(m, x, y)  # noqa: E731
    assert ip(f, g) == pytest.approx(ip(g, f), rel=1e-13, abs=1e-13)
    assert ip(a * f + h, g) == pytest.approx(a * ip(f, g) + ip(h, g), rel=1e-11, abs=1e-11)


# ---------------------------------------------------------------------------
# MINI space


@pytest.mark.parametrize("dim", [2, 3])
def test_mini_evaluation_and_gradient_match_oracle(dim):
    rng = np.random.default_rng(8)
    nodes, elements = random_two_element_mesh(rng, dim)
    m = mesh_from_arrays(nodes, elements)
    space = asm.mini_space(m)
    v = rng.normal(size=(space.size, dim))
    lam, _ = simplex_rule(dim, 3)
    vals = space.evaluate(v, lam)
    grads = space.gradient(v, lam)
    for e, el in enumerate(elements):
        K = Element(nodes[el])
        x = lam @ nodes[el]
        b, gb = K.bubble(x)
        ref = lam @ v[el] + b[:, None] * v[m.n_nodes + e]
        gref = np.einsum("ak,ad->kd", v[el], K.grads)[None] + v[m.n_nodes + e][None, :, None] * gb[:, None, :]
        assert np.allclose(vals[e], ref, atol=1e-13)
        assert np.allclose(grads[e], gref, atol=1e-12)


def test_mini_divergence_annihilates_constants_in_pressure():
    m = build_structured_mesh(3)
    space = asm.mini_space(m)
    for B in space.divergence():
        # B^T 1 = int grad psi_j = 0 for interior velocity dofs (bubbles and interior nodes)
        col = np.ones(m.n_nodes) @ B
        interior = np.ones(space.size, dtype=bool)
        interior[m.boundary_nodes] = False
        assert np.abs(col[interior]).max() < 1e-13


def test_mini_convection_is_skew():
    rng = np.random.default_rng(9)
    m = build_structured_mesh(2)
    C = asm.mini_space(m).convection(rng.normal(size=(m.n_nodes + m.n_elements, 2)))
    assert abs(C + C.T).max() < 1e-13
