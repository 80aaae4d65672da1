import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nemelec.mesh import (MeshError, build_structured_mesh, check_mesh_admissibility, consistent_mass,
                          isotropic_stiffness, locate_points, lumped_masses, mesh_from_arrays)

PATTERNS = [(2, "crisscross"), (2, "union_jack"), (3, "tet_split")]


def test_crisscross_single_cell():
    m = build_structured_mesh(1)
    assert (m.n_elements, m.n_nodes) == (4, 5)
    assert m.volume == pytest.approx(1.0, rel=1e-14)


def test_crisscross_two_cells_counts():
    # 9 grid corners + 4 cell centres; 4 triangles per cell
    m = build_structured_mesh(2)
    assert (m.n_elements, m.n_nodes) == (16, 13)


def test_kuhn_single_cube():
    m = build_structured_mesh(1, dim=3)
    assert (m.n_elements, m.n_nodes) == (6, 8)
    assert m.volume == pytest.approx(1.0, rel=1e-14)
    assert np.allclose(m.elem_volume, 1.0 / 6.0)


def test_unsupported_pattern_and_bad_input():
    with pytest.raises(MeshError):
        build_structured_mesh(2, pattern="tet_split", dim=2)
    with pytest.raises(MeshError):
        build_structured_mesh(2, pattern="crisscross", dim=3)
    with pytest.raises(MeshError):
        build_structured_mesh(0)
    with pytest.raises(MeshError):
        build_structured_mesh(2, box=[(0, 1), (1, 1)])


@pytest.mark.parametrize("dim,pattern", PATTERNS)
@pytest.mark.parametrize("n", [1, 3, 4])
def test_mesh_invariants(dim, pattern, n):
    box = [(-0.5, 0.5), (0.0, 2.0), (1.0, 1.5)][:dim]
    m = build_structured_mesh(n, box=box, pattern=pattern, dim=dim)
    vol = np.prod([b - a for a, b in box])
    assert np.all(m.elem_volume > 0)
    assert m.elem_volume.sum() == pytest.approx(vol, rel=1e-12)
    assert m.lumped_mass.sum() == pytest.approx(vol, rel=1e-12)
    assert np.all(m.lumped_mass > 0)
    # partition of unity: local basis gradients sum to zero
    assert np.abs(m.elem_grad.sum(axis=1)).max() < 1e-13 * np.abs(m.elem_grad).max()
    # lumped masses equal row sums of the consistent mass matrix
    rows = np.asarray(consistent_mass(m).sum(axis=1)).ravel()
    assert np.allclose(lumped_masses(m), rows, rtol=1e-12, atol=0)
    # boundary nodes lie on the box boundary
    x = m.nodes[m.boundary_nodes]
    on = np.zeros(len(x), dtype=bool)
    for c, (a, b) in enumerate(box):
        on |= np.isclose(x[:, c], a) | np.isclose(x[:, c], b)
    assert on.all()
    assert np.isfinite(m.quasi_uniformity()) and m.quasi_uniformity() > 1


@pytest.mark.parametrize("dim,pattern", PATTERNS)
def test_each_interior_facet_has_two_elements(dim, pattern):
    m = build_structured_mesh(3, pattern=pattern, dim=dim)
    faces = np.concatenate([np.delete(m.elements, s, axis=1) for s in range(dim + 1)])
    _, counts = np.unique(np.sort(faces, axis=1), axis=0, return_counts=True)
    assert set(counts) <= {1, 2}
    # 2-D: 4 sides of 3 edges; 3-D: 6 faces of 9 squares, each cut into 2 triangles
    assert int((counts == 1).sum()) == (12 if dim == 2 else 6 * 9 * 2)


def test_mesh_h_is_max_diameter():
    m = build_structured_mesh(4)
    assert m.h == pytest.approx(0.25)
    m3 = build_structured_mesh(2, dim=3)
    assert m3.h == pytest.approx(np.sqrt(3) / 2)


def test_crisscross_admissibility_is_borderline():
    m = build_structured_mesh(4)
    with pytest.warns(UserWarning):
        rep = check_mesh_admissibility(m)
    # 45-45-90 triangles: right angles at the cell centre, pairs summing to pi
    assert rep.admissible and rep.borderline and not rep.strongly_acute
    assert rep.max_angle_sum == pytest.approx(np.pi, abs=1e-12)
    assert rep.stiffness_offdiag_ok and rep.max_stiffness_offdiag <= 1e-13


def test_equilateral_triangle_strongly_acute():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    m = mesh_from_arrays(nodes, np.array([[0, 1, 2]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = check_mesh_admissibility(m)
    assert rep.strongly_acute and rep.admissible and not rep.borderline


def test_flat_pair_violates_angle_sum():
    # both angles opposite the shared edge are close to pi - 2 atan(0.2) > pi/2
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.1], [0.5, -0.1]])
    m = mesh_from_arrays(nodes, np.array([[0, 1, 2], [1, 0, 3]]))
    rep = check_mesh_admissibility(m)
    expected = 2 * (np.pi - 2 * np.arctan(0.2))
    assert rep.max_angle_sum == pytest.approx(expected, rel=1e-12)
    assert not rep.admissible
    assert not rep.stiffness_offdiag_ok


def test_lumped_masses_examples():
    nodes = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]])  # unit area
    m = mesh_from_arrays(nodes, np.array([[0, 1, 2]]))
    assert np.allclose(lumped_masses(m), 1.0 / 3.0)
    cc = build_structured_mesh(1)
    lm = lumped_masses(cc)
    # each corner touches two quarter triangles of area 1/4
    assert np.allclose(lm[:4], 1.0 / 6.0) and lm[4] == pytest.approx(1.0 / 3.0)


def test_kuhn_report_is_not_strongly_acute():
    rep = check_mesh_admissibility(build_structured_mesh(2, dim=3))
    assert rep.dim == 3 and not rep.strongly_acute and rep.stiffness_offdiag_ok


@pytest.mark.parametrize("dim,pattern", [(2, "crisscross"), (2, "union_jack")])
def test_isotropic_stiffness_offdiagonals_nonpositive(dim, pattern):
    K = isotropic_stiffness(build_structured_mesh(5, pattern=pattern, dim=dim)).tocoo()
    off = K.row != K.col
    assert K.data[off].max() <= 1e-13


def test_mesh_arrays_are_immutable():
    m = build_structured_mesh(2)
    with pytest.raises(ValueError):
        m.nodes[0, 0] = 1.0


def test_degenerate_or_nonconforming_meshes_rejected():
    with pytest.raises(MeshError):
        mesh_from_arrays(np.array([[0.0, 0], [1, 0], [2, 0]]), np.array([[0, 1, 2]]))
    nodes = np.array([[0.0, 0], [1, 0], [0, 1], [1, 1], [0.2, -1]])
    with pytest.raises(MeshError):
        mesh_from_arrays(nodes, np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5)), min_size=1, max_size=20))
def test_locate_points_returns_containing_element(points):
    m = build_structured_mesh(5, box=[(-0.5, 0.5)] * 2)
    x = np.array(points)
    elems, lam = locate_points(m, x)
    assert np.all(lam.min(axis=1) >= -1e-10)
    back = np.einsum("na,nad->nd", lam, m.nodes[m.elements[elems]])
    assert np.allclose(back, x, atol=1e-12)


def test_deterministic_construction():
    a = build_structured_mesh(3, dim=3)
    b = build_structured_mesh(3, dim=3)
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.elements, b.elements)
