"""Structured simplicial meshes of axis-aligned boxes."""
from __future__ import annotations

import itertools
import math
import warnings
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class TriMesh:
    """Conforming simplicial mesh with the geometric data used by assembly.

    ``elem_grad[e, a]`` is the constant gradient of the local P1 basis
    function attached to vertex ``a`` of element ``e``.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_nodes: np.ndarray
    elem_volume: np.ndarray
    elem_grad: np.ndarray
    lumped_mass: np.ndarray
    box: tuple[tuple[float, float], ...] = ()
    pattern: str = ""
    n_per_side: int = 0
    boundary_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mask = np.zeros(len(self.nodes), dtype=bool)
        mask[self.boundary_nodes] = True
        self.boundary_mask = mask
        for arr in (self.nodes, self.elements, self.boundary_nodes, self.elem_volume,
                    self.elem_grad, self.lumped_mass, self.boundary_mask):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def volume(self) -> float:
        return float(self.elem_volume.sum())

    @property
    def elem_diameter(self) -> np.ndarray:
        x = self.nodes[self.elements]
        diam = np.zeros(self.n_elements)
        for a, b in itertools.combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(x[:, a] - x[:, b], axis=1))
        return diam

    @property
    def h(self) -> float:
        """Maximal element diameter."""
        return float(self.elem_diameter.max())

    def quasi_uniformity(self) -> float:
        """Ratio of the largest diameter to the smallest inradius."""
        facet_area = np.zeros(self.n_elements)
        x = self.nodes[self.elements]
        for skip in range(self.dim + 1):
            idx = [a for a in range(self.dim + 1) if a != skip]
            facet_area += _simplex_measure(x[:, idx])
        inradius = self.dim * self.elem_volume / facet_area
        return float(self.elem_diameter.max() / inradius.min())


def _simplex_measure(x: np.ndarray) -> np.ndarray:
    """Measure of (k-1)-simplices given vertices x of shape (E, k, D)."""
    edges = x[:, 1:] - x[:, :1]
    gram = np.einsum("eid,ejd->eij", edges, edges)
    k = edges.shape[1]
    return np.sqrt(np.abs(np.linalg.det(gram))) / math.factorial(k)


def _geometry(nodes: np.ndarray, elements: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = nodes[elements]
    jac = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))  # columns are edge vectors
    det = np.linalg.det(jac)
    dim = nodes.shape[1]
    volume = np.abs(det) / math.factorial(dim)
    scale = np.abs(jac).max(axis=(1, 2)) ** dim if len(jac) else np.zeros(0)
    if np.any(np.abs(det) <= 1e-14 * scale):
        raise MeshError("degenerate element")
    inv = np.linalg.inv(jac)
    grad = np.empty((len(elements), dim + 1, dim))
    grad[:, 1:] = inv
    grad[:, 0] = -inv.sum(axis=1)
    return volume, grad


def _facets(elements: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted facet keys and their multiplicity."""
    m = elements.shape[1]
    faces = np.concatenate(
        [np.delete(elements, skip, axis=1) for skip in range(m)], axis=0)
    faces = np.sort(faces, axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    return uniq, counts


def mesh_from_arrays(nodes: np.ndarray, elements: np.ndarray, *,
                     box: Sequence[Sequence[float]] = (), pattern: str = "",
                     n_per_side: int = 0) -> TriMesh:
    nodes = np.ascontiguousarray(nodes, dtype=float)
    elements = np.ascontiguousarray(elements, dtype=np.int64)
    dim = nodes.shape[1]
    if dim not in (2, 3) or elements.shape[1] != dim + 1:
        raise MeshError("need triangles in 2-D or tetrahedra in 3-D")
    volume, grad = _geometry(nodes, elements)
    if np.any(volume <= 0):
        raise MeshError("degenerate element")
    facets, counts = _facets(elements)
    if np.any(counts > 2):
        raise MeshError("non-conforming mesh: facet shared by more than two elements")
    boundary = np.unique(facets[counts == 1])
    mass = np.bincount(elements.ravel(), weights=np.repeat(volume / (dim + 1), dim + 1),
                       minlength=len(nodes))
    if np.any(mass <= 0):
        raise MeshError("node not attached to any element")
    return TriMesh(dim=dim, nodes=nodes, elements=elements, boundary_nodes=boundary,
                   elem_volume=volume, elem_grad=grad, lumped_mass=mass,
                   box=tuple(tuple(map(float, b)) for b in box), pattern=pattern,
                   n_per_side=n_per_side)


def _grid(n: int, box, dim: int) -> tuple[np.ndarray, list[np.ndarray]]:
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in box]
    # lexicographic with the first coordinate running fastest
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.transpose(*reversed(range(dim))).ravel() for m in mesh], axis=1)
    return pts, axes


def build_structured_mesh(n_per_side: int, box: Sequence[Sequence[float]] | None = None,
                          pattern: str | None = None, dim: int = 2) -> TriMesh:
    """Uniform mesh of ``box`` with ``n_per_side`` cells per axis.

    Patterns: ``crisscross`` (2-D, each square cut by both diagonals),
    ``union_jack`` (2-D, alternating diagonals), ``tet_split`` (3-D, six
    tetrahedra per cube sharing the main diagonal).
    """
    if box is None:
        box = [(0.0, 1.0)] * dim
    box = [tuple(map(float, b)) for b in box]
    dim = len(box)
    if pattern is None:
        pattern = "crisscross" if dim == 2 else "tet_split"
    if n_per_side < 1:
        raise MeshError("n_per_side must be >= 1")
    if any(hi <= lo for lo, hi in box):
        raise MeshError("degenerate box")
    n = int(n_per_side)
    if dim == 2 and pattern == "crisscross":
        nodes, elements = _crisscross(n, box)
    elif dim == 2 and pattern == "union_jack":
        nodes, elements = _union_jack(n, box)
    elif dim == 3 and pattern == "tet_split":
        nodes, elements = _kuhn(n, box)
    else:
        raise MeshError(f"pattern {pattern!r} is not available in {dim}-D")
    return mesh_from_arrays(nodes, elements, box=box, pattern=pattern, n_per_side=n)


def _crisscross(n: int, box) -> tuple[np.ndarray, np.ndarray]:
    corners, axes = _grid(n, box, 2)
    cx = 0.5 * (axes[0][:-1] + axes[0][1:])
    cy = 0.5 * (axes[1][:-1] + axes[1][1:])
    CX, CY = np.meshgrid(cx, cy, indexing="xy")
    centers = np.stack([CX.ravel(), CY.ravel()], axis=1)
    nodes = np.vstack([corners, centers])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i, j = i.ravel(), j.ravel()
    c00 = i + (n + 1) * j
    c10 = c00 + 1
    c01 = c00 + n + 1
    c11 = c01 + 1
    c = (n + 1) ** 2 + i + n * j
    tris = np.stack([
        np.stack([c00, c10, c], 1),
        np.stack([c10, c11, c], 1),
        np.stack([c11, c01, c], 1),
        np.stack([c01, c00, c], 1),
    ], axis=1).reshape(-1, 3)
    return nodes, tris


def _union_jack(n: int, box) -> tuple[np.ndarray, np.ndarray]:
    nodes, _ = _grid(n, box, 2)
    tris = []
    for j in range(n):
        for i in range(n):
            c00 = i + (n + 1) * j
            c10, c01 = c00 + 1, c00 + n + 1
            c11 = c01 + 1
            if (i + j) % 2 == 0:
                tris += [(c00, c10, c11), (c00, c11, c01)]
            else:
                tris += [(c00, c10, c01), (c10, c11, c01)]
    return nodes, np.array(tris)


def _kuhn(n: int, box) -> tuple[np.ndarray, np.ndarray]:
    nodes, _ = _grid(n, box, 3)
    stride = np.array([1, n + 1, (n + 1) ** 2])
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    base = (i * stride[0] + j * stride[1] + k * stride[2]).transpose(2, 1, 0).ravel()
    tets = []
    for perm in itertools.permutations(range(3)):
        offs = [0]
        acc = 0
        for axis in perm:
            acc += stride[axis]
            offs.append(acc)
        tets.append(base[:, None] + np.array(offs)[None, :])
    return nodes, np.stack(tets, axis=1).reshape(-1, 4)


def lumped_masses(mesh: TriMesh) -> np.ndarray:
    """m_z = sum over elements containing z of |K|/(d+1)."""
    return mesh.lumped_mass.copy()


def consistent_mass(mesh: TriMesh) -> sp.csr_matrix:
    d = mesh.dim
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    local = mesh.elem_volume[:, None, None] * ref[None]
    return _scatter(mesh, local)


def isotropic_stiffness(mesh: TriMesh) -> sp.csr_matrix:
    g = mesh.elem_grad
    local = mesh.elem_volume[:, None, None] * np.einsum("ead,ebd->eab", g, g)
    return _scatter(mesh, local)


def _scatter(mesh: TriMesh, local: np.ndarray) -> sp.csr_matrix:
    el = mesh.elements
    m = el.shape[1]
    rows = np.repeat(el, m, axis=1).ravel()
    cols = np.tile(el, (1, m)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@dataclass
class AdmissibilityReport:
    dim: int
    admissible: bool
    strongly_acute: bool
    borderline: bool
    max_angle_sum: float | None = None
    interior_edge_angle_sums: np.ndarray | None = None
    max_boundary_opposite_angle: float | None = None
    max_dihedral_angle: float | None = None
    all_dihedral_acute: bool | None = None
    max_stiffness_offdiag: float = 0.0
    stiffness_offdiag_ok: bool = True
    quasi_uniformity: float = 0.0
    notes: list[str] = field(default_factory=list)


def _triangle_angles(x: np.ndarray) -> np.ndarray:
    """Angle at each vertex; x has shape (E, 3, 2)."""
    ang = np.empty(x.shape[:2])
    for a in range(3):
        u = x[:, (a + 1) % 3] - x[:, a]
        v = x[:, (a + 2) % 3] - x[:, a]
        cos = np.einsum("ed,ed->e", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        ang[:, a] = np.arccos(np.clip(cos, -1.0, 1.0))
    return ang


def _dihedral_angles(mesh: TriMesh) -> np.ndarray:
    # interior angle between faces i and j equals pi minus the angle of their normals
    g = mesh.elem_grad
    out = []
    for a, b in itertools.combinations(range(4), 2):
        na = g[:, a] / np.linalg.norm(g[:, a], axis=1)[:, None]
        nb = g[:, b] / np.linalg.norm(g[:, b], axis=1)[:, None]
        cos = -np.einsum("ed,ed->e", na, nb)
        out.append(np.arccos(np.clip(cos, -1.0, 1.0)))
    return np.stack(out, axis=1)


def check_mesh_admissibility(mesh: TriMesh, theta: float = 0.0, tol: float = 1e-12) -> AdmissibilityReport:
    """Delaunay / acuteness report together with the algebraic stiffness test."""
    K = isotropic_stiffness(mesh).tocoo()
    off = K.row != K.col
    max_off = float(K.data[off].max()) if off.any() else -np.inf
    scale = float(np.abs(K.data).max())
    off_ok = max_off <= 1e-13 * max(scale, 1.0)
    q = mesh.quasi_uniformity()
    if mesh.dim == 2:
        ang = _triangle_angles(mesh.nodes[mesh.elements])
        edge_key = {}
        for e, tri in enumerate(mesh.elements):
            for a in range(3):
                key = tuple(sorted((tri[(a + 1) % 3], tri[(a + 2) % 3])))
                edge_key.setdefault(key, []).append(ang[e, a])
        sums = np.array([v[0] + v[1] for v in edge_key.values() if len(v) == 2])
        bdry = np.array([v[0] for v in edge_key.values() if len(v) == 1])
        max_sum = float(sums.max()) if sums.size else 0.0
        max_b = float(bdry.max()) if bdry.size else 0.0
        admissible = max_sum <= np.pi - theta + tol and max_b <= 0.5 * np.pi + tol
        borderline = admissible and (max_sum > np.pi - tol or max_b > 0.5 * np.pi - tol)
        strongly = bool(ang.max() < 0.5 * np.pi - tol)
        rep = AdmissibilityReport(dim=2, admissible=bool(admissible), strongly_acute=strongly,
                                  borderline=bool(borderline), max_angle_sum=max_sum,
                                  interior_edge_angle_sums=sums,
                                  max_boundary_opposite_angle=max_b,
                                  max_stiffness_offdiag=max_off, stiffness_offdiag_ok=bool(off_ok),
                                  quasi_uniformity=q)
        if borderline:
            rep.notes.append("right-angle pairs present: Delaunay but not strictly acute")
            warnings.warn("mesh is only borderline admissible (opposite angles sum to pi)",
                          stacklevel=2)
        return rep
    dih = _dihedral_angles(mesh)
    max_dih = float(dih.max())
    acute = bool(max_dih < 0.5 * np.pi - tol)
    nonobtuse = bool(max_dih <= 0.5 * np.pi + tol)
    rep = AdmissibilityReport(dim=3, admissible=nonobtuse, strongly_acute=acute,
                              borderline=nonobtuse and not acute, max_dihedral_angle=max_dih,
                              all_dihedral_acute=acute, max_stiffness_offdiag=max_off,
                              stiffness_offdiag_ok=bool(off_ok), quasi_uniformity=q)
    if not acute:
        rep.notes.append("dihedral angles reach pi/2; reported, not enforced")
    return rep


def write_mesh_vtk(mesh: TriMesh, path: str | Path) -> None:
    from .io import write_vtk_grid
    write_vtk_grid(mesh, path, {})


def barycentric(mesh: TriMesh, elems: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points ``x`` (N, dim) with respect to elements ``elems`` (N,)."""
    x0 = mesh.nodes[mesh.elements[elems, 0]]
    lam = np.einsum("nad,nd->na", mesh.elem_grad[elems], x - x0)
    lam[:, 0] += 1.0
    return lam


def locate_points(mesh: TriMesh, x: np.ndarray, tol: float = 1e-10,
                  candidates: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Element index and barycentric coordinates for each point.

    Candidates come from the nearest element centroids; points outside the
    mesh are attached to the element where they are least outside.
    """
    from scipy.spatial import cKDTree

    x = np.atleast_2d(np.asarray(x, dtype=float))
    cache = _LOCATORS.get(mesh)
    if cache is None:
        cache = cKDTree(mesh.nodes[mesh.elements].mean(axis=1))
        _LOCATORS[mesh] = cache
    kk = min(candidates, mesh.n_elements)
    _, cand = cache.query(x, k=kk)
    cand = cand.reshape(len(x), kk)
    best = np.full(len(x), -1, dtype=np.int64)
    best_score = np.full(len(x), -np.inf)
    for col in range(kk):
        e = cand[:, col]
        score = barycentric(mesh, e, x).min(axis=1)
        better = (score > best_score + 1e-14) & (best_score < -tol)
        best = np.where(better, e, best)
        best_score = np.where(better, score, best_score)
    return best, barycentric(mesh, best, x)


_LOCATORS: "weakref.WeakKeyDictionary[TriMesh, object]" = weakref.WeakKeyDictionary()
