"""Finite element operators: P1 scalars, P1 directors and the MINI velocity space.

Matrices follow the index convention ``mat[trial, test]`` used for the charge
operators (entries indexed by the trial basis function first).  For the
symmetric operators this makes no difference; for the charge system the
matrix that multiplies the unknown vector is the transpose.
"""
from __future__ import annotations

import math
import weakref
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import TriMesh
from .quadrature import simplex_rule

# ---------------------------------------------------------------------------
# scatter helpers


class Scatter:
    """Precomputed map from element-local blocks to CSR storage."""

    def __init__(self, row_dofs: np.ndarray, col_dofs: np.ndarray, shape: tuple[int, int]):
        m, n = row_dofs.shape[1], col_dofs.shape[1]
        rows = np.repeat(row_dofs[:, :, None], n, axis=2).ravel()
        cols = np.repeat(col_dofs[:, None, :], m, axis=1).ravel()
        keys = rows.astype(np.int64) * shape[1] + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.shape = shape
        self._inverse = inverse
        self._nnz = len(uniq)
        self._indices = (uniq % shape[1]).astype(np.int32)
        urows = uniq // shape[1]
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(urows, minlength=shape[0]))]).astype(np.int32)

    def __call__(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._inverse, weights=local.ravel(), minlength=self._nnz)
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=self.shape)


_CACHE: "weakref.WeakKeyDictionary[TriMesh, dict]" = weakref.WeakKeyDictionary()


def _cache(mesh: TriMesh) -> dict:
    c = _CACHE.get(mesh)
    if c is None:
        c = {}
        _CACHE[mesh] = c
    return c


def p1_scatter(mesh: TriMesh) -> Scatter:
    c = _cache(mesh)
    if "p1" not in c:
        c["p1"] = Scatter(mesh.elements, mesh.elements, (mesh.n_nodes, mesh.n_nodes))
    return c["p1"]


# ---------------------------------------------------------------------------
# reference tensors (exact integrals over the reference simplex, unit volume)


@lru_cache(maxsize=None)
def _ref(dim: int) -> dict:
    m = dim + 2  # P1 vertices plus bubble
    lam, w = simplex_rule(dim, 3 * dim + 2)
    c = float((dim + 1) ** (dim + 1))
    psi = np.empty((len(w), m))
    psi[:, : dim + 1] = lam
    psi[:, dim + 1] = c * lam.prod(axis=1)
    # derivatives with respect to the barycentric coordinates
    dpsi = np.zeros((len(w), m, dim + 1))
    for a in range(dim + 1):
        dpsi[:, a, a] = 1.0
        dpsi[:, dim + 1, a] = c * np.prod(np.delete(lam, a, axis=1), axis=1)
    out = {
        "mass": np.einsum("q,qi,qj->ij", w, psi, psi),
        "stiff": np.einsum("q,qia,qjb->ijab", w, dpsi, dpsi),
        "div": np.einsum("q,qp,qja->pja", w, lam, dpsi),
        "conv": np.einsum("q,qi,ql,qja->ilja", w, psi, psi, dpsi),
        "mixed": np.einsum("q,qb,qi->bi", w, lam, psi),
        "p1mass": np.einsum("q,qa,qb->ab", w, lam, lam),
        "p1cubic": np.einsum("q,qb,qa,qc->bac", w, lam, lam, lam),
    }
    for v in out.values():
        v.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# permittivity


def epsilon_of_d(d_vec: np.ndarray, eps_perp: float, eps_a: float, dim: int) -> np.ndarray:
    """eps_perp * I + eps_a * (P d)(P d)^T with P the projection onto the first ``dim`` axes.

    Accepts a single 3-vector or an array of shape (..., 3).
    """
    pd = np.asarray(d_vec, dtype=float)[..., :dim]
    return eps_perp * np.eye(dim) + eps_a * pd[..., :, None] * pd[..., None, :]


# ---------------------------------------------------------------------------
# P1 operators


def p1_gradient(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    """Elementwise gradient of a P1 field: (E, dim) for scalars, (E, k, dim) for k-vectors."""
    ue = np.asarray(u)[mesh.elements]
    if ue.ndim == 2:
        return np.einsum("ea,ead->ed", ue, mesh.elem_grad)
    return np.einsum("eak,ead->ekd", ue, mesh.elem_grad)


def p1_at_points(mesh: TriMesh, u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Values of a P1 field at barycentric points, shape (E, nq, ...)."""
    ue = np.asarray(u)[mesh.elements]
    return np.einsum("qa,ea...->eq...", lam, ue)


def lumped_mass_matrix(mesh: TriMesh) -> sp.dia_matrix:
    return sp.diags(mesh.lumped_mass)


def p1_mass(mesh: TriMesh) -> sp.csr_matrix:
    c = _cache(mesh)
    if "p1mass" not in c:
        ref = _ref(mesh.dim)["p1mass"]
        c["p1mass"] = p1_scatter(mesh)(mesh.elem_volume[:, None, None] * ref[None])
    return c["p1mass"]


def p1_stiffness(mesh: TriMesh) -> sp.csr_matrix:
    """Isotropic P1 stiffness (grad phi_i, grad phi_j)."""
    c = _cache(mesh)
    if "p1stiff" not in c:
        g = mesh.elem_grad
        local = mesh.elem_volume[:, None, None] * np.einsum("ead,ebd->eab", g, g)
        c["p1stiff"] = p1_scatter(mesh)(local)
    return c["p1stiff"]


def element_epsilon_integral(mesh: TriMesh, d: np.ndarray, eps_perp: float, eps_a: float) -> np.ndarray:
    """int_K eps(d) dx per element with the degree-2 rule (exact for P1 d)."""
    lam, w = simplex_rule(mesh.dim, 2)
    dq = p1_at_points(mesh, d, lam)  # (E, nq, 3)
    eps = epsilon_of_d(dq, eps_perp, eps_a, mesh.dim)
    return mesh.elem_volume[:, None, None] * np.einsum("q,eqij->eij", w, eps)


def assemble_stiffness_aniso(mesh: TriMesh, d: np.ndarray, eps_perp: float, eps_a: float,
                             coeff: float = 1.0) -> sp.csr_matrix:
    """coeff * (eps(d) grad phi_b, grad phi_b')."""
    eps_int = element_epsilon_integral(mesh, d, eps_perp, eps_a)
    g = mesh.elem_grad
    local = coeff * np.einsum("ead,edf,ebf->eab", g, eps_int, g)
    return p1_scatter(mesh)(local)


def assemble_convection_charge(mesh: TriMesh, v: np.ndarray,
                               weight: np.ndarray | None = None) -> sp.csr_matrix:
    """Entries -int (v phi_b) . grad phi_b' with v in the MINI space.

    ``weight`` optionally holds a factor sampled at the points of
    ``simplex_rule(dim, dim + 4)``, shape (E, nq).
    """
    space = mini_space(mesh)
    g = mesh.elem_grad
    if weight is None:
        ve = space.local_coeffs(v)  # (E, m, dim)
        ref = _ref(mesh.dim)["mixed"]  # (d+1, m)
        wv = mesh.elem_volume[:, None, None] * np.einsum("bi,eid->ebd", ref, ve)
    else:
        lam, w = simplex_rule(mesh.dim, mesh.dim + 4)
        vq = space.evaluate(v, lam)
        wv = mesh.elem_volume[:, None, None] * np.einsum("q,eq,qb,eqd->ebd", w, weight, lam, vq)
    local = -np.einsum("ebd,ecd->ebc", wv, g)
    return p1_scatter(mesh)(local)


def effective_gradient(mesh: TriMesh, phi: np.ndarray, shift: np.ndarray | None = None) -> np.ndarray:
    """Elementwise grad(phi) - shift."""
    g = p1_gradient(mesh, phi)
    if shift is not None:
        g = g - np.asarray(shift, dtype=float)[: mesh.dim]
    return g


def assemble_drift_charge(mesh: TriMesh, d: np.ndarray, phi: np.ndarray, eps_perp: float,
                          eps_a: float, sign: int, shift: np.ndarray | None = None,
                          weight: np.ndarray | None = None) -> sp.csr_matrix:
    """Entries sign * int phi_b (eps(d) grad phi) . grad phi_b'.

    ``shift`` is subtracted from grad phi (applied field).  ``weight`` as in
    :func:`assemble_convection_charge`.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    dim = mesh.dim
    gphi = effective_gradient(mesh, phi, shift)
    vol = mesh.elem_volume
    pd = np.asarray(d, dtype=float)[mesh.elements][..., :dim]  # (E, d+1, dim)
    if weight is None:
        cub = _ref(dim)["p1cubic"]  # (b, a, c)
        s = np.einsum("ead,ed->ea", pd, gphi)  # (Pd_a . g)
        # int phi_b eps g = eps_perp g int phi_b + eps_a sum_{a,c} Pd_a (Pd_c . g) int phi_b phi_a phi_c
        flux = eps_perp * gphi[:, None, :] / (dim + 1)
        flux = flux + eps_a * np.einsum("bac,ead,ec->ebd", cub, pd, s)
        flux *= vol[:, None, None]
    else:
        lam, w = simplex_rule(dim, dim + 4)
        dq = np.einsum("qa,eak->eqk", lam, pd)
        eps = epsilon_of_d(dq, eps_perp, eps_a, dim)
        eg = np.einsum("eqij,ej->eqi", eps, gphi)
        flux = vol[:, None, None] * np.einsum("q,eq,qb,eqi->ebi", w, weight, lam, eg)
    local = sign * np.einsum("ebd,ecd->ebc", flux, mesh.elem_grad)
    return p1_scatter(mesh)(local)


def director_field_force(mesh: TriMesh, d_prev: np.ndarray, gphi: np.ndarray) -> np.ndarray:
    """Nodal vector F_z = int grad(phi) (P d_prev . grad(phi)) phi_z (3 components)."""
    dim = mesh.dim
    pd = np.asarray(d_prev)[mesh.elements][..., :dim]
    ref = _ref(dim)["p1mass"]
    s = np.einsum("ead,ed->ea", pd, gphi)  # nodal values of Pd.g per element
    ints = mesh.elem_volume[:, None] * np.einsum("za,ea->ez", ref, s)  # int phi_z (Pd.g)
    F = np.zeros((mesh.n_nodes, 3))
    contrib = ints[:, :, None] * gphi[:, None, :]
    for c in range(dim):
        F[:, c] = np.bincount(mesh.elements.ravel(), weights=contrib[:, :, c].ravel(),
                              minlength=mesh.n_nodes)
    return F


def lumped_l2_project_gradient(mesh: TriMesh, d: np.ndarray) -> np.ndarray:
    """Volume-weighted nodal average of the elementwise gradient.

    Returns (L, 3, dim) for a director field and (L, dim) for a scalar field.
    """
    grads = p1_gradient(mesh, d)
    w = mesh.elem_volume / (mesh.dim + 1)
    flat = grads.reshape(len(grads), -1)
    out = np.zeros((mesh.n_nodes, flat.shape[1]))
    idx = mesh.elements.ravel()
    for col in range(flat.shape[1]):
        vals = np.repeat(w * flat[:, col], mesh.dim + 1)
        out[:, col] = np.bincount(idx, weights=vals, minlength=mesh.n_nodes)
    out /= mesh.lumped_mass[:, None]
    return out.reshape((mesh.n_nodes,) + grads.shape[1:])


def discrete_laplacian(mesh: TriMesh, field: np.ndarray, stiffness: sp.spmatrix | None = None,
                       free_mask: np.ndarray | None = None) -> np.ndarray:
    """-(lumped mass)^{-1} (stiffness @ field), componentwise.

    With ``free_mask`` (Dirichlet mode) the result vanishes at the fixed nodes.
    """
    if stiffness is None:
        stiffness = p1_stiffness(mesh)
    field = np.asarray(field, dtype=float)
    m = mesh.lumped_mass if field.ndim == 1 else mesh.lumped_mass[:, None]
    out = -(stiffness @ field) / m
    if free_mask is not None:
        out[~free_mask] = 0.0
    return out


def mass_lumped_inner(mesh: TriMesh, f: np.ndarray, g: np.ndarray) -> float:
    """sum_z m_z f(z) . g(z)."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape or f.shape[0] != mesh.n_nodes:
        raise ValueError(f"shape mismatch: {f.shape} vs {g.shape} for {mesh.n_nodes} nodes")
    prod = f * g if f.ndim == 1 else (f * g).reshape(f.shape[0], -1).sum(axis=1)
    return float(np.dot(mesh.lumped_mass, prod))


# ---------------------------------------------------------------------------
# MINI space


class MiniSpace:
    """Scalar P1 + bubble space; vector fields are stored as (L + E, dim).

    Rows ``0..L-1`` are nodal values, rows ``L..L+E-1`` bubble coefficients
    (the bubble equals one at the barycenter and vanishes at the nodes).
    """

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        self.dim = mesh.dim
        L, E = mesh.n_nodes, mesh.n_elements
        self.n_nodes = L
        self.size = L + E
        self.dofs = np.hstack([mesh.elements, (L + np.arange(E))[:, None]])
        self.ref = _ref(mesh.dim)
        self._scatter = Scatter(self.dofs, self.dofs, (self.size, self.size))
        self._div_scatter = Scatter(mesh.elements, self.dofs, (L, self.size))
        g = mesh.elem_grad
        self._gram = np.einsum("ead,ebd->eab", g, g)
        self._mass = None
        self._stiff = None
        self._div = None

    def local_coeffs(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v)[self.dofs]

    def basis(self, lam: np.ndarray) -> np.ndarray:
        c = float((self.dim + 1) ** (self.dim + 1))
        return np.hstack([lam, c * lam.prod(axis=1)[:, None]])

    def evaluate(self, v: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Values at barycentric points: (E, nq, ...)."""
        return np.einsum("qi,ei...->eq...", self.basis(lam), self.local_coeffs(v))

    def gradient(self, v: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Gradient at barycentric points: (E, nq, k, dim) for a k-vector field."""
        dim = self.dim
        c = float((dim + 1) ** (dim + 1))
        ve = self.local_coeffs(v)  # (E, m, k)
        g = self.mesh.elem_grad
        grad = np.einsum("eak,ead->ekd", ve[:, : dim + 1], g)[:, None]
        prods = np.stack([c * np.prod(np.delete(lam, a, axis=1), axis=1) for a in range(dim + 1)], axis=1)
        gb = np.einsum("qa,ead->eqd", prods, g)  # bubble gradient
        return grad + ve[:, dim + 1][:, None, :, None] * gb[:, :, None, :]

    def mass(self) -> sp.csr_matrix:
        if self._mass is None:
            self._mass = self._scatter(self.mesh.elem_volume[:, None, None] * self.ref["mass"][None])
        return self._mass

    def stiffness(self) -> sp.csr_matrix:
        if self._stiff is None:
            local = self.mesh.elem_volume[:, None, None] * np.einsum("ijab,eab->eij", self.ref["stiff"], self._gram)
            self._stiff = self._scatter(local)
        return self._stiff

    def divergence(self) -> list[sp.csr_matrix]:
        """B_c[q, j] = int phi_q d_c psi_j, one matrix per component."""
        if self._div is None:
            vol = self.mesh.elem_volume
            g = self.mesh.elem_grad
            self._div = [self._div_scatter(vol[:, None, None] * np.einsum("pja,ea->epj", self.ref["div"], g[:, :, c]))
                         for c in range(self.dim)]
        return self._div

    def convection(self, w: np.ndarray) -> sp.csr_matrix:
        """Skew form 1/2[((w.grad)psi_j, psi_i) - ((w.grad)psi_i, psi_j)], row = test i."""
        we = self.local_coeffs(w)  # (E, m, dim)
        s = np.einsum("eld,ead->ela", we, self.mesh.elem_grad)
        half = np.einsum("ilja,ela->eij", self.ref["conv"], s)
        local = 0.5 * self.mesh.elem_volume[:, None, None] * (half - np.transpose(half, (0, 2, 1)))
        return self._scatter(local)

    def load_from_p1_times_const(self, rho: np.ndarray, gvec: np.ndarray) -> np.ndarray:
        """int rho g . a for P1 rho and elementwise constant g, returned as (size, dim)."""
        rhoe = np.asarray(rho)[self.mesh.elements]
        ints = self.mesh.elem_volume[:, None] * np.einsum("bi,eb->ei", self.ref["mixed"], rhoe)
        out = np.zeros((self.size, self.dim))
        idx = self.dofs.ravel()
        for c in range(self.dim):
            out[:, c] = np.bincount(idx, weights=(ints * gvec[:, c][:, None]).ravel(), minlength=self.size)
        return out

    def load_weighted(self, values_q: np.ndarray, lam: np.ndarray, w: np.ndarray) -> np.ndarray:
        """int f . a for f sampled at the rule points, values_q shape (E, nq, dim)."""
        psi = self.basis(lam)
        ints = self.mesh.elem_volume[:, None, None] * np.einsum("q,qi,eqd->eid", w, psi, values_q)
        out = np.zeros((self.size, self.dim))
        idx = self.dofs.ravel()
        for c in range(self.dim):
            out[:, c] = np.bincount(idx, weights=ints[:, :, c].ravel(), minlength=self.size)
        return out


def mini_space(mesh: TriMesh) -> MiniSpace:
    c = _cache(mesh)
    if "mini" not in c:
        c["mini"] = MiniSpace(mesh)
    return c["mini"]


def bubble_constant(dim: int) -> float:
    return float((dim + 1) ** (dim + 1))


def reference_volume(dim: int) -> float:
    return 1.0 / math.factorial(dim)
