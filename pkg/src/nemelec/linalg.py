"""Sparse solvers and the M-matrix audit.

Storage is scipy CSR.  The Krylov loops are written out here so that the
nullspace projection and the stopping rule are under our control; the
incomplete factorizations come from SuperLU.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_TOL = 1e-14

Operator = Callable[[np.ndarray], np.ndarray]


class NoConvergence(RuntimeError):
    def __init__(self, solver: str, iterations: int, residual: float):
        super().__init__(f"{solver} did not converge: {iterations} iterations, relative residual {residual:.3e}")
        self.solver = solver
        self.iterations = iterations
        self.residual = residual


def as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


def inf_norm(A: sp.spmatrix) -> float:
    return float(abs(A).sum(axis=1).max()) if A.nnz else 0.0


def _max_iter(n: int, max_iter: int | None) -> int:
    return max(10 * n, 20) if max_iter is None else max_iter


# ---------------------------------------------------------------------------
# preconditioners


def ilu_preconditioner(A: sp.spmatrix, drop_tol: float = 1e-10, fill_factor: float = 30.0) -> Operator:
    """Incomplete LU from SuperLU (threshold variant)."""
    ilu = spla.spilu(sp.csc_matrix(A), drop_tol=drop_tol, fill_factor=fill_factor)
    return ilu.solve


def factorized(A: sp.spmatrix) -> Operator:
    lu = spla.splu(sp.csc_matrix(A))
    return lu.solve


# ---------------------------------------------------------------------------
# SPD


def _mean_projector(weights: np.ndarray) -> Operator:
    w = np.asarray(weights, dtype=float)
    total = w.sum()

    def project(x: np.ndarray) -> np.ndarray:
        return x - np.dot(w, x) / total

    return project


def pcg(apply_A: Operator, b: np.ndarray, *, precond: Operator | None = None, x0: np.ndarray | None = None,
        tol: float = DEFAULT_TOL, max_iter: int | None = None, project: Operator | None = None,
        anorm: float = 0.0, name: str = "pcg") -> tuple[np.ndarray, int]:
    """Preconditioned CG with optional projection onto a complement of the kernel.

    Stops when ||b - A x|| <= tol * (||b|| + anorm * ||x||), the normwise
    backward error test; ``anorm = 0`` gives the plain relative residual.
    """
    ident = (lambda r: r)
    M = precond or ident
    P = project or ident
    b = P(np.asarray(b, dtype=float))
    bnorm = np.linalg.norm(b)
    n = len(b)
    if bnorm == 0.0:
        return np.zeros(n), 0

    def _done(res, sol):
        return np.linalg.norm(res) <= tol * (bnorm + anorm * np.linalg.norm(sol))

    x = np.zeros(n) if x0 is None else P(np.array(x0, dtype=float))
    r = b - P(apply_A(x))
    if _done(r, x):
        return x, 0
    z = P(M(r))
    p = z.copy()
    rz = np.dot(r, z)
    cap = _max_iter(n, max_iter)
    for it in range(1, cap + 1):
        Ap = P(apply_A(p))
        pAp = np.dot(p, Ap)
        if pAp <= 0:
            raise NoConvergence(name, it, np.linalg.norm(r) / bnorm)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if _done(r, x):
            # confirm with the true residual
            r = b - P(apply_A(x))
            if _done(r, x):
                return x, it
        z = P(M(r))
        rz_new = np.dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergence(name, cap, np.linalg.norm(r) / bnorm)


def solve_spd(A, b: np.ndarray, tol: float = DEFAULT_TOL, nullspace: str = "none", *,
              weights: np.ndarray | None = None, x0: np.ndarray | None = None,
              precond: Operator | None = None, max_iter: int | None = None) -> np.ndarray:
    """PCG for symmetric positive (semi)definite ``A``.

    With ``nullspace="constants"`` the right-hand side and every iterate are
    projected onto the weighted-mean-zero subspace, ``weights`` being the
    lumped masses (unit weights if omitted); the result has zero weighted mean.
    """
    A = as_csr(A)
    n = A.shape[0]
    b = np.asarray(b, dtype=float)
    if not np.any(b):
        return np.zeros(n)
    if nullspace == "constants":
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        euclid = _mean_projector(np.ones(n))
        to_weighted = _mean_projector(w)
        if precond is None:
            shift = 1e-10 * abs(A.diagonal()).max() if A.nnz else 1.0
            precond = factorized(A + shift * sp.identity(n, format="csr"))
        x, _ = pcg(A.dot, b, precond=precond, x0=x0, tol=tol, max_iter=max_iter, project=euclid,
                   anorm=inf_norm(A), name="solve_spd")
        return to_weighted(x)
    if nullspace != "none":
        raise ValueError(f"unknown nullspace {nullspace!r}")
    if precond is None:
        precond = factorized(A)
    x, _ = pcg(A.dot, b, precond=precond, x0=x0, tol=tol, max_iter=max_iter, anorm=inf_norm(A), name="solve_spd")
    return x


# ---------------------------------------------------------------------------
# nonsymmetric


def bicgstab(apply_A: Operator, b: np.ndarray, *, precond: Operator | None = None, x0: np.ndarray | None = None,
             tol: float = DEFAULT_TOL, max_iter: int | None = None, project: Operator | None = None,
             anorm: float = 0.0, name: str = "bicgstab") -> tuple[np.ndarray, int]:
    """Right-preconditioned BiCGStab with the stopping test of :func:`pcg`."""
    ident = (lambda r: r)
    M = precond or ident
    P = project or ident
    b = P(np.asarray(b, dtype=float))
    n = len(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0

    def _done(res, sol):
        return np.linalg.norm(res) <= tol * (bnorm + anorm * np.linalg.norm(sol))

    x = np.zeros(n) if x0 is None else P(np.array(x0, dtype=float))
    r = b - P(apply_A(x))
    if _done(r, x):
        return x, 0
    cap = _max_iter(n, max_iter)
    restarts = 0
    it = 0
    while it < cap:
        r_hat = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        breakdown = False
        while it < cap:
            it += 1
            rho_new = np.dot(r_hat, r)
            if rho_new == 0.0 or omega == 0.0:
                breakdown = True
                break
            beta = (rho_new / rho) * (alpha / omega)
            p = r + beta * (p - omega * v)
            y = P(M(p))
            v = P(apply_A(y))
            denom = np.dot(r_hat, v)
            if denom == 0.0:
                breakdown = True
                break
            alpha = rho_new / denom
            s = r - alpha * v
            x += alpha * y
            if _done(s, x):
                r = b - P(apply_A(x))
                if _done(r, x):
                    return x, it
                s = r
                breakdown = True
                break
            z = P(M(s))
            t = P(apply_A(z))
            tt = np.dot(t, t)
            omega = np.dot(t, s) / tt if tt > 0 else 0.0
            x += omega * z
            r = s - omega * t
            rho = rho_new
            if _done(r, x):
                r = b - P(apply_A(x))
                if _done(r, x):
                    return x, it
        if not breakdown:
            break
        restarts += 1
        if restarts > 20:
            break
        r = b - P(apply_A(x))
    raise NoConvergence(name, it, np.linalg.norm(b - P(apply_A(x))) / bnorm)


def solve_nonsymmetric(A, b: np.ndarray, tol: float = DEFAULT_TOL, *, x0: np.ndarray | None = None,
                       precond: Operator | None = None, max_iter: int | None = None) -> np.ndarray:
    """ILU-preconditioned BiCGStab."""
    A = as_csr(A)
    b = np.asarray(b, dtype=float)
    if not np.any(b):
        return np.zeros(A.shape[0])
    if precond is None:
        precond = ilu_preconditioner(A)
    x, _ = bicgstab(A.dot, b, precond=precond, x0=x0, tol=tol, max_iter=max_iter, anorm=inf_norm(A),
                    name="solve_nonsymmetric")
    return x


# ---------------------------------------------------------------------------
# saddle point


def solve_saddle(A, B, f: np.ndarray, tol: float = DEFAULT_TOL, *, g: np.ndarray | None = None,
                 A_solve: Operator | None = None, schur_precond: Operator | None = None,
                 symmetric: bool | None = None, p0: np.ndarray | None = None,
                 pressure_weights: np.ndarray | None = None,
                 max_iter: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Solve [A B^T; B 0][u; p] = [f; g] by a Krylov method on the pressure Schur complement.

    ``B^T 1 = 0`` is assumed (pressure defined up to constants).  CG is used
    when ``A`` is symmetric, BiCGStab otherwise.  Inner solves use
    ``A_solve`` if given, else a sparse LU of ``A``.  The returned pressure has
    zero mean with respect to ``pressure_weights``.
    """
    B = as_csr(B)
    m = B.shape[0]
    f = np.asarray(f, dtype=float)
    g = np.zeros(m) if g is None else np.asarray(g, dtype=float)
    if not np.any(f) and not np.any(g):
        return np.zeros(B.shape[1]), np.zeros(m)
    if A_solve is None:
        A = as_csr(A)
        A_solve = factorized(A)
        if symmetric is None:
            symmetric = abs(A - A.T).max() <= 1e-14 * abs(A).max()
    if symmetric is None:
        symmetric = False
    BT = B.T.tocsr()

    def schur(p: np.ndarray) -> np.ndarray:
        return B @ A_solve(BT @ p)

    if schur_precond is None:
        if A is not None and sp.issparse(A):
            dA = np.asarray(abs(sp.csr_matrix(A).diagonal()))
            S0 = (B @ sp.diags(1.0 / dA) @ BT).diagonal()
            schur_precond = lambda r: r / S0  # noqa: E731
    project = _mean_projector(np.ones(m))
    rhs = B @ A_solve(f) - g
    krylov = pcg if symmetric else bicgstab
    p, _ = krylov(schur, rhs, precond=schur_precond, x0=p0, tol=tol, max_iter=max_iter, project=project,
                  name="solve_saddle")
    u = A_solve(f - BT @ p)
    w = np.ones(m) if pressure_weights is None else pressure_weights
    p = _mean_projector(w)(p)
    return u, p


# ---------------------------------------------------------------------------
# M-matrix audit


@dataclass
class MMatrixAudit:
    max_offdiag: float
    max_offdiag_at: tuple[int, int] | None
    min_diag: float
    min_diag_at: int | None
    min_dominance_gap: float
    min_dominance_gap_at: int | None
    offdiag_ok: bool
    diag_ok: bool
    dominance_ok: bool

    @property
    def passed(self) -> bool:
        return self.offdiag_ok and self.diag_ok and self.dominance_ok

    @property
    def witness(self):
        if not self.offdiag_ok:
            return self.max_offdiag_at
        if not self.diag_ok:
            return self.min_diag_at
        if not self.dominance_ok:
            return self.min_dominance_gap_at
        return None


def audit_m_matrix(B, tol: float = 1e-13) -> MMatrixAudit:
    """Check non-positive off-diagonals, positive diagonal and row diagonal dominance.

    ``tol`` is relative to the largest entry magnitude.
    """
    B = as_csr(B)
    n = B.shape[0]
    coo = B.tocoo()
    scale = float(abs(coo.data).max()) if coo.nnz else 1.0
    atol = tol * max(scale, np.finfo(float).tiny)
    off = coo.row != coo.col
    if off.any():
        k = int(np.argmax(coo.data[off]))
        max_off = float(coo.data[off][k])
        max_off_at = (int(coo.row[off][k]), int(coo.col[off][k]))
    else:
        max_off, max_off_at = -np.inf, None
    diag = B.diagonal()
    i_min = int(np.argmin(diag))
    offsum = np.bincount(coo.row[off], weights=np.abs(coo.data[off]), minlength=n)
    gap = np.abs(diag) - offsum
    i_gap = int(np.argmin(gap))
    return MMatrixAudit(
        max_offdiag=max_off, max_offdiag_at=max_off_at,
        min_diag=float(diag[i_min]), min_diag_at=i_min,
        min_dominance_gap=float(gap[i_gap]), min_dominance_gap_at=i_gap,
        offdiag_ok=bool(max_off <= atol), diag_ok=bool(diag[i_min] > 0),
        dominance_ok=bool(gap[i_gap] > -atol),
    )
