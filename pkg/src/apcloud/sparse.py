"""Row-compressed assembly and a Krylov solve for the nonsymmetric node systems.

Storage and iterations are delegated to ``scipy.sparse``; this module fixes the
canonical form, the Jacobi preconditioning and the residual contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


BICGSTAB_RESTARTS = 8


class AssemblyError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, stage=None):
        super().__init__(message)
        self.residual = residual
        self.stage = stage


@dataclass
class SparseSystem:
    """``matrix @ x = rhs`` with ``matrix`` in canonical CSR form."""

    matrix: sp.csr_matrix
    rhs: np.ndarray

    @property
    def n(self):
        return self.matrix.shape[0]

    def residual(self, x):
        b_norm = np.linalg.norm(self.rhs)
        r = np.linalg.norm(self.matrix @ x - self.rhs)
        return r / b_norm if b_norm > 0 else r

    def dump_coo(self, path):
        coo = self.matrix.tocoo()
        with open(path, "w", newline="\n") as fh:
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {v:.17g}\n")


def canonical(matrix):
    m = sp.csr_matrix(matrix)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def assemble(rows, n):
    """Build an ``n x n`` CSR matrix from ``(row, [(col, value), ...])`` pairs.

    Duplicate entries within a row are summed; explicit zeros are dropped.
    """
    r_idx, c_idx, vals = [], [], []
    for i, coeffs in rows:
        for j, v in coeffs:
            r_idx.append(i)
            c_idx.append(j)
            vals.append(v)
    return from_triplets(r_idx, c_idx, vals, n)


def from_triplets(rows, cols, values, n):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n):
        raise AssemblyError(f"index out of range for a {n}x{n} matrix")
    return canonical(sp.coo_matrix((values, (rows, cols)), shape=(n, n)))


@dataclass
class SolveReport:
    x: np.ndarray
    residual: float
    iterations: int
    method: str


def _jacobi(matrix):
    d = matrix.diagonal().copy()
    d[d == 0] = 1.0
    inv = 1.0 / d
    return spla.LinearOperator(matrix.shape, matvec=lambda v: inv * v, dtype=float)


def krylov_solve(matrix, rhs, tol=1e-10, max_iter=None, x0=None, stage=None):
    """Solve ``matrix x = rhs`` to relative residual ``tol``.

    BiCGSTAB with Jacobi preconditioning is tried first; restarted GMRES is the
    fallback. The returned residual is recomputed from ``x``.
    """
    matrix = sp.csr_matrix(matrix)
    rhs = np.asarray(rhs, dtype=float)
    n = matrix.shape[0]
    if matrix.shape != (n, n) or rhs.shape != (n,):
        raise ValueError("need a square matrix and a matching right-hand side")
    if tol <= 0:
        raise ValueError("tol must be positive")
    max_iter = max_iter or max(1000, 20 * n)
    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return SolveReport(np.zeros(n), 0.0, 0, "trivial")

    def relres(x):
        return np.linalg.norm(matrix @ x - rhs) / b_norm

    precond = _jacobi(matrix)
    best = (np.zeros(n) if x0 is None else np.asarray(x0, dtype=float), 1.0)
    best = (best[0], relres(best[0]))
    count = [0]

    def callback(_arg):
        count[0] += 1

    # BiCGSTAB stops on its own recurrence residual, which can drift from the
    # true one; a few restarts from the current iterate usually close the gap
    for _ in range(BICGSTAB_RESTARTS):
        x, _info = spla.bicgstab(
            matrix, rhs, x0=best[0], rtol=0.1 * tol, atol=0.0,
            maxiter=max(1, max_iter - count[0]), M=precond, callback=callback,
        )
        res = relres(x)
        if np.isfinite(res) and res <= tol:
            return SolveReport(x, res, count[0], "bicgstab")
        if not (np.isfinite(res) and res < 0.5 * best[1]):
            if np.isfinite(res) and res < best[1]:
                best = (x, res)
            break
        best = (x, res)
        if count[0] >= max_iter:
            break

    restart = min(n, 100)
    x, _info = spla.gmres(
        matrix, rhs, x0=best[0], rtol=0.1 * tol, atol=0.0, restart=restart,
        maxiter=max(1, max_iter // restart), M=precond, callback=callback,
        callback_type="pr_norm",
    )
    res = relres(x)
    if np.isfinite(res) and res <= tol:
        return SolveReport(x, res, count[0], "gmres")
    if np.isfinite(res) and res < best[1]:
        best = (x, res)
    raise ConvergenceError(
        f"Krylov solve did not reach relative residual {tol:g} (best {best[1]:.3g})"
        + (f" in stage '{stage}'" if stage else ""),
        residual=best[1],
        stage=stage,
    )
