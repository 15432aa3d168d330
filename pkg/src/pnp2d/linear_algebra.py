"""Sparse direct solves with residual verification and mean constraints.

All systems are solved by sparse LU (SuperLU via scipy). Every solve is
verified against the relative residual bound

    ||A x - b||_2 <= rtol * (||A||_F ||x||_2 + ||b||_2)

and raises if it fails; callers never receive a silently bad solution.

Pure-Neumann operators (stiffness-like) are singular with a constant
nullspace. They are handled by a one-row bordered extension

    [[A, m], [m^T, 0]] [x; lam] = [b; 0]

whose weight vector ``m`` (typically the mass-matrix row sums) pins the
m-weighted mean of x to zero while the multiplier ``lam`` absorbs any
incompatible component of b.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem_assembly import SparseOperator

logger = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-10


class SolverError(RuntimeError):
    """A linear solve failed or did not meet the residual bound."""


class SingularMatrixError(SolverError):
    """The matrix is singular; pure-Neumann systems need a nullspace weight."""


def _as_matrix(matrix) -> sp.csr_matrix:
    if isinstance(matrix, SparseOperator):
        return matrix.matrix
    return sp.csr_matrix(matrix)


def _check_finite(mat: sp.spmatrix, rhs: np.ndarray) -> None:
    if not np.isfinite(mat.data).all():
        raise ValueError("matrix contains non-finite entries")
    if not np.isfinite(rhs).all():
        raise ValueError("right-hand side contains non-finite entries")


def _verify(mat: sp.spmatrix, x: np.ndarray, b: np.ndarray, rtol: float, what: str) -> None:
    scale = sp.linalg.norm(mat) * np.linalg.norm(x) + np.linalg.norm(b)
    residual = np.linalg.norm(mat @ x - b)
    if residual > rtol * max(scale, np.finfo(float).tiny):
        raise SolverError(
            f"{what}: residual {residual:.3e} exceeds {rtol:.1e} * scale "
            f"({scale:.3e}); the system may be singular or severely "
            f"ill-conditioned (a pure-Neumann operator needs nullspace_weight)"
        )


def _factorize(mat: sp.csc_matrix, permc_spec: str):
    try:
        return spla.splu(mat, permc_spec=permc_spec)
    except RuntimeError as exc:
        if "singular" in str(exc).lower():
            raise SingularMatrixError(
                "matrix is exactly singular; pass nullspace_weight for "
                "pure-Neumann systems"
            ) from exc
        raise


def solve_sparse(
    matrix,
    rhs: np.ndarray,
    *,
    nullspace_weight: np.ndarray | None = None,
    rtol: float = DEFAULT_RTOL,
    permc_spec: str = "COLAMD",
) -> np.ndarray:
    """Direct sparse solve of ``A x = b`` with residual verification.

    With ``nullspace_weight`` m the bordered system is solved instead and the
    solution satisfies ``m @ x == 0``; see :func:`solve_constrained`.
    Deterministic: repeated calls with identical inputs give identical bits.
    """
    if nullspace_weight is not None:
        x, _ = solve_constrained(matrix, rhs, nullspace_weight, rtol=rtol, permc_spec=permc_spec)
        return x
    mat = _as_matrix(matrix)
    rhs = np.asarray(rhs, dtype=float)
    _check_finite(mat, rhs)
    lu = _factorize(mat.tocsc(), permc_spec)
    x = lu.solve(rhs)
    if not np.isfinite(x).all():
        raise SolverError("solver produced non-finite values; matrix is likely singular")
    _verify(mat, x, rhs, rtol, "solve_sparse")
    return x


def solve_constrained(
    matrix,
    rhs: np.ndarray,
    weight: np.ndarray,
    *,
    rtol: float = DEFAULT_RTOL,
    permc_spec: str = "COLAMD",
) -> tuple[np.ndarray, float]:
    """Solve ``A x + lam * m = b`` subject to ``m @ x = 0``.

    Returns (x, lam). For a symmetric A with constant nullspace this is the
    unique solution with zero m-weighted mean; lam absorbs the component of b
    that is incompatible with the singular operator.
    """
    mat = _as_matrix(matrix)
    rhs = np.asarray(rhs, dtype=float)
    weight = np.asarray(weight, dtype=float)
    _check_finite(mat, rhs)
    if not np.isfinite(weight).all():
        raise ValueError("nullspace weight contains non-finite entries")
    bordered = bordered_matrix(mat, weight)
    full_rhs = np.concatenate([rhs, [0.0]])
    lu = _factorize(bordered.tocsc(), permc_spec)
    full_x = lu.solve(full_rhs)
    if not np.isfinite(full_x).all():
        raise SolverError("constrained solver produced non-finite values")
    _verify(bordered, full_x, full_rhs, rtol, "solve_constrained")
    return full_x[:-1], float(full_x[-1])


def bordered_matrix(mat: sp.spmatrix, weight: np.ndarray) -> sp.csr_matrix:
    """Append the constraint row/column ``weight`` to a square matrix."""
    col = sp.csr_matrix(weight.reshape(-1, 1))
    row = sp.csr_matrix(weight.reshape(1, -1))
    return sp.bmat([[mat, col], [row, None]], format="csr")


class PrefactoredSolver:
    """LU factorization of a fixed matrix, reused across right-hand sides.

    Each solve is residual-verified against the stored matrix, so reuse can
    never silently return a wrong solution.
    """

    def __init__(self, matrix, *, rtol: float = DEFAULT_RTOL, permc_spec: str = "COLAMD"):
        self.matrix = _as_matrix(matrix)
        if not np.isfinite(self.matrix.data).all():
            raise ValueError("matrix contains non-finite entries")
        self.rtol = rtol
        self._norm = sp.linalg.norm(self.matrix)
        self._lu = _factorize(self.matrix.tocsc(), permc_spec)
        self.last_residual = 0.0

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if not np.isfinite(rhs).all():
            raise ValueError("right-hand side contains non-finite entries")
        x = self._lu.solve(rhs)
        if not np.isfinite(x).all():
            raise SolverError("prefactored solve produced non-finite values")
        scale = self._norm * np.linalg.norm(x) + np.linalg.norm(rhs)
        self.last_residual = float(np.linalg.norm(self.matrix @ x - rhs))
        if self.last_residual > self.rtol * max(scale, np.finfo(float).tiny):
            raise SolverError(
                f"prefactored solve residual {self.last_residual:.3e} exceeds "
                f"{self.rtol:.1e} * scale ({scale:.3e})"
            )
        return x


class ConstrainedSolver(PrefactoredSolver):
    """Prefactored bordered solve; returns the mean-zero solution part."""

    def __init__(self, matrix, weight: np.ndarray, **kwargs):
        self.weight = np.asarray(weight, dtype=float)
        super().__init__(bordered_matrix(_as_matrix(matrix), self.weight), **kwargs)

    def solve_constrained(self, rhs: np.ndarray) -> tuple[np.ndarray, float]:
        full = self.solve(np.concatenate([np.asarray(rhs, dtype=float), [0.0]]))
        return full[:-1], float(full[-1])


class BlockSystem:
    """A 3x3 block sparse system in the flattening order (c+|C, c-|Q, Phi).

    ``border`` optionally appends a mean constraint acting on the third
    (potential) block only.
    """

    def __init__(self, blocks, border: np.ndarray | None = None):
        if len(blocks) != 3 or any(len(row) != 3 for row in blocks):
            raise ValueError("BlockSystem expects a 3x3 list of blocks")
        self.blocks = blocks
        self.border = border
        sizes = set()
        for row in blocks:
            for blk in row:
                if blk is not None:
                    sizes.add(_as_matrix(blk).shape[0])
        if len(sizes) != 1:
            raise ValueError(f"inconsistent block sizes {sorted(sizes)}")
        self.n = sizes.pop()

    def assemble(self) -> sp.csr_matrix:
        mats = [
            [None if blk is None else _as_matrix(blk) for blk in row]
            for row in self.blocks
        ]
        full = sp.bmat(mats, format="csr")
        if self.border is None:
            return full
        col = np.zeros(3 * self.n)
        col[2 * self.n :] = self.border
        return bordered_matrix(full, col)

    def join(self, u1: np.ndarray, u2: np.ndarray, u3: np.ndarray) -> np.ndarray:
        return np.concatenate([u1, u2, u3])

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n
        return x[:n], x[n : 2 * n], x[2 * n : 3 * n]
