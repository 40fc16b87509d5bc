"""
Operator-form and dense linear algebra: conjugate gradients, symmetric spectra
and condition numbers.

Matrix-free maps are exposed as ``scipy.sparse.linalg.LinearOperator`` objects
built from batched row-vector functions (``apply(X)`` with ``X`` of shape
``(batch, dim_in)``), the convention used by every operator in this package.
Spectral quantities are always computed in binary64.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator

from surrogate_services.errors import NumericalFailure, UsageError

logger = logging.getLogger(__name__)

BatchedMap = Callable[[np.ndarray], np.ndarray]


def make_operator(dim_in: int, dim_out: int, apply: BatchedMap,
                  apply_adjoint: BatchedMap, dtype=np.float64) -> LinearOperator:
    """
    Wraps a pair of batched maps as a scipy ``LinearOperator`` of shape (dim_out, dim_in).

    Args:
        dim_in: Length of input vectors.
        dim_out: Length of output vectors.
        apply: Maps ``(batch, dim_in)`` to ``(batch, dim_out)``.
        apply_adjoint: Maps ``(batch, dim_out)`` to ``(batch, dim_in)``.
        dtype: Scalar type reported by the operator.
    """
    return LinearOperator(
        shape=(dim_out, dim_in),
        matvec=lambda x: apply(np.asarray(x).reshape(1, -1))[0],
        rmatvec=lambda v: apply_adjoint(np.asarray(v).reshape(1, -1))[0],
        matmat=lambda X: apply(np.asarray(X).T).T,
        rmatmat=lambda V: apply_adjoint(np.asarray(V).T).T,
        dtype=np.dtype(dtype),
    )


def densify(op: LinearOperator) -> np.ndarray:
    """Dense binary64 matrix of ``op``, obtained by applying it to all unit vectors."""
    n = op.shape[1]
    return np.asarray(op.matmat(np.eye(n, dtype=np.float64)), dtype=np.float64)


def adjoint_mismatch(op: LinearOperator, trials: int = 100, seed: int = 0) -> float:
    """Largest |<Aw, v> - <w, A^T v>| / (|w| |v|) over random binary64 pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        w = rng.standard_normal(op.shape[1])
        v = rng.standard_normal(op.shape[0])
        lhs = float(np.dot(op.matvec(w), v))
        rhs = float(np.dot(w, op.rmatvec(v)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(w) * np.linalg.norm(v)))
    return worst


# --- Conjugate gradients ---

@dataclass(frozen=True)
class CGResult:
    """Outcome of a conjugate gradient solve."""
    x: np.ndarray       # final iterate, dtype of the right-hand side
    iterations: int     # iterations performed
    residual: float     # final |b - Ax| / |b| (binary64)
    converged: bool     # residual <= tol


def _as_matvec(op) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(op, LinearOperator):
        return op.matvec
    if callable(op):
        return op
    raise UsageError("operator must be a LinearOperator or a callable")


def cg_solve(op, rhs: np.ndarray, tol: float, max_iters: int,
             x0: Optional[np.ndarray] = None,
             callback: Optional[Callable[[np.ndarray], None]] = None) -> CGResult:
    """
    Solves ``op x = rhs`` for symmetric positive (semi-)definite ``op`` with plain
    Hestenes-Stiefel conjugate gradients, no preconditioner and no restarts.

    Vectors are kept in the dtype of ``rhs``; step lengths and norms are binary64
    control variables.

    Args:
        op: LinearOperator or callable computing the matrix-vector product.
        rhs: Right-hand side vector.
        tol: Relative residual target |r| <= tol * |rhs|.
        max_iters: Iteration cap.
        x0: Optional starting vector (zero otherwise).
        callback: Called with every new iterate.

    Returns:
        CGResult with the iterate, the iteration count and the final relative residual.

    Raises:
        UsageError: dimension mismatch between ``op`` and ``rhs``.
        NumericalFailure: NaN/inf in the residual or a non-positive curvature p^T A p.
    """
    rhs = np.asarray(rhs)
    if rhs.ndim != 1:
        raise UsageError(f"rhs must be a vector, got shape {rhs.shape}")
    if isinstance(op, LinearOperator) and op.shape != (rhs.size, rhs.size):
        raise UsageError(f"operator shape {op.shape} does not match rhs length {rhs.size}")
    if max_iters < 0:
        raise UsageError("max_iters must be non-negative")
    matvec = _as_matvec(op)
    dtype = rhs.dtype

    x = np.zeros_like(rhs) if x0 is None else np.asarray(x0, dtype=dtype).copy()
    if x.shape != rhs.shape:
        raise UsageError(f"x0 shape {x.shape} does not match rhs shape {rhs.shape}")
    r = rhs - np.asarray(matvec(x), dtype=dtype) if x0 is not None else rhs.copy()
    b_norm = float(np.linalg.norm(rhs.astype(np.float64)))
    if not np.isfinite(b_norm):
        raise NumericalFailure("non-finite right-hand side in conjugate gradients", b_norm)
    if b_norm == 0.0:
        return CGResult(x=np.zeros_like(rhs), iterations=0, residual=0.0, converged=True)

    p = r.copy()
    rr = float(np.dot(r.astype(np.float64), r.astype(np.float64)))
    if not np.isfinite(rr):
        raise NumericalFailure("NaN in conjugate gradient residual", rr)
    residual = np.sqrt(rr) / b_norm
    iterations = 0
    while residual > tol and iterations < max_iters:
        # curvature from the unrounded product, the update from its working-precision copy
        Ap_raw = np.asarray(matvec(p))
        pAp = float(np.dot(p.astype(np.float64), Ap_raw.astype(np.float64)))
        Ap = Ap_raw.astype(dtype)
        if not np.isfinite(pAp):
            raise NumericalFailure("non-finite curvature in conjugate gradients", pAp)
        if pAp <= 0.0:
            raise NumericalFailure("conjugate gradients met non-positive curvature", pAp)
        alpha = rr / pAp
        x = (x + dtype.type(alpha) * p).astype(dtype)
        r = (r - dtype.type(alpha) * Ap).astype(dtype)
        rr_new = float(np.dot(r.astype(np.float64), r.astype(np.float64)))
        iterations += 1
        if not np.isfinite(rr_new):
            raise NumericalFailure("NaN in conjugate gradient residual", rr_new)
        if callback is not None:
            callback(x)
        residual = np.sqrt(rr_new) / b_norm
        p = (r + dtype.type(rr_new / rr) * p).astype(dtype)
        rr = rr_new
        logger.debug("cg iteration %d residual %.3e", iterations, residual)

    return CGResult(x=x, iterations=iterations, residual=float(residual), converged=residual <= tol)


# --- Symmetric spectra ---

def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise UsageError(f"expected a square matrix, got shape {m.shape}")
    scale = np.max(np.abs(m)) if m.size else 0.0
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-10 * max(scale, np.finfo(float).tiny):
        raise UsageError("matrix is not symmetric")
    return m


def symmetric_eigenpairs(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    m = _check_symmetric(m)
    return scipy.linalg.eigh(0.5 * (m + m.T))


def sym_eig_extremal(m: np.ndarray) -> tuple[float, float]:
    """
    Smallest and largest eigenvalue of a symmetric matrix, from a full binary64
    eigendecomposition.

    Raises:
        UsageError: ``m`` is not symmetric within 1e-10 * max|m|.
    """
    m = _check_symmetric(m)
    eigenvalues = scipy.linalg.eigh(0.5 * (m + m.T), eigvals_only=True)
    return float(eigenvalues[0]), float(eigenvalues[-1])


def condition_number(m: np.ndarray, nonzero_only: bool = False,
                     rel_threshold: float = 1e-8) -> float:
    """
    Spectral condition number lambda_max / lambda_min of a symmetric matrix.

    Args:
        m: Symmetric positive definite matrix (semi-definite with ``nonzero_only``).
        nonzero_only: Restrict to eigenvalues above ``rel_threshold * lambda_max``,
            i.e. measure the conditioning on the orthogonal complement of the kernel.
        rel_threshold: Kernel cut-off relative to lambda_max.

    Raises:
        NumericalFailure: ``lambda_min <= 0`` without ``nonzero_only``.
    """
    if not nonzero_only:
        lam_min, lam_max = sym_eig_extremal(m)
        if lam_min <= 0.0:
            raise NumericalFailure("matrix is not positive definite", lam_min)
        return lam_max / lam_min
    m = _check_symmetric(m)
    eigenvalues = scipy.linalg.eigh(0.5 * (m + m.T), eigvals_only=True)
    lam_max = eigenvalues[-1]
    if lam_max <= 0.0:
        raise NumericalFailure("matrix has no positive spectrum", float(lam_max))
    kept = eigenvalues[eigenvalues > rel_threshold * lam_max]
    return float(lam_max / kept[0])


def singular_value_ratio(m: np.ndarray, rel_threshold: float = 1e-8) -> float:
    """sigma_max / sigma_min over the singular values above ``rel_threshold * sigma_max``."""
    s = scipy.linalg.svdvals(np.asarray(m, dtype=np.float64))
    if s.size == 0 or s[0] == 0.0:
        raise NumericalFailure("matrix has no nonzero singular values")
    kept = s[s > rel_threshold * s[0]]
    return float(s[0] / kept[-1])
