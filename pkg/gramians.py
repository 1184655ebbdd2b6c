"""
Controllability and observability gramians

Two solvers for the discrete Lyapunov equation A X A^T - X + M = 0:
the Kronecker oracle for tiny dense systems and the block solver that
exploits the 2x2 rotation structure (q(q+1)/2 independent 4x4 solves).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg

import config
from exceptions import DimensionError, NumericalError, UnstableSystemError
from lti_core import DenseSSM, RotationSSM, rotation_blocks, spectral_radius

logger = logging.getLogger(__name__)


def cholesky_psd(M: np.ndarray, jitter: float = config.CHOLESKY_JITTER) -> np.ndarray:
    """
    Lower-triangular factor F with F F^T = M for symmetric PSD M

    Tries a plain Cholesky first. Semidefinite inputs (padded states,
    uncontrollable directions) fall back to an eigenvalue clip followed by a
    QR step that restores the triangular shape.

    Args:
        M: Symmetric positive semidefinite matrix
        jitter: Relative tolerance for negative eigenvalues

    Returns:
        Lower-triangular factor
    """
    M = 0.5 * (M + M.T)
    scale = np.linalg.norm(M, 2) if M.size else 0.0
    if scale == 0.0:
        return np.zeros_like(M)
    try:
        F = linalg.cholesky(M, lower=True)
        if np.all(np.isfinite(F)):
            return F
    except linalg.LinAlgError:
        pass

    w, V = linalg.eigh(M)
    if w[0] < -jitter * scale:
        raise NumericalError(
            f"Matrix is indefinite: smallest eigenvalue {w[0]:.3e} (norm {scale:.3e})"
        )
    logger.debug(f"Cholesky fell back to eigen-clip (min eigenvalue {w[0]:.3e})")
    half = V * np.sqrt(np.clip(w, 0.0, None))
    _, R = linalg.qr(half.T, mode='economic')
    return R.T


@dataclass(eq=False)
class GramianPair:
    """Gramians P (controllability) and Q (observability) with lazy Cholesky factors"""
    P: np.ndarray
    Q: np.ndarray
    jitter: float = field(default=config.CHOLESKY_JITTER)

    @cached_property
    def chol_P(self) -> np.ndarray:
        return cholesky_psd(self.P, self.jitter)

    @cached_property
    def chol_Q(self) -> np.ndarray:
        return cholesky_psd(self.Q, self.jitter)


def solve_lyapunov_naive(A: np.ndarray, M: np.ndarray) -> np.ndarray:
    """
    Solve A X A^T - X + M = 0 through the Kronecker system (I - A (x) A) vec X = vec M

    Costs O(n^6); kept as the test oracle and capped at small n.
    """
    n = A.shape[0]
    if A.shape != (n, n) or M.shape != (n, n):
        raise DimensionError(f"A {A.shape} and M {M.shape} must both be {n}x{n}")
    if n > config.NAIVE_SOLVER_MAX_N:
        raise DimensionError(f"naive Lyapunov solver is limited to n <= {config.NAIVE_SOLVER_MAX_N}, got {n}")
    if spectral_radius(A) >= 1.0:
        raise UnstableSystemError("naive Lyapunov solve needs a stable A")
    K = np.eye(n * n) - np.kron(A, A)
    if np.linalg.cond(K) > config.KRONECKER_COND_LIMIT:
        raise UnstableSystemError("Kronecker system is near singular")
    X = np.linalg.solve(K, M.reshape(-1)).reshape(n, n)
    return 0.5 * (X + X.T)


def _sylvester_system(Ai: np.ndarray, Aj: np.ndarray) -> np.ndarray:
    k = Ai.shape[0]
    kron = np.einsum('kac,kbd->kabcd', Ai, Aj).reshape(k, 4, 4)
    return np.eye(4) - kron


def solve_sylvester_2x2_batch(Ai: np.ndarray, Aj: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Batched Ai X Aj^T - X + M = 0 for stacks of 2x2 blocks, shape (k, 2, 2)."""
    K = _sylvester_system(Ai, Aj)
    try:
        X = np.linalg.solve(K, M.reshape(-1, 4, 1))[..., 0]
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Singular 4x4 Sylvester system: {e}") from e
    if not np.all(np.isfinite(X)):
        raise NumericalError("Non-finite 4x4 Sylvester solution")
    return X.reshape(-1, 2, 2)


def solve_sylvester_2x2(Ai: np.ndarray, Aj: np.ndarray, Mij: np.ndarray) -> np.ndarray:
    """Solve Ai X Aj^T - X + Mij = 0 for 2x2 blocks by a direct 4x4 LU solve."""
    return solve_sylvester_2x2_batch(Ai[None], Aj[None], Mij[None])[0]


def _chunks(count: int, workers: int):
    bounds = np.linspace(0, count, max(1, min(workers, count)) + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def solve_lyapunov_block(
    rho: np.ndarray,
    alpha: np.ndarray,
    M: np.ndarray,
    transpose: bool = False,
    workers: int = 1,
) -> np.ndarray:
    """
    Block solver for rotation-structured A

    Solves A X A^T - X + M = 0 (or A^T X A - X + M = 0 with transpose=True)
    where A = blockdiag(rho_i R(alpha_i)) and M is symmetric. Only blocks
    i <= j are solved; the lower triangle is mirrored exactly.

    Args:
        rho: Retention per block (clamped to |rho| <= 1 - 1e-6)
        alpha: Angle per block
        M: Symmetric right-hand side, n x n
        transpose: Solve the transposed (observability/adjoint) equation
        workers: Threads sharing the block grid

    Returns:
        Symmetric solution X
    """
    q = rho.shape[0]
    n = 2 * q
    if M.shape != (n, n):
        raise DimensionError(f"M must be {n}x{n}, got {M.shape}")
    rho = np.clip(rho, -config.RHO_CLAMP, config.RHO_CLAMP)
    blocks = rotation_blocks(rho, alpha)
    if transpose:
        blocks = blocks.transpose(0, 2, 1)

    M4 = M.reshape(q, 2, q, 2).transpose(0, 2, 1, 3)
    rows, cols = np.triu_indices(q)
    solved = np.empty((rows.size, 2, 2))

    def work(span):
        a, b = span
        r, c = rows[a:b], cols[a:b]
        solved[a:b] = solve_sylvester_2x2_batch(blocks[r], blocks[c], M4[r, c])

    spans = _chunks(rows.size, workers)
    if len(spans) > 1:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            list(pool.map(work, spans))
    else:
        work(spans[0])

    X4 = np.empty((q, q, 2, 2))
    X4[rows, cols] = solved
    X4[cols, rows] = solved.transpose(0, 2, 1)
    diag = np.arange(q)
    X4[diag, diag] = 0.5 * (X4[diag, diag] + X4[diag, diag].transpose(0, 2, 1))
    return X4.transpose(0, 2, 1, 3).reshape(n, n)


def controllability_gramian_block(params: RotationSSM, workers: int = 1) -> np.ndarray:
    B = params.B
    return solve_lyapunov_block(params.rho, params.alpha, B @ B.T, workers=workers)


def observability_gramian_block(params: RotationSSM, workers: int = 1) -> np.ndarray:
    return solve_lyapunov_block(params.rho, params.alpha, params.C.T @ params.C,
                                transpose=True, workers=workers)


def gramians_block(params: RotationSSM, workers: int = 1) -> GramianPair:
    return GramianPair(
        controllability_gramian_block(params, workers),
        observability_gramian_block(params, workers),
    )


def dense_gramians(sys: DenseSSM, method: str = 'scipy') -> GramianPair:
    """
    Gramians of an arbitrary dense system

    Args:
        sys: Stable system
        method: 'naive' (Kronecker oracle) or 'scipy' (solve_discrete_lyapunov)
    """
    BB, CC = sys.B @ sys.B.T, sys.C.T @ sys.C
    if method == 'naive':
        return GramianPair(solve_lyapunov_naive(sys.A, BB), solve_lyapunov_naive(sys.A.T, CC))
    if method != 'scipy':
        raise ValueError(f"Unknown gramian method: {method}")
    if spectral_radius(sys.A) >= 1.0:
        raise UnstableSystemError("gramians need a stable A")
    P = linalg.solve_discrete_lyapunov(sys.A, BB)
    Q = linalg.solve_discrete_lyapunov(sys.A.T, CC)
    return GramianPair(0.5 * (P + P.T), 0.5 * (Q + Q.T))


def lyapunov_residual(A: np.ndarray, X: np.ndarray, M: np.ndarray) -> float:
    """Relative residual ||A X A^T - X + M||_F / ||M||_F."""
    scale = np.linalg.norm(M)
    res = np.linalg.norm(A @ X @ A.T - X + M)
    return float(res / scale) if scale > 0 else float(res)


def adjoint_solve(A: np.ndarray, G: np.ndarray, transpose: bool, params: Optional[RotationSSM] = None,
                  workers: int = 1) -> np.ndarray:
    """
    Adjoint Lyapunov solve used by reverse-mode differentiation

    With transpose=True solves A^T X A - X + G = 0, otherwise A X A^T - X + G = 0.
    Uses the block solver when the rotation parameters are given.
    """
    if params is not None:
        return solve_lyapunov_block(params.rho, params.alpha, G, transpose=transpose, workers=workers)
    return solve_lyapunov_naive(A.T if transpose else A, G)
