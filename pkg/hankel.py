"""
Hankel singular values and the Hankel nuclear-norm regularizer

The regularizer of a layer is the sum of its Hankel singular values. Its
gradient is computed in reverse mode: nuclear-norm gradient on the factor
product S^T R, pulled back to the gramians, through adjoint Lyapunov solves
to (A, B, C) and finally through the rotation parametrization.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import linalg

import config
from exceptions import DimensionError
from gramians import (GramianPair, adjoint_solve, dense_gramians, gramians_block,
                      solve_lyapunov_naive)
from lti_core import RotationSSM, realize, realize_vjp, rotation_blocks

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class RegGradient:
    """Gradient of a scalar penalty w.r.t. the learnable parameters of one layer"""
    d_rho_raw: np.ndarray
    d_alpha_raw: np.ndarray
    d_B: np.ndarray
    d_C: np.ndarray

    def scaled(self, factor: float) -> 'RegGradient':
        return RegGradient(factor * self.d_rho_raw, factor * self.d_alpha_raw,
                           factor * self.d_B, factor * self.d_C)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {'rho_raw': self.d_rho_raw, 'alpha_raw': self.d_alpha_raw,
                'B_learn': self.d_B, 'C': self.d_C}


@dataclass(eq=False)
class HsvReport:
    """Per-layer descending Hankel singular values and their energies"""
    sigmas: List[np.ndarray]
    layer_dims: List[int]
    energies: List[float] = field(default=None)

    def __post_init__(self):
        self.sigmas = [np.asarray(s, dtype=float) for s in self.sigmas]
        for s in self.sigmas:
            if np.any(s < 0) or np.any(np.diff(s) > 0):
                raise DimensionError("HSV vectors must be nonnegative and sorted descending")
        if self.energies is None:
            self.energies = [float(np.sum(s)) for s in self.sigmas]

    @property
    def depth(self) -> int:
        return len(self.sigmas)

    def tail(self, layer: int, r: int) -> float:
        return float(np.sum(self.sigmas[layer][r:]))

    def to_rows(self) -> List[Dict[str, float]]:
        """CSV rows: layer, index (1-based), sigma, cumulative_energy_fraction."""
        rows = []
        for layer, (s, energy) in enumerate(zip(self.sigmas, self.energies)):
            cumulative = np.cumsum(s)
            for i, sigma in enumerate(s):
                fraction = cumulative[i] / energy if energy > 0 else 0.0
                rows.append({
                    'layer': layer,
                    'index': i + 1,
                    'sigma': float(sigma),
                    'cumulative_energy_fraction': float(fraction),
                })
        return rows


def _factored_svd(gp: GramianPair):
    R, S = gp.chol_P, gp.chol_Q
    Phi, sigma, Psi_t = linalg.svd(S.T @ R, lapack_driver='gesvd')
    return R, S, Phi, sigma, Psi_t.T


def hankel_singular_values(P: np.ndarray, Q: np.ndarray, jitter: float = config.CHOLESKY_JITTER) -> np.ndarray:
    """Singular values of S^T R where R R^T = P and S S^T = Q (descending)."""
    gp = GramianPair(P, Q, jitter)
    return linalg.svd(gp.chol_Q.T @ gp.chol_P, compute_uv=False)


def layer_hsvs(layer: RotationSSM, workers: int = 1) -> np.ndarray:
    """
    HSVs of a rotation layer via the block solver

    Padded states are decoupled and carry exact zeros, so they are removed
    before factoring and reported as trailing zeros.
    """
    gp = gramians_block(layer, workers)
    keep = ~layer.padded
    P = gp.P[np.ix_(keep, keep)]
    Q = gp.Q[np.ix_(keep, keep)]
    sigma = hankel_singular_values(P, Q)
    return np.concatenate([sigma, np.zeros(layer.n - sigma.size)])


def floor_sigmas(sigma: np.ndarray, floor: float = config.HSV_FLOOR) -> np.ndarray:
    sigma = np.sort(np.clip(np.asarray(sigma, dtype=float), 0.0, None))[::-1]
    if sigma.size and sigma[0] > 0:
        sigma = np.where(sigma < floor * sigma[0], 0.0, sigma)
    return sigma


def hsv_report(sigmas: Sequence[np.ndarray], floor: float = config.HSV_FLOOR) -> HsvReport:
    """Build a report from raw per-layer HSVs, zeroing values below floor * sigma_1."""
    floored = [floor_sigmas(s, floor) for s in sigmas]
    return HsvReport(floored, [s.size for s in floored])


def layers_hsv_report(layers: Sequence[RotationSSM], workers: int = 1) -> HsvReport:
    return hsv_report(_map_layers(layer_hsvs, layers, workers))


def _map_layers(fn, layers, workers):
    if workers > 1 and len(layers) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(layers))) as pool:
            return list(pool.map(fn, layers))
    return [fn(layer) for layer in layers]


def hankel_nuclear_norm(layers: Sequence[RotationSSM], workers: int = 1) -> float:
    """Sum over layers of the sum of Hankel singular values."""
    return float(sum(np.sum(s) for s in _map_layers(layer_hsvs, layers, workers)))


def reg_value_and_gradient(
    layer: RotationSSM,
    solver: str = 'block',
    workers: int = 1,
) -> Tuple[float, RegGradient]:
    """
    Sum of HSVs of one layer and its gradient w.r.t. the raw parameters

    With M = S^T R = Phi Sigma Psi^T the nuclear norm equals
    tr (R^T Q R)^(1/2) = tr (S^T P S)^(1/2), so its gradients w.r.t. the
    gramians are G_Q = 1/2 R Psi Sigma^-1 Psi^T R^T and
    G_P = 1/2 S Phi Sigma^-1 Phi^T S^T (positive sigmas only). The adjoints
    Lam (A^T Lam A - Lam + G_P = 0) and Lam~ (A Lam~ A^T - Lam~ + G_Q = 0)
    then give dB = 2 Lam B, dC = 2 C Lam~ and dA = 2 (Lam A P + Q A Lam~).

    Args:
        layer: Rotation layer
        solver: 'block' (structured, O(n^2) solves) or 'naive' (Kronecker oracle, small n)
        workers: Threads for the block solves

    Returns:
        Tuple (value, RegGradient)
    """
    if solver == 'block':
        gp = gramians_block(layer, workers)
        structured = layer
        A = None
    elif solver == 'naive':
        dense = realize(layer)
        A = dense.A
        gp = GramianPair(solve_lyapunov_naive(A, dense.B @ dense.B.T),
                         solve_lyapunov_naive(A.T, dense.C.T @ dense.C))
        structured = None
    else:
        raise ValueError(f"Unknown solver: {solver}")

    R, S, Phi, sigma, Psi = _factored_svd(gp)
    value = float(np.sum(sigma))
    q = layer.q
    if value == 0.0:
        return 0.0, RegGradient(np.zeros(q), np.zeros(q), np.zeros_like(layer.B_learn), np.zeros_like(layer.C))

    keep = sigma > config.HSV_FLOOR * sigma[0]
    inv = 1.0 / sigma[keep]
    RPsi = R @ Psi[:, keep]
    SPhi = S @ Phi[:, keep]
    G_Q = 0.5 * (RPsi * inv) @ RPsi.T
    G_P = 0.5 * (SPhi * inv) @ SPhi.T

    Lam = adjoint_solve(A, G_P, transpose=True, params=structured, workers=workers)
    Lam_t = adjoint_solve(A, G_Q, transpose=False, params=structured, workers=workers)

    blocks = rotation_blocks(layer.rho, layer.alpha)

    def grid(X):
        return X.reshape(q, 2, q, 2).transpose(0, 2, 1, 3)

    # diagonal blocks of Lam A P and Q A Lam~ (A is block diagonal)
    d_blocks = 2.0 * (np.einsum('ijab,jbc,jicd->iad', grid(Lam), blocks, grid(gp.P))
                      + np.einsum('ijab,jbc,jicd->iad', grid(gp.Q), blocks, grid(Lam_t)))
    d_rho_raw, d_alpha_raw = realize_vjp(layer, d_blocks)
    d_B = 2.0 * Lam @ layer.B
    d_C = 2.0 * layer.C @ Lam_t
    return value, RegGradient(d_rho_raw, d_alpha_raw, d_B[:, 1:], d_C)


def l1_block_penalty(layer: RotationSSM) -> Tuple[float, RegGradient]:
    """
    Sum of absolute entries of the diagonal 2x2 blocks of A

    Comparison penalty; it ignores B and C entirely.
    """
    rho, alpha = layer.rho, layer.alpha
    c, s = np.cos(alpha), np.sin(alpha)
    value = float(np.sum(2.0 * np.abs(rho) * (np.abs(c) + np.abs(s))))
    d_rho = 2.0 * np.sign(rho) * (np.abs(c) + np.abs(s))
    d_alpha = 2.0 * np.abs(rho) * (-np.sign(c) * s + np.sign(s) * c)
    d_rho_raw = d_rho * (1.0 - rho ** 2) * layer.rho_mask
    d_alpha_raw = d_alpha * (np.pi / 2.0) * (1.0 - np.tanh(layer.alpha_raw) ** 2)
    return value, RegGradient(d_rho_raw, d_alpha_raw, np.zeros_like(layer.B_learn), np.zeros_like(layer.C))


def dense_hsvs(sys, method: str = 'scipy') -> np.ndarray:
    """HSVs of an arbitrary dense system via dense gramians."""
    gp = dense_gramians(sys, method)
    return hankel_singular_values(gp.P, gp.Q)
