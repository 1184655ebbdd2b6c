"""
Post-training compression of rotation layers

Square-root balanced truncation, rank selection (energy criterion and the
shared-threshold bisection), diagonalization of reduced systems and the
per-layer error certificate.
"""
import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

import config
from exceptions import ConfigError, DimensionError, UnstableSystemError
from gramians import GramianPair, gramians_block
from hankel import HsvReport
from lti_core import DenseSSM, ImpulseResponse, RotationSSM, realize, spectral_radius
from scan import scan_diagonal

logger = logging.getLogger(__name__)

DENSE_REAL = 'dense_real'
DIAGONAL_COMPLEX = 'diagonal_complex'


@dataclass(eq=False)
class ReducedSSM:
    """
    Reduced-order layer produced by balanced truncation

    dense_real stores (A, B, C, D); diagonal_complex stores the eigenvalues
    lam with complex B and C closed under conjugation.
    """
    mode: str
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    A: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    truncated_tail: float = 0.0
    sigmas: Optional[np.ndarray] = None
    warning: Optional[str] = None

    def __post_init__(self):
        if self.mode == DENSE_REAL and self.A is None:
            raise DimensionError("dense_real reduced system needs A")
        if self.mode == DIAGONAL_COMPLEX and self.lam is None:
            raise DimensionError("diagonal_complex reduced system needs lam")
        if self.mode not in (DENSE_REAL, DIAGONAL_COMPLEX):
            raise DimensionError(f"Unknown reduced mode: {self.mode}")
        if self.truncated_tail < 0:
            raise DimensionError("truncated_tail must be nonnegative")

    @property
    def r(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def spectral_radius(self) -> float:
        if self.mode == DIAGONAL_COMPLEX:
            return float(np.max(np.abs(self.lam)))
        return spectral_radius(self.A)

    def as_dense(self) -> DenseSSM:
        if self.mode != DENSE_REAL:
            raise DimensionError("only dense_real systems have a real dense realization")
        return DenseSSM(self.A, self.B, self.C, self.D)

    def simulate(self, u: np.ndarray, workers: int = 1) -> np.ndarray:
        """Output sequence for time-major inputs (L, m) or (L, batch, m)."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if u.shape[-1] != self.m:
            raise DimensionError(f"input has {u.shape[-1]} channels, system expects {self.m}")
        feedthrough = u @ self.D.T
        if self.mode == DIAGONAL_COMPLEX:
            states = scan_diagonal(self.lam, u @ self.B.T, workers)
            return (states @ self.C.T).real + feedthrough
        x = np.zeros(u.shape[1:-1] + (self.r,))
        y = np.empty(u.shape[:-1] + (self.p,))
        AT, BT, CT = self.A.T, self.B.T, self.C.T
        for k in range(u.shape[0]):
            x = x @ AT + u[k] @ BT
            y[k] = x @ CT
        return y + feedthrough

    def impulse_response(self, taps: int) -> ImpulseResponse:
        h = np.empty((taps, self.p, self.m))
        h[0] = self.D
        X = self.B.astype(complex) if self.mode == DIAGONAL_COMPLEX else self.B.copy()
        for k in range(1, taps):
            h[k] = np.real(self.C @ X)
            X = self.lam[:, None] * X if self.mode == DIAGONAL_COMPLEX else self.A @ X
        return ImpulseResponse(h)


def balancing_projectors(gp: GramianPair, r: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, Optional[str]]:
    """
    Square-root projectors V = R Psi_r Sigma_r^-1/2 and W = S Phi_r Sigma_r^-1/2

    S^T R = Phi Sigma Psi^T with R R^T = P and S S^T = Q, so W^T V = I_r.
    Orders above the numerical rank (sigma <= 1e-14 sigma_1) are clipped.

    Returns:
        Tuple (V, W, sigmas, r_used, warning)
    """
    R, S = gp.chol_P, gp.chol_Q
    Phi, sigma, Psi_t = linalg.svd(S.T @ R, lapack_driver='gesvd')
    numerical_rank = int(np.sum(sigma > config.HSV_FLOOR * sigma[0])) if sigma[0] > 0 else 0
    warning = None
    if r < 1:
        raise ConfigError(f"reduced order must be >= 1, got {r}")
    if r > numerical_rank:
        warning = f"order {r} exceeds numerical rank {numerical_rank}; clipped"
        logger.warning(warning)
        r = numerical_rank
    if r == 0:
        return None, None, sigma, 0, warning
    scale = 1.0 / np.sqrt(sigma[:r])
    V = R @ Psi_t[:r].T * scale
    W = S @ Phi[:, :r] * scale
    return V, W, sigma, r, warning


def balanced_truncation(sys: DenseSSM, gp: GramianPair, r: int) -> ReducedSSM:
    """
    Square-root balanced truncation of order r

    Args:
        sys: Full-order system
        gp: Gramians of sys
        r: Requested order (clipped to the numerical rank with a warning)

    Returns:
        ReducedSSM in dense_real mode with truncated_tail = sum of sigma_i, i > r
    """
    if r > sys.n:
        raise ConfigError(f"reduced order {r} exceeds state dimension {sys.n}")
    V, W, sigma, r_used, warning = balancing_projectors(gp, r)
    if r_used == 0:
        # zero Hankel operator: only the feedthrough survives
        return ReducedSSM(DENSE_REAL, np.zeros((1, sys.m)), np.zeros((sys.p, 1)), sys.D.copy(),
                          A=np.zeros((1, 1)), truncated_tail=0.0, sigmas=sigma, warning=warning)
    A_r = W.T @ sys.A @ V
    radius = spectral_radius(A_r)
    if radius >= 1.0 + 1e-10:
        raise UnstableSystemError(f"reduced system has spectral radius {radius:.12f}")
    return ReducedSSM(
        DENSE_REAL, W.T @ sys.B, sys.C @ V, sys.D.copy(), A=A_r,
        truncated_tail=float(np.sum(sigma[r_used:])), sigmas=sigma, warning=warning,
    )


@dataclass
class EnergyRank:
    rank: int
    achieved_energy: float
    degenerate: bool = False


def rank_by_energy(sigmas: np.ndarray, fraction: float = config.ENERGY_FRACTION) -> EnergyRank:
    """Smallest r whose leading HSVs hold at least `fraction` of the total."""
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.size == 0:
        raise DimensionError("need at least one singular value")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"energy fraction must lie in (0, 1], got {fraction}")
    cumulative = np.cumsum(sigmas)
    total = cumulative[-1]
    if total <= 0.0:
        return EnergyRank(1, 0.0, degenerate=True)
    r = int(np.searchsorted(cumulative, fraction * total, side='left')) + 1
    r = min(max(r, 1), sigmas.size)
    return EnergyRank(r, float(cumulative[r - 1] / total))


@dataclass
class RankPlan:
    """Per-layer reduced orders and how they were chosen"""
    ranks: List[int]
    criterion: str
    achieved_energy: List[float]
    target: Optional[float] = None
    gamma: Optional[float] = None
    iterations: int = 0
    degenerate: List[bool] = field(default_factory=list)

    @property
    def mean_rank(self) -> float:
        return float(np.mean(self.ranks))


def _normalized(report: HsvReport) -> List[np.ndarray]:
    out = []
    for s, e in zip(report.sigmas, report.energies):
        out.append(s / e if e > 0 else np.zeros_like(s))
    return out


def _ranks_at(normalized: Sequence[np.ndarray], gamma: float) -> List[int]:
    return [max(1, int(np.sum(s > gamma))) for s in normalized]


def _achieved(report: HsvReport, ranks: Sequence[int]) -> List[float]:
    return [float(np.sum(s[:r]) / e) if e > 0 else 0.0
            for s, e, r in zip(report.sigmas, report.energies, ranks)]


def allocate_ranks_bisection(
    report: HsvReport,
    target_mean_rank: float,
    eps: float = config.BISECTION_EPS,
    n_max: int = config.BISECTION_MAX_ITER,
) -> RankPlan:
    """
    Shared-threshold rank allocation

    Every layer's HSVs are normalized to unit sum and its rank is the number
    of normalized values above a common threshold gamma (at least 1). Gamma
    is bisected on [0, 1]: it moves up while the mean rank exceeds the
    target. The allocation at the upper bracket is returned, so the mean rank
    never exceeds the target (it is the largest achievable mean <= target).

    Args:
        report: Per-layer HSVs
        target_mean_rank: Allowed mean reduced order
        eps: Stop once |mean - target| <= eps
        n_max: Iteration cap
    """
    if target_mean_rank <= 0:
        raise ConfigError(f"target mean rank must be positive, got {target_mean_rank}")
    normalized = _normalized(report)
    lo, hi = 0.0, 1.0
    iterations = 0
    full = _ranks_at(normalized, 0.0)
    if np.mean(full) <= target_mean_rank:
        hi = 0.0
    else:
        while iterations < n_max:
            iterations += 1
            gamma = 0.5 * (lo + hi)
            mean = float(np.mean(_ranks_at(normalized, gamma)))
            if mean > target_mean_rank:
                lo = gamma
            else:
                hi = gamma
                if target_mean_rank - mean <= eps:
                    break
    ranks = _ranks_at(normalized, hi)
    logger.info(f"Bisection: gamma={hi:.3e} after {iterations} iterations, mean rank {np.mean(ranks):.2f}")
    return RankPlan(
        ranks=ranks,
        criterion='budget',
        achieved_energy=_achieved(report, ranks),
        target=float(target_mean_rank),
        gamma=hi,
        iterations=iterations,
        degenerate=[e <= 0 for e in report.energies],
    )


def brute_force_allocation(report: HsvReport, target_mean_rank: float) -> List[int]:
    """Exhaustive search over the thresholds at which any layer's rank changes."""
    normalized = _normalized(report)
    candidates = sorted({0.0} | {float(v) for s in normalized for v in s} | {1.0})
    best = None
    for gamma in candidates:
        ranks = _ranks_at(normalized, gamma)
        if np.mean(ranks) <= target_mean_rank and (best is None or np.mean(ranks) > np.mean(best)):
            best = ranks
    return best


def plan_by_energy(report: HsvReport, fraction: float = config.ENERGY_FRACTION) -> RankPlan:
    picks = [rank_by_energy(s, fraction) for s in report.sigmas]
    return RankPlan(
        ranks=[p.rank for p in picks],
        criterion='energy',
        achieved_energy=[p.achieved_energy for p in picks],
        target=float(fraction),
        degenerate=[p.degenerate for p in picks],
    )


def plan_by_truncation_ratio(report: HsvReport, chi: float, **kwargs) -> RankPlan:
    """Truncation ratio chi removes that fraction of the state: mean rank <= n (1 - chi)."""
    if not 0.0 <= chi < 1.0:
        raise ConfigError(f"truncation ratio must lie in [0, 1), got {chi}")
    n = float(np.mean(report.layer_dims))
    plan = allocate_ranks_bisection(report, n * (1.0 - chi), **kwargs)
    plan.criterion = 'truncation_ratio'
    return plan


def plan_by_budget(report: HsvReport, total_budget: float, **kwargs) -> RankPlan:
    """Total state budget r_t shared across layers (mean rank r_t / L)."""
    return allocate_ranks_bisection(report, total_budget / report.depth, **kwargs)


def diagonalize(reduced: ReducedSSM) -> ReducedSSM:
    """
    Eigen-decompose a dense_real reduced system into diagonal_complex form

    Complex eigenvalues are paired with exact conjugates (values and
    eigenvectors), so real inputs map to real outputs. Falls back to the
    dense system with a warning when the eigenbasis is ill conditioned.
    """
    if reduced.mode != DENSE_REAL:
        return reduced
    lam, T = linalg.eig(reduced.A)
    scale = max(1.0, float(np.max(np.abs(lam))))
    tol = 1e-12 * scale
    order, pending = [], list(range(lam.size))
    lam = lam.copy()
    T = T.copy()
    while pending:
        i = pending.pop(0)
        if abs(lam[i].imag) <= tol:
            lam[i] = lam[i].real
            v = T[:, i].real
            T[:, i] = v / np.linalg.norm(v)
            order.append(i)
            continue
        partners = [j for j in pending if lam[j].imag * lam[i].imag < 0]
        if not partners:
            return _diagonalization_fallback(reduced, "unpaired complex eigenvalue")
        j = min(partners, key=lambda k: abs(lam[k] - np.conj(lam[i])))
        pending.remove(j)
        if lam[i].imag < 0:
            i, j = j, i
        lam[j] = np.conj(lam[i])
        T[:, j] = np.conj(T[:, i])
        order.extend([i, j])
    lam, T = lam[order], T[:, order]
    if np.linalg.cond(T) > config.DIAG_COND_LIMIT:
        return _diagonalization_fallback(reduced, "eigenvector basis is ill conditioned")
    return ReducedSSM(
        DIAGONAL_COMPLEX, linalg.solve(T, reduced.B.astype(complex)), reduced.C @ T, reduced.D.copy(),
        lam=lam, truncated_tail=reduced.truncated_tail, sigmas=reduced.sigmas, warning=reduced.warning,
    )


def _diagonalization_fallback(reduced: ReducedSSM, reason: str) -> ReducedSSM:
    logger.warning(f"Diagonalization skipped: {reason}; keeping dense_real form")
    fallback = copy.copy(reduced)
    fallback.warning = f"diagonalization skipped: {reason}"
    return fallback


def compress_layer(layer: RotationSSM, r: int, diagonal: bool = False, workers: int = 1) -> ReducedSSM:
    """Balanced truncation of one rotation layer using the block gramians."""
    reduced = balanced_truncation(realize(layer), gramians_block(layer, workers), min(r, layer.n))
    return diagonalize(reduced) if diagonal else reduced


def compress_model(model, plan: RankPlan, diagonal: bool = False, workers: int = 1):
    """
    Replace every rotation layer of a SequenceModel by its reduction

    Non-SSM parameters are copied unchanged. Layers are reduced concurrently.

    Args:
        model: Trained net.SequenceModel
        plan: Per-layer orders
        diagonal: Diagonalize reduced layers
        workers: Threads across layers

    Returns:
        A new SequenceModel
    """
    from net import ReducedSSMLayer

    if len(plan.ranks) != len(model.blocks):
        raise DimensionError(f"plan has {len(plan.ranks)} layers, model has {len(model.blocks)}")
    compressed = copy.deepcopy(model)
    layers = [block.ssm.to_params() for block in model.blocks]

    def reduce(index):
        return compress_layer(layers[index], plan.ranks[index], diagonal)

    if workers > 1 and len(layers) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(layers))) as pool:
            reduced = list(pool.map(reduce, range(len(layers))))
    else:
        reduced = [reduce(i) for i in range(len(layers))]

    for block, red in zip(compressed.blocks, reduced):
        block.ssm = ReducedSSMLayer(red, workers=block.ssm.workers)
    logger.info(f"✓ Compressed {len(reduced)} layers to ranks {[red.r for red in reduced]}")
    return compressed


def certificate_rows(reduced_layers: Sequence[ReducedSSM]) -> List[Dict[str, float]]:
    """Per-layer error certificate: ||y - y_r|| <= bound_constant * ||u||."""
    return [
        {
            'layer': i,
            'r': red.r,
            'tail_sum': red.truncated_tail,
            'bound_constant': 2.0 * red.truncated_tail,
        }
        for i, red in enumerate(reduced_layers)
    ]
