"""
System representations for rotation-parametrized state-space layers

Holds the learnable rotation form (RotationSSM), explicit realizations
(DenseSSM), impulse responses, the reference recurrence and the constructive
canonicalization of a stable dense system into rotation form.

Indexing convention used throughout the toolkit: the state after consuming
u_k is x_k = A x_{k-1} + B u_k with x_0 = 0, and y_k = C x_k + D u_k.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

import config
from exceptions import DimensionError, UncontrollableError, UnstableSystemError

logger = logging.getLogger(__name__)


def rotation_blocks(rho: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Stack of 2x2 blocks rho * [[cos, sin], [-sin, cos]], shape (q, 2, 2)."""
    c, s = np.cos(alpha), np.sin(alpha)
    return rho[:, None, None] * np.stack(
        [np.stack([c, s], axis=-1), np.stack([-s, c], axis=-1)], axis=-2
    )


def block_diag_from_blocks(blocks: np.ndarray) -> np.ndarray:
    q = blocks.shape[0]
    A = np.zeros((2 * q, 2 * q))
    for i in range(q):
        A[2 * i:2 * i + 2, 2 * i:2 * i + 2] = blocks[i]
    return A


def spectral_radius(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


@dataclass(eq=False)
class DenseSSM:
    """Explicit realization (A, B, C, D) of a discrete LTI system"""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    stable: bool = False

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionError(f"B has {self.B.shape[0]} rows, expected {n}")
        if self.C.shape[1] != n:
            raise DimensionError(f"C has {self.C.shape[1]} columns, expected {n}")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise DimensionError(
                f"D must be {self.C.shape[0]}x{self.B.shape[1]}, got {self.D.shape}"
            )
        if self.stable:
            radius = spectral_radius(self.A)
            if radius >= 1.0:
                raise UnstableSystemError(f"Spectral radius {radius:.6g} is not below 1")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(eq=False)
class RotationSSM:
    """
    Learnable rotation-form layer

    A is block diagonal with blocks rho_i * R(alpha_i), where
    rho = tanh(rho_raw), clamped to |rho| <= config.RHO_CLAMP, and
    alpha = pi * (tanh(alpha_raw) + 1) / 2.
    The first column of B is the structural stack of e1 = [1, 0] blocks;
    only the remaining p - 1 columns (B_learn) are free parameters.

    Args:
        rho_raw: Pre-activation retention, length q
        alpha_raw: Pre-activation angle, length q
        B_learn: Learnable part of B, shape (n, p - 1)
        C: Output matrix, shape (p, n)
        D: Diagonal feedthrough, length p
        padded: Mask of zero-padded states (real-eigenvalue embedding)
    """
    rho_raw: np.ndarray
    alpha_raw: np.ndarray
    B_learn: np.ndarray
    C: np.ndarray
    D: np.ndarray
    padded: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.rho_raw = np.asarray(self.rho_raw, dtype=float).reshape(-1)
        self.alpha_raw = np.asarray(self.alpha_raw, dtype=float).reshape(-1)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.asarray(self.D, dtype=float).reshape(-1)
        q = self.rho_raw.shape[0]
        n, p = 2 * q, self.C.shape[0]
        self.B_learn = np.asarray(self.B_learn, dtype=float).reshape(n, max(p - 1, 0))
        if self.alpha_raw.shape[0] != q:
            raise DimensionError(f"alpha_raw has length {self.alpha_raw.shape[0]}, expected {q}")
        if self.C.shape != (p, n):
            raise DimensionError(f"C must be {p}x{n}, got {self.C.shape}")
        if self.D.shape[0] != p:
            raise DimensionError(f"D has length {self.D.shape[0]}, expected {p}")
        if self.padded is None:
            self.padded = np.zeros(n, dtype=bool)
        self.padded = np.asarray(self.padded, dtype=bool).reshape(-1)
        if self.padded.shape[0] != n:
            raise DimensionError(f"padded mask has length {self.padded.shape[0]}, expected {n}")

    @property
    def q(self) -> int:
        return self.rho_raw.shape[0]

    @property
    def n(self) -> int:
        return 2 * self.q

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def rho(self) -> np.ndarray:
        # tanh rounds to exactly 1.0 for |rho_raw| > ~19
        return np.clip(np.tanh(self.rho_raw), -config.RHO_CLAMP, config.RHO_CLAMP)

    @property
    def rho_mask(self) -> np.ndarray:
        """1.0 where rho is unclamped, 0.0 where the clamp is active."""
        return (np.abs(np.tanh(self.rho_raw)) < config.RHO_CLAMP).astype(float)

    @property
    def alpha(self) -> np.ndarray:
        return np.pi * (np.tanh(self.alpha_raw) + 1.0) / 2.0

    @property
    def B(self) -> np.ndarray:
        structural = np.zeros((self.n, 1))
        structural[0::2, 0] = 1.0
        return np.hstack([structural, self.B_learn])

    def copy(self) -> 'RotationSSM':
        return RotationSSM(
            self.rho_raw.copy(), self.alpha_raw.copy(), self.B_learn.copy(),
            self.C.copy(), self.D.copy(), self.padded.copy(),
        )


@dataclass(eq=False)
class ImpulseResponse:
    """Taps h_0 = D, h_k = C A^(k-1) B, stored as an array (taps, p, m)"""
    h: np.ndarray

    @property
    def length(self) -> int:
        return self.h.shape[0]


def realize(params: RotationSSM) -> DenseSSM:
    """Build the explicit block-diagonal realization of a rotation layer."""
    A = block_diag_from_blocks(rotation_blocks(params.rho, params.alpha))
    return DenseSSM(A, params.B, params.C.copy(), np.diag(params.D))


def realize_vjp(params: RotationSSM, d_blocks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pull a gradient on the 2x2 diagonal blocks of A back to (rho_raw, alpha_raw)

    Entries whose rho sits on the clamp get zero rho_raw gradient.

    Args:
        params: Layer the gradient belongs to
        d_blocks: Gradient w.r.t. each diagonal block, shape (q, 2, 2)

    Returns:
        Tuple (d_rho_raw, d_alpha_raw)
    """
    rho, alpha = params.rho, params.alpha
    c, s = np.cos(alpha), np.sin(alpha)
    d_rho = (d_blocks[:, 0, 0] * c + d_blocks[:, 0, 1] * s
             - d_blocks[:, 1, 0] * s + d_blocks[:, 1, 1] * c)
    d_alpha = rho * (-d_blocks[:, 0, 0] * s + d_blocks[:, 0, 1] * c
                     - d_blocks[:, 1, 0] * c - d_blocks[:, 1, 1] * s)
    d_rho_raw = d_rho * (1.0 - rho ** 2) * params.rho_mask
    d_alpha_raw = d_alpha * (np.pi / 2.0) * (1.0 - np.tanh(params.alpha_raw) ** 2)
    return d_rho_raw, d_alpha_raw


def _as_time_major(u: np.ndarray, width: int, name: str) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[-1] != width:
        raise DimensionError(f"{name} has trailing size {u.shape[-1]}, expected {width}")
    return u


def simulate_sequential(sys: DenseSSM, u: np.ndarray) -> np.ndarray:
    """
    Reference recurrence x_k = A x_{k-1} + B u_k, y_k = C x_k + D u_k

    Args:
        sys: System to simulate
        u: Inputs, time-major (L, m) or (L, batch, m)

    Returns:
        Outputs with the same leading shape as u and trailing size p
    """
    u = _as_time_major(u, sys.m, 'u')
    x = np.zeros(u.shape[1:-1] + (sys.n,))
    y = np.empty(u.shape[:-1] + (sys.p,))
    for k in range(u.shape[0]):
        x = x @ sys.A.T + u[k] @ sys.B.T
        y[k] = x @ sys.C.T + u[k] @ sys.D.T
    return y


def impulse_response(sys: DenseSSM, taps: int) -> ImpulseResponse:
    """Impulse response by state propagation (no explicit matrix powers)."""
    if taps < 1:
        raise DimensionError(f"taps must be >= 1, got {taps}")
    h = np.empty((taps, sys.p, sys.m))
    h[0] = sys.D
    X = sys.B.copy()
    for k in range(1, taps):
        h[k] = sys.C @ X
        X = sys.A @ X
    return ImpulseResponse(h)


def convolve_impulse(response: ImpulseResponse, u: np.ndarray) -> np.ndarray:
    """Direct convolution y_k = h_0 u_k + sum_{j<=k} h_{k-j+1} u_j (time-major u of shape (L, m))."""
    h = response.h
    u = _as_time_major(u, h.shape[2], 'u')
    L = u.shape[0]
    if response.length < L + 1:
        raise DimensionError(f"need at least {L + 1} taps for length {L}, got {response.length}")
    y = np.einsum('pm,l...m->l...p', h[0], u)
    for k in range(L):
        for j in range(k + 1):
            y[k] += u[j] @ h[k - j + 1].T
    return y


def similarity_transform(sys: DenseSSM, T: np.ndarray) -> DenseSSM:
    """Return (T^-1 A T, T^-1 B, C T, D)."""
    lu = linalg.lu_factor(T)
    return DenseSSM(
        linalg.lu_solve(lu, sys.A @ T),
        linalg.lu_solve(lu, sys.B),
        sys.C @ T,
        sys.D.copy(),
    )


def random_rotation_ssm(q: int, p: int, rng: np.random.Generator, scale: float = 1.0) -> RotationSSM:
    """Random rotation layer with moderately damped blocks, used by tests and benchmarks."""
    return RotationSSM(
        rho_raw=rng.normal(1.0, 0.5, q),
        alpha_raw=rng.normal(0.0, 1.0, q),
        B_learn=scale * rng.standard_normal((2 * q, p - 1)),
        C=scale * rng.standard_normal((p, 2 * q)),
        D=rng.standard_normal(p),
    )


def random_stable_dense(n: int, m: int, p: int, rng: np.random.Generator, radius: float = 0.9) -> DenseSSM:
    """Random dense system rescaled to the given spectral radius."""
    A = rng.standard_normal((n, n))
    A *= radius / spectral_radius(A)
    return DenseSSM(
        A, rng.standard_normal((n, m)), rng.standard_normal((p, n)),
        rng.standard_normal((p, m)), stable=True,
    )


class _CanonicalizationIssue(Exception):
    """Internal signal that the clean path hit a diagnostic"""


def _schur_blocks(T: np.ndarray):
    n, blocks, i = T.shape[0], [], 0
    while i < n:
        if i + 1 < n and T[i + 1, i] != 0.0:
            blocks.append((i, i + 2))
            i += 2
        else:
            blocks.append((i, i + 1))
            i += 1
    return blocks


def _block_diagonalize(A: np.ndarray, eps: float):
    """Real Schur form followed by Sylvester decoupling; returns (block list, Tb, M) with A = M Tb M^-1."""
    T, Z = linalg.schur(A, output='real')
    blocks = _schur_blocks(T)
    n = A.shape[0]
    S = np.eye(n)
    Tb = T.copy()
    for s, e in blocks[:-1]:
        T11, T22, T12 = Tb[s:e, s:e], Tb[e:, e:], Tb[s:e, e:]
        try:
            Y = linalg.solve_sylvester(T11, -T22, -T12)
        except (linalg.LinAlgError, ValueError) as err:
            raise _CanonicalizationIssue(f"Sylvester decoupling failed: {err}")
        residual = np.linalg.norm(T11 @ Y - Y @ T22 + T12)
        if not np.all(np.isfinite(Y)) or residual > 1e-8 * (1.0 + np.linalg.norm(T12)):
            raise _CanonicalizationIssue("Sylvester decoupling is ill-conditioned (repeated eigenvalues)")
        S[:, e:] += S[:, s:e] @ Y
        Tb[s:e, e:] = 0.0
    M = Z @ S
    if np.linalg.cond(M) > 1.0 / eps:
        raise _CanonicalizationIssue("Block-diagonalizing transform is near singular")
    return blocks, Tb, M


def _angle_to_raw(alpha: float) -> float:
    t = 2.0 * alpha / np.pi - 1.0
    if t <= -1.0:
        return -config.ALPHA_RAW_LIMIT
    if t >= 1.0:
        return config.ALPHA_RAW_LIMIT
    return float(np.clip(np.arctanh(t), -config.ALPHA_RAW_LIMIT, config.ALPHA_RAW_LIMIT))


def _canonicalize(A: np.ndarray, B: np.ndarray, C: np.ndarray, eps: float):
    blocks, Tb, M = _block_diagonalize(A, eps)
    Bb = np.linalg.solve(M, B)
    Cb = C @ M
    p = B.shape[1]

    rho, alpha, B_rows, C_cols, padded = [], [], [], [], []
    for s, e in blocks:
        if e - s == 2:
            lam_all, vecs = np.linalg.eig(Tb[s:e, s:e])
            k = int(np.argmax(lam_all.imag))
            lam, v = lam_all[k], vecs[:, k]
            V = np.column_stack([v.real, v.imag])
            Bk = np.linalg.solve(V, Bb[s:e])
            Ck = Cb[:, s:e] @ V
            b = Bk[:, 0]
            norm_b = np.hypot(b[0], b[1])
            if norm_b < eps:
                raise _CanonicalizationIssue("Input column vanishes on a rotation block")
            G = np.array([[b[0], b[1]], [-b[1], b[0]]]) / norm_b
            # gamma * G maps b onto e1 and commutes with the rotation block
            Bk = (G @ Bk) / norm_b
            Ck = (Ck @ G.T) * norm_b
            Bk[:, 0] = (1.0, 0.0)
            rho.append(abs(lam))
            alpha.append(float(np.angle(lam)))
            B_rows.append(Bk)
            C_cols.append(Ck)
            padded.extend([False, False])
        else:
            b = Bb[s, 0]
            if abs(b) < eps:
                raise _CanonicalizationIssue("Input column vanishes on a real eigenvalue")
            Bk = np.zeros((2, p))
            Bk[0] = Bb[s] / b
            Bk[0, 0] = 1.0
            Ck = np.zeros((C.shape[0], 2))
            Ck[:, 0] = Cb[:, s] * b
            rho.append(float(Tb[s, s]))
            alpha.append(0.0)
            B_rows.append(Bk)
            C_cols.append(Ck)
            padded.extend([False, True])
    return (np.array(rho), np.array(alpha), np.vstack(B_rows),
            np.hstack(C_cols), np.array(padded))


def to_rotation_form(
    sys: DenseSSM,
    perturb_eps: float = config.PERTURB_EPS,
    seed: int = 0,
) -> RotationSSM:
    """
    Convert a stable dense system into rotation form

    Uses the real Schur form, a block-diagonalizing similarity and a
    per-block scaled Givens rotation that turns the first input column into
    the structural e1 stack. Real eigenvalues become alpha = 0 blocks with a
    padded zero state. When the clean path hits a diagnostic (repeated
    eigenvalues, vanishing input column) A is perturbed once by a random
    matrix of norm perturb_eps and the construction is retried.

    Args:
        sys: Stable system with m = p and diagonal D
        perturb_eps: Perturbation magnitude and controllability threshold
        seed: Seed for the perturbation

    Returns:
        RotationSSM with the same input/output map up to O(perturb_eps)
    """
    if sys.m != sys.p:
        raise DimensionError(f"rotation form requires m = p, got m={sys.m}, p={sys.p}")
    off_diag = sys.D - np.diag(np.diag(sys.D))
    if np.any(off_diag != 0.0):
        raise DimensionError("rotation form requires a diagonal feedthrough D")
    radius = spectral_radius(sys.A)
    if radius >= 1.0:
        raise UnstableSystemError(f"Spectral radius {radius:.6g} is not below 1")

    A = sys.A
    try:
        rho, alpha, B, C, padded = _canonicalize(A, sys.B, sys.C, perturb_eps)
    except _CanonicalizationIssue as issue:
        logger.warning(f"{issue}; retrying with a perturbation of size {perturb_eps:g}")
        E = np.random.default_rng(seed).standard_normal(A.shape)
        A = A + perturb_eps * E / np.linalg.norm(E)
        try:
            rho, alpha, B, C, padded = _canonicalize(A, sys.B, sys.C, perturb_eps)
        except _CanonicalizationIssue as again:
            raise UncontrollableError(f"Cannot bring system to rotation form: {again}") from again

    return RotationSSM(
        rho_raw=np.arctanh(rho),
        alpha_raw=np.array([_angle_to_raw(a) for a in alpha]),
        B_learn=B[:, 1:],
        C=C,
        D=np.diag(sys.D).copy(),
        padded=padded,
    )
