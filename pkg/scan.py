"""
Associative scans for rotation-form and diagonal state-space layers

The rotation monoid composes (rho, alpha, state) triples as
    (a, b) -> (a.rho * b.rho, a.alpha + b.alpha, A(b.rho, b.alpha) a.state + b.state)
where A(rho, alpha) applies each 2x2 scaled rotation to its state pair
without forming the n x n matrix. Angles are accumulated without wrapping.

All sequence arrays are time-major: (L, n) or (L, batch, n).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np

from exceptions import DimensionError
from lti_core import RotationSSM, realize_vjp

logger = logging.getLogger(__name__)

Elements = Tuple[np.ndarray, ...]


@dataclass(eq=False)
class ScanElement:
    """One element of the rotation monoid"""
    rho_part: np.ndarray
    alpha_part: np.ndarray
    state_part: np.ndarray

    @classmethod
    def identity(cls, q: int) -> 'ScanElement':
        return cls(np.ones(q), np.zeros(q), np.zeros(2 * q))


@dataclass(eq=False)
class ScanGradients:
    """Vector-Jacobian products of a rotation-layer sequence map"""
    d_u: np.ndarray
    d_rho_raw: np.ndarray
    d_alpha_raw: np.ndarray
    d_B: np.ndarray
    d_C: np.ndarray
    d_D: np.ndarray


def apply_rotation(rho: np.ndarray, alpha: np.ndarray, state: np.ndarray) -> np.ndarray:
    """Apply blockdiag(rho_i R(alpha_i)) to state (..., n) pairwise; rho/alpha broadcast against (..., q)."""
    pairs = state.reshape(state.shape[:-1] + (-1, 2))
    x1, x2 = pairs[..., 0], pairs[..., 1]
    c, s = np.cos(alpha), np.sin(alpha)
    out = np.stack([rho * (c * x1 + s * x2), rho * (c * x2 - s * x1)], axis=-1)
    return out.reshape(out.shape[:-2] + (-1,))


def _rotation_op(a: Elements, b: Elements) -> Elements:
    return (a[0] * b[0], a[1] + b[1], apply_rotation(b[0], b[1], a[2]) + b[2])


def _diagonal_op(a: Elements, b: Elements) -> Elements:
    return (a[0] * b[0], b[0] * a[1] + b[1])


def combine(a: ScanElement, b: ScanElement) -> ScanElement:
    """Compose two rotation-monoid elements (a first, then b)."""
    if a.rho_part.shape != b.rho_part.shape or a.state_part.shape != b.state_part.shape:
        raise DimensionError(
            f"cannot combine elements with q={a.rho_part.shape[-1]} and q={b.rho_part.shape[-1]}"
        )
    if a.state_part.shape[-1] != 2 * a.rho_part.shape[-1]:
        raise DimensionError("state_part must have length 2q")
    return ScanElement(*_rotation_op(
        (a.rho_part, a.alpha_part, a.state_part),
        (b.rho_part, b.alpha_part, b.state_part),
    ))


def _inclusive_scan(elements: Elements, op: Callable[[Elements, Elements], Elements]) -> Elements:
    """Hillis-Steele inclusive scan along axis 0, log2(L) vectorized rounds."""
    L = elements[0].shape[0]
    offset = 1
    while offset < L:
        merged = op(tuple(e[:-offset] for e in elements), tuple(e[offset:] for e in elements))
        elements = tuple(np.concatenate([e[:offset], m], axis=0) for e, m in zip(elements, merged))
        offset *= 2
    return elements


def _spans(length: int, workers: int):
    count = max(1, min(workers, length))
    bounds = np.linspace(0, length, count + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def parallel_scan(elements: Elements, op: Callable[[Elements, Elements], Elements], workers: int = 1) -> Elements:
    """
    Two-pass chunked scan

    Each worker scans its own chunk, chunk summaries are combined by an
    exclusive sequential scan, and every chunk is then fixed up with its
    carry in parallel.
    """
    spans = _spans(elements[0].shape[0], workers)
    if len(spans) == 1:
        return _inclusive_scan(elements, op)

    def local(span):
        a, b = span
        return _inclusive_scan(tuple(e[a:b] for e in elements), op)

    with ThreadPoolExecutor(max_workers=len(spans)) as pool:
        chunks = list(pool.map(local, spans))
        carries = [None]
        carry = tuple(e[-1:] for e in chunks[0])
        for chunk in chunks[1:-1]:
            carries.append(carry)
            carry = op(carry, tuple(e[-1:] for e in chunk))
        carries.append(carry)

        def fixup(index):
            if carries[index] is None:
                return chunks[index]
            return op(carries[index], chunks[index])

        fixed = list(pool.map(fixup, range(len(chunks))))
    return tuple(np.concatenate(parts, axis=0) for parts in zip(*fixed))


def _per_step(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast a per-layer vector (q,) to (L, 1, ..., q) matching a time-major array."""
    shape = (1,) * (like.ndim - 1) + values.shape
    target = (like.shape[0],) + (1,) * (like.ndim - 2) + values.shape
    return np.broadcast_to(values.reshape(shape), target)


def scan_states(rho: np.ndarray, alpha: np.ndarray, bu: np.ndarray, workers: int = 1) -> np.ndarray:
    """
    States x_k = A x_{k-1} + bu_k (x_0 = 0) for rotation-structured A

    Args:
        rho: Effective retention per block, length q
        alpha: Effective angle per block, length q
        bu: Driving terms B u_k, time-major (L, n) or (L, batch, n)
        workers: Number of chunks scanned in parallel

    Returns:
        States with the shape of bu
    """
    if bu.shape[-1] != 2 * rho.shape[0]:
        raise DimensionError(f"driving term has size {bu.shape[-1]}, expected {2 * rho.shape[0]}")
    elements = (_per_step(rho, bu), _per_step(alpha, bu), bu)
    return parallel_scan(elements, _rotation_op, workers)[2]


def _check_input(params: RotationSSM, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[-1] != params.p:
        raise DimensionError(f"input has {u.shape[-1]} channels, layer expects {params.p}")
    if u.shape[0] < 1:
        raise DimensionError("sequence length must be at least 1")
    return u


def scan_sequence(params: RotationSSM, u: np.ndarray, workers: int = 1, return_states: bool = False):
    """
    Output sequence of a rotation layer computed with the associative scan

    Args:
        params: Rotation layer
        u: Inputs, time-major (L, p) or (L, batch, p)
        workers: Number of chunks scanned in parallel
        return_states: Also return the state sequence

    Returns:
        y with the shape of u (and the states when requested)
    """
    u = _check_input(params, u)
    states = scan_states(params.rho, params.alpha, u @ params.B.T, workers)
    y = states @ params.C.T + params.D * u
    if return_states:
        return y, states
    return y


def scan_adjoint(
    params: RotationSSM,
    u: np.ndarray,
    states: np.ndarray,
    g_y: np.ndarray,
    workers: int = 1,
) -> ScanGradients:
    """
    Reverse pass of scan_sequence

    The state adjoint lam_k = C^T g_k + A^T lam_{k+1} is a scan over the
    reversed sequence with negated angles.

    Args:
        params: Rotation layer used in the forward pass
        u: Forward inputs, time-major
        states: Forward states returned by scan_sequence
        g_y: Gradient w.r.t. the outputs, shape of u
        workers: Number of chunks scanned in parallel
    """
    u = _check_input(params, u)
    drive = g_y @ params.C
    lam = scan_states(params.rho, -params.alpha, drive[::-1], workers)[::-1]

    B = params.B
    d_u = lam @ B + params.D * g_y
    reduce_axes = tuple(range(u.ndim - 1))
    d_B = np.tensordot(lam, u, axes=(reduce_axes, reduce_axes))
    d_C = np.tensordot(g_y, states, axes=(reduce_axes, reduce_axes))
    d_D = np.sum(g_y * u, axis=reduce_axes)

    prev = np.concatenate([np.zeros_like(states[:1]), states[:-1]], axis=0)
    lam_pairs = lam.reshape(lam.shape[:-1] + (-1, 2))
    prev_pairs = prev.reshape(prev.shape[:-1] + (-1, 2))
    d_blocks = np.einsum('...qa,...qb->qab', lam_pairs, prev_pairs)
    d_rho_raw, d_alpha_raw = realize_vjp(params, d_blocks)
    return ScanGradients(d_u, d_rho_raw, d_alpha_raw, d_B[:, 1:], d_C, d_D)


def scan_diagonal(lam: np.ndarray, bu: np.ndarray, workers: int = 1) -> np.ndarray:
    """States x_k = diag(lam) x_{k-1} + bu_k for complex diagonal systems (time-major bu)."""
    if bu.shape[-1] != lam.shape[0]:
        raise DimensionError(f"driving term has size {bu.shape[-1]}, expected {lam.shape[0]}")
    bu = np.asarray(bu, dtype=complex)
    elements = (_per_step(np.asarray(lam, dtype=complex), bu), bu)
    return parallel_scan(elements, _diagonal_op, workers)[1]


def scan_elements(params: RotationSSM, u: np.ndarray) -> Sequence[ScanElement]:
    """Initial elements (rho, alpha, B u_k) of the scan, one per time step (unbatched u)."""
    u = _check_input(params, u)
    bu = u @ params.B.T
    return [ScanElement(params.rho.copy(), params.alpha.copy(), bu[k]) for k in range(bu.shape[0])]
