"""
Timing benchmarks: gramian solvers, scan vs recurrence, compressed inference
"""
import logging
import time
from typing import Callable, Dict, List, Sequence

import numpy as np

import config
from gramians import gramians_block, solve_lyapunov_naive
from lti_core import random_rotation_ssm, realize, simulate_sequential
from scan import scan_sequence

logger = logging.getLogger(__name__)


def median_time(fn: Callable[[], object], repeats: int = 10) -> float:
    """Median wall time of fn over `repeats` runs (after one warm-up call)."""
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def loglog_slope(sizes: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(size)."""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


def bench_lyap(
    sizes: Sequence[int] = (64, 128, 256, 512),
    solvers: Sequence[str] = ('block', 'naive'),
    repeats: int = 10,
    seed: int = 0,
    workers: int = 1,
) -> List[Dict]:
    """
    Median time to compute both gramians of a random rotation layer

    The naive solver is skipped above its size cap.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        layer = random_rotation_ssm(n // 2, 2, rng)
        for solver in solvers:
            if solver == 'naive':
                if n > config.NAIVE_SOLVER_MAX_N:
                    logger.info(f"Skipping naive solver at n={n}")
                    continue
                dense = realize(layer)

                def run(dense=dense):
                    solve_lyapunov_naive(dense.A, dense.B @ dense.B.T)
                    solve_lyapunov_naive(dense.A.T, dense.C.T @ dense.C)
            else:
                def run(layer=layer):
                    gramians_block(layer, workers)
            median = median_time(run, repeats)
            rows.append({'solver': solver, 'n': n, 'median_s': median, 'runs': repeats})
            logger.info(f"{solver:>6} n={n:<4d} {median * 1e3:9.3f} ms")
    return rows


def block_slope(rows: Sequence[Dict]) -> float:
    block = [r for r in rows if r['solver'] == 'block']
    return loglog_slope([r['n'] for r in block], [r['median_s'] for r in block])


def bench_scan(
    lengths: Sequence[int] = (256, 1024, 4096),
    workers_list: Sequence[int] = (1, 4),
    q: int = 16,
    p: int = 4,
    batch: int = 8,
    repeats: int = 10,
    seed: int = 0,
) -> List[Dict]:
    """Scan (per worker count) against the sequential recurrence."""
    rng = np.random.default_rng(seed)
    layer = random_rotation_ssm(q, p, rng)
    dense = realize(layer)
    rows = []
    for L in lengths:
        u = rng.standard_normal((L, batch, p))
        median = median_time(lambda: simulate_sequential(dense, u), repeats)
        rows.append({'method': 'sequential', 'length': L, 'workers': 1, 'median_s': median, 'runs': repeats})
        for workers in workers_list:
            median = median_time(lambda: scan_sequence(layer, u, workers), repeats)
            rows.append({'method': 'scan', 'length': L, 'workers': workers, 'median_s': median, 'runs': repeats})
        logger.info(f"L={L}: " + ", ".join(f"{r['method']}[{r['workers']}]={r['median_s'] * 1e3:.2f}ms"
                                          for r in rows if r['length'] == L))
    return rows


def bench_inference(full_model, compressed_model, inputs, repeats: int = 10) -> Dict[str, float]:
    """Median forward time of both models on the same batch."""
    from net import predict_logits

    full = median_time(lambda: predict_logits(full_model, inputs, inputs.shape[0]), repeats)
    reduced = median_time(lambda: predict_logits(compressed_model, inputs, inputs.shape[0]), repeats)
    return {'full_s': full, 'compressed_s': reduced, 'ratio': reduced / full}
