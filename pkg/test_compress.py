"""
Tests for balanced truncation, rank selection and diagonalization
"""
import numpy as np
import pytest

from compress import (DENSE_REAL, DIAGONAL_COMPLEX, ReducedSSM, allocate_ranks_bisection, balanced_truncation,
                      balancing_projectors, brute_force_allocation, certificate_rows, compress_layer, diagonalize,
                      plan_by_budget, plan_by_energy, plan_by_truncation_ratio, rank_by_energy)
from exceptions import ConfigError
from gramians import dense_gramians, gramians_block
from hankel import hsv_report, layer_hsvs
from lti_core import DenseSSM, impulse_response, random_rotation_ssm, realize, simulate_sequential


def output_error(layer, reduced, u):
    y = simulate_sequential(realize(layer), u)
    return np.linalg.norm(y - reduced.simulate(u))


def decay_report(rng, dims):
    """Random per-layer HSVs with varied decay rates."""
    sigmas = []
    for n in dims:
        rate = rng.uniform(0.05, 1.0)
        s = np.exp(-rate * np.arange(n)) * rng.uniform(0.5, 2.0)
        sigmas.append(s)
    return hsv_report(sigmas)


class TestBalancedTruncation:
    def test_full_order_preserves_response(self):
        layer = random_rotation_ssm(3, 2, np.random.default_rng(0))
        reduced = compress_layer(layer, layer.n)
        h = impulse_response(realize(layer), 128).h
        np.testing.assert_allclose(reduced.impulse_response(128).h, h, atol=1e-8 * np.abs(h).max())

    def test_decoupled_subsystems(self):
        b1 = c1 = np.sqrt(1.5)
        b2 = c2 = np.sqrt(0.0075)
        sys = DenseSSM(np.diag([0.5, 0.5]), np.diag([b1, b2]), np.diag([c1, c2]), np.zeros((2, 2)))
        gp = dense_gramians(sys)
        reduced = balanced_truncation(sys, gp, 1)
        np.testing.assert_allclose(reduced.sigmas, [2.0, 0.01], rtol=1e-10)
        assert reduced.truncated_tail == pytest.approx(0.01, rel=1e-10)
        h = reduced.impulse_response(10).h
        expected = np.zeros((10, 2, 2))
        expected[1:, 0, 0] = b1 * c1 * 0.5 ** np.arange(9)
        np.testing.assert_allclose(h, expected, atol=1e-12)

        u = np.random.default_rng(1).standard_normal((200, 2))
        err = np.linalg.norm(simulate_sequential(sys, u) - reduced.simulate(u))
        assert err <= 2 * 0.01 * np.linalg.norm(u)

    def test_error_bound(self):
        rng = np.random.default_rng(2)
        layer = random_rotation_ssm(8, 2, rng)
        reduced = compress_layer(layer, 4)
        for _ in range(20):
            u = rng.standard_normal((256, 2))
            assert output_error(layer, reduced, u) <= 2 * reduced.truncated_tail * np.linalg.norm(u) * (1 + 1e-9)

    def test_error_bound_random_orders(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            layer = random_rotation_ssm(int(rng.integers(2, 7)), int(rng.integers(1, 4)), rng)
            r = int(rng.integers(1, layer.n + 1))
            reduced = compress_layer(layer, r)
            u = rng.standard_normal((int(rng.integers(16, 128)), layer.p))
            bound = 2 * reduced.truncated_tail * np.linalg.norm(u)
            assert output_error(layer, reduced, u) <= bound * (1 + 1e-9) + 1e-9 * np.linalg.norm(u)

    def test_nested_orders(self):
        rng = np.random.default_rng(4)
        layer = random_rotation_ssm(6, 2, rng)
        u = rng.standard_normal((128, 2))
        tails = []
        for r in range(1, layer.n + 1):
            reduced = compress_layer(layer, r)
            tails.append(reduced.truncated_tail)
            assert output_error(layer, reduced, u) <= 2 * reduced.truncated_tail * np.linalg.norm(u) * (1 + 1e-9) + 1e-9
        assert all(a >= b for a, b in zip(tails, tails[1:]))

    def test_projectors(self):
        layer = random_rotation_ssm(5, 3, np.random.default_rng(5))
        gp = gramians_block(layer)
        sigma = layer_hsvs(layer)
        r = max(1, min(6, int(np.sum(sigma > 1e-4 * sigma[0]))))
        V, W, s, r_used, warning = balancing_projectors(gp, r)
        assert r_used == r and warning is None
        np.testing.assert_allclose(W.T @ V, np.eye(r), atol=1e-8)
        np.testing.assert_allclose(W.T @ gp.P @ W, np.diag(s[:r]), atol=1e-8 * s[0])
        np.testing.assert_allclose(V.T @ gp.Q @ V, np.diag(s[:r]), atol=1e-8 * s[0])

    def test_full_order_is_balanced(self):
        layer = random_rotation_ssm(2, 2, np.random.default_rng(6))
        reduced = compress_layer(layer, layer.n)
        assert reduced.r == layer.n
        gp = dense_gramians(reduced.as_dense())
        s = reduced.sigmas
        tol = 1e-8 * s[0] * (s[0] / s[-1])
        np.testing.assert_allclose(gp.P, np.diag(s), atol=tol)
        np.testing.assert_allclose(gp.Q, np.diag(s), atol=tol)

    def test_reduced_is_stable(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            layer = random_rotation_ssm(int(rng.integers(1, 6)), 2, rng)
            reduced = compress_layer(layer, int(rng.integers(1, layer.n + 1)))
            assert reduced.spectral_radius() < 1.0 + 1e-10

    def test_order_above_numerical_rank_is_clipped(self):
        sys = DenseSSM(np.diag([0.5, 0.3]), [[1.0], [0.0]], [[1.0, 1.0]], [[0.0]])
        reduced = balanced_truncation(sys, dense_gramians(sys), 2)
        assert reduced.r == 1
        assert 'clipped' in reduced.warning

    def test_zero_hankel_operator(self):
        sys = DenseSSM(np.diag([0.5, 0.3]), np.ones((2, 1)), np.zeros((1, 2)), [[0.7]])
        reduced = balanced_truncation(sys, dense_gramians(sys), 1)
        assert reduced.r == 1
        u = np.random.default_rng(8).standard_normal((10, 1))
        np.testing.assert_allclose(reduced.simulate(u), 0.7 * u)

    def test_order_above_state_dimension(self):
        layer = random_rotation_ssm(2, 1, np.random.default_rng(9))
        dense = realize(layer)
        with pytest.raises(ConfigError):
            balanced_truncation(dense, gramians_block(layer), layer.n + 1)


class TestRankByEnergy:
    def test_examples(self):
        assert rank_by_energy([3.0, 1.0], 0.75).rank == 1
        assert rank_by_energy([1.0, 1.0, 1.0, 1.0], 0.99).rank == 4
        pick = rank_by_energy([2.0, 1.0, 0.0, 0.0], 1.0)
        assert pick.rank == 2 and pick.achieved_energy == 1.0

    def test_achieved_at_least_fraction(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = np.sort(rng.exponential(size=10))[::-1]
            fraction = rng.uniform(0.1, 1.0)
            pick = rank_by_energy(s, fraction)
            assert pick.achieved_energy >= fraction - 1e-12
            if pick.rank > 1:
                assert np.sum(s[:pick.rank - 1]) / np.sum(s) < fraction

    def test_zero_energy(self):
        pick = rank_by_energy(np.zeros(4))
        assert pick.rank == 1 and pick.degenerate

    @pytest.mark.parametrize('fraction', [0.0, -0.5, 1.5])
    def test_invalid_fraction(self, fraction):
        with pytest.raises(ConfigError):
            rank_by_energy([1.0, 0.5], fraction)


class TestBisection:
    def test_single_layer(self):
        plan = allocate_ranks_bisection(hsv_report([np.array([4.0, 2.0, 1.0, 1.0])]), 2)
        assert plan.ranks == [2]

    def test_identical_layers(self):
        s = np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.1])
        plan = allocate_ranks_bisection(hsv_report([s, s, s]), 3)
        assert plan.ranks == [3, 3, 3]

    def test_fast_and_flat_layers(self):
        fast = np.array([1.0, 1e-2, 1e-4, 1e-6])
        flat = np.ones(4)
        plan = allocate_ranks_bisection(hsv_report([fast, flat]), 2.5)
        assert plan.ranks == [1, 4]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            depth = int(rng.integers(1, 5))
            dims = [2 * int(rng.integers(1, 9)) for _ in range(depth)]
            if sum(dims) > 64:
                continue
            report = decay_report(rng, dims)
            target = rng.uniform(1.0, max(dims))
            plan = allocate_ranks_bisection(report, target)
            assert plan.mean_rank <= target
            assert plan.iterations <= 100
            assert np.mean(plan.ranks) == pytest.approx(np.mean(brute_force_allocation(report, target)))

    def test_loose_target_keeps_everything(self):
        report = decay_report(np.random.default_rng(2), [4, 6])
        plan = allocate_ranks_bisection(report, 10)
        assert plan.ranks == [4, 6]

    def test_invalid_target(self):
        with pytest.raises(ConfigError):
            allocate_ranks_bisection(hsv_report([np.ones(2)]), 0)

    def test_truncation_ratio(self):
        report = decay_report(np.random.default_rng(3), [32, 32])
        plan = plan_by_truncation_ratio(report, 0.5)
        assert plan.mean_rank <= 16
        assert plan.criterion == 'truncation_ratio'
        with pytest.raises(ConfigError):
            plan_by_truncation_ratio(report, 1.0)

    def test_budget(self):
        report = decay_report(np.random.default_rng(4), [8, 8, 8])
        plan = plan_by_budget(report, 12)
        assert sum(plan.ranks) <= 12

    def test_energy_plan(self):
        report = hsv_report([np.array([3.0, 1.0]), np.zeros(2)])
        plan = plan_by_energy(report, 0.75)
        assert plan.ranks == [1, 1]
        assert plan.degenerate == [False, True]


class TestDiagonalize:
    def test_real_diagonal(self):
        reduced = ReducedSSM(DENSE_REAL, np.eye(2), np.eye(2), np.zeros((2, 2)), A=np.diag([0.5, -0.2]))
        diag = diagonalize(reduced)
        assert diag.mode == DIAGONAL_COMPLEX
        np.testing.assert_allclose(np.sort(diag.lam.real), [-0.2, 0.5])
        u = np.random.default_rng(0).standard_normal((20, 2))
        np.testing.assert_allclose(diag.simulate(u), reduced.simulate(u), atol=1e-12)

    def test_rotation_pairs(self):
        rng = np.random.default_rng(1)
        layer = random_rotation_ssm(4, 2, rng)
        dense = compress_layer(layer, 6)
        diag = diagonalize(dense)
        assert diag.mode == DIAGONAL_COMPLEX
        assert diag.r == dense.r
        u = rng.standard_normal((64, 2))
        y = dense.simulate(u)
        y_diag = diag.simulate(u)
        assert np.isrealobj(y_diag)
        assert np.max(np.abs(y_diag - y)) <= 1e-7 * max(1.0, np.max(np.abs(y)))
        eig = np.linalg.eigvals(dense.A)
        np.testing.assert_allclose(np.sort_complex(diag.lam), np.sort_complex(eig), atol=1e-10)

    def test_defective_matrix_falls_back(self):
        reduced = ReducedSSM(DENSE_REAL, np.ones((2, 1)), np.ones((1, 2)), np.zeros((1, 1)),
                             A=np.array([[0.5, 1.0], [0.0, 0.5]]))
        out = diagonalize(reduced)
        assert out.mode == DENSE_REAL
        assert 'diagonalization skipped' in out.warning

    def test_compress_layer_diagonal(self):
        layer = random_rotation_ssm(3, 2, np.random.default_rng(2))
        reduced = compress_layer(layer, 4, diagonal=True)
        assert reduced.mode in (DIAGONAL_COMPLEX, DENSE_REAL)
        assert reduced.spectral_radius() < 1.0 + 1e-10


class TestCertificate:
    def test_rows(self):
        rng = np.random.default_rng(0)
        reduced = [compress_layer(random_rotation_ssm(3, 2, rng), r) for r in (2, 4)]
        rows = certificate_rows(reduced)
        assert [row['r'] for row in rows] == [2, 4]
        for row, red in zip(rows, reduced):
            assert row['tail_sum'] == red.truncated_tail
            assert row['bound_constant'] == 2 * red.truncated_tail
