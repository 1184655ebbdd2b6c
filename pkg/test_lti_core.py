"""
Tests for system representations, the reference recurrence and canonicalization
"""
import numpy as np
import pytest

from exceptions import DimensionError, UncontrollableError, UnstableSystemError
from lti_core import (DenseSSM, RotationSSM, convolve_impulse, impulse_response, random_rotation_ssm,
                      random_stable_dense, realize, realize_vjp, similarity_transform, simulate_sequential,
                      spectral_radius, to_rotation_form)


def single_block(rho: float, alpha_raw: float, C=(1.0, 0.0), D=0.0) -> RotationSSM:
    return RotationSSM([np.arctanh(rho)], [alpha_raw], np.zeros((2, 0)), [list(C)], [D])


def max_rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestRealize:
    def test_zero_angle_is_scaled_identity(self):
        sys = realize(single_block(0.5, -np.inf))
        np.testing.assert_allclose(sys.A, [[0.5, 0.0], [0.0, 0.5]], atol=1e-15)
        np.testing.assert_array_equal(sys.B, [[1.0], [0.0]])

    def test_quarter_turn(self):
        sys = realize(single_block(0.9, 0.0))
        np.testing.assert_allclose(sys.A, [[0.0, 0.9], [-0.9, 0.0]], atol=1e-15)

    def test_spectral_radius_equals_max_rho(self):
        rng = np.random.default_rng(7)
        layer = RotationSSM(rng.standard_normal(4), rng.standard_normal(4),
                            rng.standard_normal((8, 1)), rng.standard_normal((2, 8)), rng.standard_normal(2))
        radius = spectral_radius(realize(layer).A)
        assert radius < 1.0
        assert radius == pytest.approx(np.max(np.abs(layer.rho)), rel=1e-12)

    def test_always_stable(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = int(rng.integers(1, 6))
            layer = RotationSSM(5 * rng.standard_normal(q), 5 * rng.standard_normal(q),
                                rng.standard_normal((2 * q, 2)), rng.standard_normal((3, 2 * q)), np.zeros(3))
            assert spectral_radius(realize(layer).A) < 1.0

    @pytest.mark.parametrize('rho_raw', [25.0, -25.0, 1e6])
    def test_saturated_retention_stays_stable(self, rho_raw):
        layer = RotationSSM([rho_raw, 0.3], [0.3, -1.0], np.zeros((4, 0)), [[1.0, 0.0, 1.0, 0.0]], [0.0])
        assert np.tanh(rho_raw) in (1.0, -1.0)
        assert spectral_radius(realize(layer).A) < 1.0
        np.testing.assert_array_equal(layer.rho_mask, [0.0, 1.0])
        d_rho_raw, d_alpha_raw = realize_vjp(layer, np.ones((2, 2, 2)))
        assert d_rho_raw[0] == 0.0 and d_rho_raw[1] != 0.0
        assert np.all(np.isfinite(d_alpha_raw))

    def test_structural_input_column(self):
        layer = random_rotation_ssm(3, 4, np.random.default_rng(1))
        np.testing.assert_array_equal(layer.B[:, 0], [1, 0, 1, 0, 1, 0])
        np.testing.assert_array_equal(layer.B[:, 1:], layer.B_learn)

    def test_angle_range(self):
        layer = RotationSSM([0.0, 0.0, 0.0], [-50.0, 0.0, 50.0], np.zeros((6, 0)), np.zeros((1, 6)), [0.0])
        np.testing.assert_allclose(layer.alpha, [0.0, np.pi / 2, np.pi])

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            RotationSSM([0.0], [0.0, 1.0], np.zeros((2, 0)), np.zeros((1, 2)), [0.0])
        with pytest.raises(DimensionError):
            RotationSSM([0.0], [0.0], np.zeros((2, 0)), np.zeros((1, 3)), [0.0])


class TestSimulation:
    def test_memoryless_copy(self):
        sys = DenseSSM(np.zeros((2, 2)), np.eye(2), np.eye(2), np.zeros((2, 2)))
        u = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(simulate_sequential(sys, u), u)

    def test_geometric_accumulation(self):
        rho, L = 0.999, 200
        y = simulate_sequential(realize(single_block(rho, -np.inf)), np.ones((L, 1)))
        expected = (1.0 - rho ** np.arange(1, L + 1)) / (1.0 - rho)
        np.testing.assert_allclose(y[:, 0], expected, rtol=1e-12)

    @pytest.mark.parametrize('seed', range(5))
    def test_matches_convolution(self, seed):
        rng = np.random.default_rng(seed)
        sys = random_stable_dense(4, 2, 3, rng)
        u = rng.standard_normal((16, 2))
        y = simulate_sequential(sys, u)
        y_conv = convolve_impulse(impulse_response(sys, 17), u)
        assert max_rel(y, y_conv) <= 1e-10

    def test_batched_inputs(self):
        rng = np.random.default_rng(2)
        sys = random_stable_dense(4, 2, 2, rng)
        u = rng.standard_normal((10, 3, 2))
        y = simulate_sequential(sys, u)
        for b in range(3):
            np.testing.assert_allclose(y[:, b], simulate_sequential(sys, u[:, b]), rtol=1e-13)

    def test_dimension_mismatch(self):
        sys = random_stable_dense(4, 2, 2, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            simulate_sequential(sys, np.zeros((5, 3)))


class TestImpulseResponse:
    def test_nilpotent(self):
        rng = np.random.default_rng(0)
        B, C, D = rng.standard_normal((3, 2)), rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
        h = impulse_response(DenseSSM(np.zeros((3, 3)), B, C, D), 5).h
        np.testing.assert_array_equal(h[0], D)
        np.testing.assert_allclose(h[1], C @ B)
        np.testing.assert_array_equal(h[2:], 0.0)

    def test_scalar_geometric(self):
        h = impulse_response(DenseSSM([[0.5]], [[1.0]], [[1.0]], [[0.0]]), 5).h
        np.testing.assert_allclose(h[:, 0, 0], [0.0, 1.0, 0.5, 0.25, 0.125])

    def test_similarity_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            sys = random_stable_dense(5, 2, 2, rng)
            T = rng.standard_normal((5, 5)) + 3 * np.eye(5)
            h = impulse_response(sys, 40).h
            h_t = impulse_response(similarity_transform(sys, T), 40).h
            assert max_rel(h_t, h) <= 1e-9

    def test_geometric_decay(self):
        sys = random_stable_dense(6, 1, 1, np.random.default_rng(5), radius=0.7)
        h = np.abs(impulse_response(sys, 200).h[1:, 0, 0])
        assert h[-1] < 1e-20

    def test_taps_validation(self):
        with pytest.raises(DimensionError):
            impulse_response(DenseSSM([[0.5]], [[1.0]], [[1.0]], [[0.0]]), 0)


def diag_feedthrough(sys: DenseSSM) -> DenseSSM:
    return DenseSSM(sys.A, sys.B, sys.C, np.diag(np.diag(sys.D)))


class TestToRotationForm:
    @pytest.mark.parametrize('seed', range(5))
    def test_round_trip(self, seed):
        layer = random_rotation_ssm(4, 3, np.random.default_rng(seed))
        dense = realize(layer)
        back = to_rotation_form(dense)
        h = impulse_response(dense, 64).h
        h_back = impulse_response(realize(back), 64).h
        assert np.max(np.abs(h_back - h)) < 1e-8
        np.testing.assert_allclose(back.B[:, 0], np.tile([1.0, 0.0], back.q))

    def test_real_eigenvalues_are_padded(self):
        rng = np.random.default_rng(0)
        sys = DenseSSM(np.diag([0.1, -0.3]), rng.standard_normal((2, 2)) + 1.0,
                       rng.standard_normal((2, 2)), np.diag([0.2, 0.4]))
        layer = to_rotation_form(sys)
        assert layer.n == 4
        np.testing.assert_allclose(layer.alpha, 0.0, atol=1e-15)
        assert np.all(np.isfinite(layer.alpha_raw))
        np.testing.assert_array_equal(layer.padded, [False, True, False, True])
        assert sorted(layer.rho) == pytest.approx([-0.3, 0.1])
        h = impulse_response(sys, 32).h
        np.testing.assert_allclose(impulse_response(realize(layer), 32).h, h, atol=1e-12)

    def test_random_dense_system(self):
        rng = np.random.default_rng(3)
        sys = diag_feedthrough(random_stable_dense(6, 2, 2, rng))
        layer = to_rotation_form(sys)
        h = impulse_response(sys, 32).h
        h_rot = impulse_response(realize(layer), 32).h
        assert np.max(np.abs(h_rot - h)) <= 1e-6 * max(1.0, np.max(np.abs(h)))
        assert spectral_radius(realize(layer).A) < 1.0

    def test_eigenvalues_preserved(self):
        rng = np.random.default_rng(8)
        sys = diag_feedthrough(random_stable_dense(6, 2, 2, rng))
        layer = to_rotation_form(sys)
        original = np.sort(np.abs(np.linalg.eigvals(sys.A)))
        dense = realize(layer)
        keep = ~layer.padded
        rotated = np.sort(np.abs(np.linalg.eigvals(dense.A[np.ix_(keep, keep)])))
        np.testing.assert_allclose(rotated, original, rtol=1e-9)

    def test_rejects_non_square_io(self):
        sys = random_stable_dense(4, 2, 3, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            to_rotation_form(sys)

    def test_rejects_full_feedthrough(self):
        sys = random_stable_dense(4, 2, 2, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            to_rotation_form(sys)

    def test_rejects_unstable(self):
        sys = DenseSSM(np.diag([1.2, 0.1]), np.ones((2, 1)), np.ones((1, 2)), [[0.0]])
        with pytest.raises(UnstableSystemError):
            to_rotation_form(sys)

    def test_uncontrollable_pair(self):
        sys = DenseSSM(np.diag([0.2, 0.5]), np.zeros((2, 1)), np.ones((1, 2)), [[0.0]])
        with pytest.raises(UncontrollableError):
            to_rotation_form(sys)


class TestDenseSSM:
    def test_stable_tag_checks_radius(self):
        with pytest.raises(UnstableSystemError):
            DenseSSM(np.diag([1.0, 0.5]), np.ones((2, 1)), np.ones((1, 2)), [[0.0]], stable=True)

    def test_dimension_checks(self):
        with pytest.raises(DimensionError):
            DenseSSM(np.eye(2), np.ones((3, 1)), np.ones((1, 2)), [[0.0]])
        with pytest.raises(DimensionError):
            DenseSSM(np.eye(2), np.ones((2, 1)), np.ones((1, 2)), np.zeros((2, 2)))
