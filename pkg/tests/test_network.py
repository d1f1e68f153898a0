"""Feature network, projection, adaptive law, and serialization."""

import io

import numpy as np
import pytest

from deepmpc import network as net
from deepmpc.errors import ConfigurationError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def benchmark_net(rng):
    return net.init_feature_network([2, 5, 5, 3], ["relu", "relu", "tanh"], rng)


class TestForward:
    def test_bias_entry_always_one(self, benchmark_net, rng):
        for _ in range(20):
            phi = net.forward_features(benchmark_net, rng.normal(size=2))
            assert phi[0] == 1.0

    def test_zero_weights_give_unit_vector(self):
        weights = (np.zeros((3, 4)), np.zeros((5, 2)))
        stack = net.FeatureNetwork(weights=weights, activations=("relu", "tanh"))
        phi = net.forward_features(stack, np.array([1.0, -2.0]))
        np.testing.assert_array_equal(phi, [1, 0, 0])

    def test_benchmark_shape_and_bound(self, benchmark_net, rng):
        assert benchmark_net.widths == [2, 5, 5, 3]
        assert benchmark_net.feature_dim == 4
        assert benchmark_net.sigma_bound == 2.0
        for _ in range(200):
            phi = net.forward_features(benchmark_net, rng.uniform(-5, 5, size=2))
            assert np.linalg.norm(phi) <= 2.0

    def test_matches_manual_composition(self, benchmark_net):
        x = np.array([0.3, -0.7])
        z = x
        for w, act in zip(benchmark_net.weights, benchmark_net.activations):
            pre = w.T @ np.concatenate(([1.0], z))
            z = np.maximum(pre, 0) if act == "relu" else np.tanh(pre)
        np.testing.assert_allclose(net.forward_features(benchmark_net, x),
                                   np.concatenate(([1.0], z)), rtol=1e-15)

    def test_batch_forward_matches_single(self, benchmark_net, rng):
        xs = rng.normal(size=(7, 2))
        phi_batch, _ = net.forward_with_cache(benchmark_net, xs)
        for i, x in enumerate(xs):
            np.testing.assert_allclose(phi_batch[i],
                                       net.forward_features(benchmark_net, x),
                                       rtol=1e-14)

    def test_unbounded_last_activation_rejected(self):
        with pytest.raises(ConfigurationError):
            net.FeatureNetwork(weights=(np.zeros((3, 2)),), activations=("relu",))

    def test_init_respects_fan_in_bound(self, rng):
        stack = net.init_feature_network([4, 8, 3], ["relu", "tanh"], rng)
        for w, n_in in zip(stack.weights, [4, 8]):
            assert np.max(np.abs(w)) <= 1.0 / np.sqrt(n_in + 1)


class TestAdaptiveControl:
    def test_zero_weights_zero_control(self):
        ow = net.OutputWeights.zeros(4, [0.5], 0.5)
        np.testing.assert_array_equal(net.adaptive_control(ow, np.ones(4)), [0.0])

    def test_bias_column_picks_bias(self):
        k = np.zeros((4, 1))
        k[0, 0] = 1.0
        ow = net.OutputWeights(k, [2.0], 0.5)
        phi = np.array([1.0, 0.3, -0.2, 0.9])
        assert net.adaptive_control(ow, phi)[0] == -1.0

    def test_matches_dot_products(self, rng):
        for _ in range(30):
            k = rng.normal(size=(5, 3)) * 0.1
            phi = np.concatenate(([1.0], rng.normal(size=4)))
            ow = net.OutputWeights(k, [5.0, 5.0, 5.0], 0.3)
            expected = np.array([-float(k[:, i] @ phi) for i in range(3)])
            np.testing.assert_allclose(net.adaptive_control(ow, phi), expected,
                                       rtol=1e-14)

    def test_control_bounded_by_authority(self, rng):
        bounds = np.array([0.2, 0.4])
        sigma = 2.0
        u_max_a, _ = net.control_authority_bounds(bounds, sigma, 0.05, 0.01)
        for _ in range(300):
            k = net.project_columns(rng.normal(size=(4, 2)), bounds)
            phi = rng.normal(size=4)
            phi = phi / max(1.0, np.linalg.norm(phi) / sigma)
            ow = net.OutputWeights(k, bounds, 0.5)
            assert np.linalg.norm(net.adaptive_control(ow, phi)) <= u_max_a + 1e-12


class TestProjection:
    def test_inside_ball_unchanged(self, rng):
        k = rng.normal(size=(4, 2)) * 0.01
        np.testing.assert_array_equal(net.project_columns(k, [1.0, 1.0]), k)

    def test_idempotent(self, rng):
        k = rng.normal(size=(6, 3)) * 10
        bounds = np.array([0.5, 1.0, 2.0])
        once = net.project_columns(k, bounds)
        np.testing.assert_array_equal(net.project_columns(once, bounds), once)

    def test_rescales_violating_column(self):
        k = np.zeros((3, 1))
        k[1, 0] = 5.0
        got = net.project_columns(k, [1.0])
        assert np.linalg.norm(got) == pytest.approx(1.0)
        np.testing.assert_allclose(got / np.linalg.norm(got),
                                   k / np.linalg.norm(k))

    def test_projection_inner_product_property(self, rng):
        # (w* - proj(kbar))' (kbar - proj(kbar)) <= 0 for w* inside the ball
        bounds = np.array([1.3])
        for _ in range(500):
            k_bar = rng.normal(size=(5, 1)) * rng.uniform(0.1, 4.0)
            k = net.project_columns(k_bar, bounds)
            w_star = rng.normal(size=(5, 1))
            norm = np.linalg.norm(w_star)
            if norm > bounds[0]:
                w_star *= rng.uniform(0, bounds[0]) / norm
            inner = float(((w_star - k).T @ (k_bar - k)).item())
            assert inner <= 1e-12


class TestUpdateLaw:
    def test_no_innovation_no_change(self, rng):
        ow = net.OutputWeights(rng.normal(size=(4, 1)) * 0.1, [1.0], 0.5)
        phi = np.concatenate(([1.0], rng.normal(size=3)))
        x_nom = rng.normal(size=2)
        g = np.array([[0.0], [0.05]])
        updated = net.update_output_weights(ow, phi, x_nom, x_nom, g)
        np.testing.assert_allclose(updated.k_matrix, ow.k_matrix, atol=1e-16)

    def test_matches_innovation_oracle(self, rng):
        # the pre-projection update must equal K + (theta/|phi|^2) phi utilde'
        # where utilde is the ground-truth u_a + h
        theta = 0.5
        for _ in range(200):
            g = rng.normal(size=(3, 2)) + 2 * np.eye(3, 2)
            phi = np.concatenate(([1.0], rng.normal(size=4)))
            ow = net.OutputWeights(rng.normal(size=(5, 2)) * 0.05,
                                   [10.0, 10.0], theta)
            u_tilde = rng.normal(size=2)  # u_a + h, the matched disturbance
            x_nom = rng.normal(size=3)
            x_next = x_nom + g @ u_tilde
            updated = net.update_output_weights(ow, phi, x_next, x_nom, g)
            expected = ow.k_matrix + (theta / (phi @ phi)) * np.outer(phi, u_tilde)
            np.testing.assert_allclose(updated.k_matrix, expected, atol=1e-10)

    def test_column_rescaled_direction_preserved(self):
        theta = 0.5
        ow = net.OutputWeights(np.zeros((2, 1)), [1.0], theta)
        phi = np.array([1.0, 0.0])
        # innovation so large the raw update lands at norm 5
        g = np.eye(1)
        x_nom = np.zeros(1)
        x_next = np.array([10.0 / theta])
        updated = net.update_output_weights(ow, phi, x_next, x_nom, g)
        # phi = e1, |phi|^2 = 1 -> kbar = [theta * 10/theta, 0] = [10*.5.., 0]
        k_bar = theta / 1.0 * 10.0 / theta
        assert np.linalg.norm(updated.k_matrix) == pytest.approx(1.0)
        np.testing.assert_allclose(updated.k_matrix[:, 0],
                                   [k_bar, 0.0] / np.linalg.norm([k_bar, 0.0]))

    def test_bounds_invariant_under_fuzz(self, rng):
        bounds = np.array([0.3, 0.7])
        ow = net.OutputWeights.zeros(5, bounds, 0.5)
        g = np.vstack([np.eye(2), np.zeros((1, 2))])
        for _ in range(2000):
            phi = np.concatenate(([1.0], rng.normal(size=4)))
            x_nom = rng.normal(size=3)
            x_next = x_nom + g @ rng.normal(size=2) * 3
            ow = net.update_output_weights(ow, phi, x_next, x_nom, g)
            assert np.all(np.linalg.norm(ow.k_matrix, axis=0) <= bounds + 1e-12)


class TestAuthorityBounds:
    def test_zero_bounds(self):
        u_max_a, w_prime = net.control_authority_bounds([0.0], 2.0, 0.05, 0.01)
        assert u_max_a == 0.0
        assert w_prime == 0.01

    def test_formula(self):
        u_max_a, w_prime = net.control_authority_bounds([0.5], 2.0, 0.05, 0.01)
        assert u_max_a == pytest.approx(1.0)
        assert w_prime == pytest.approx(0.06)

    def test_homogeneous_in_bounds(self):
        base, _ = net.control_authority_bounds([0.2, 0.3], 2.0, 0.05, 0.0)
        scaled, _ = net.control_authority_bounds([0.6, 0.9], 2.0, 0.05, 0.0)
        assert scaled == pytest.approx(3 * base)

    def test_empty_tail_set_rejected(self):
        with pytest.raises(ConfigurationError):
            net.control_authority_bounds([0.5], 2.0, 0.05, 0.01, u_max=0.9)


class TestLearningRateValidation:
    @pytest.mark.parametrize("theta", [0.0, 1.0, -0.1, 1.5])
    def test_endpoints_rejected(self, theta):
        with pytest.raises(ConfigurationError):
            net.OutputWeights.zeros(4, [1.0], theta)


class TestIdealOracle:
    def test_exact_reconstruction(self, benchmark_net, rng):
        w_star = rng.normal(size=(4, 1)) * 0.1
        oracle = net.IdealOracle(w_star=w_star, net=benchmark_net)
        for _ in range(20):
            x = rng.normal(size=2)
            phi = net.forward_features(benchmark_net, x)
            np.testing.assert_array_equal(oracle.eval(x, 0, None),
                                          w_star.T @ phi)
            np.testing.assert_array_equal(oracle.reconstruction_error(x, phi),
                                          np.zeros(1))


class TestSerialization:
    def test_round_trip_exact(self, benchmark_net):
        text = net.network_to_text(benchmark_net)
        restored = net.network_from_text(text)
        assert restored.activations == benchmark_net.activations
        assert restored.generation == benchmark_net.generation
        for a, b in zip(restored.weights, benchmark_net.weights):
            np.testing.assert_array_equal(a, b)

    def test_file_round_trip(self, benchmark_net, tmp_path):
        path = tmp_path / "stack.txt"
        net.save_network(benchmark_net, path)
        restored = net.load_network(path)
        for a, b in zip(restored.weights, benchmark_net.weights):
            np.testing.assert_array_equal(a, b)
