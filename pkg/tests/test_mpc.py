"""Tightening, governor, tracking MPC, and terminal ingredients."""

import numpy as np
import pytest

from deepmpc import mpc, plant
from deepmpc.errors import EmptyTightenedSet, GovernorInfeasible
from deepmpc.ocp import QpConfig


@pytest.fixture
def model():
    return plant.wingrock_model()


@pytest.fixture
def sets():
    return plant.wingrock_sets(w_max=0.0198)


def make_cfg(model, sets, tight, horizon=40, governor_horizon=None, r=0.1):
    cfg = mpc.MpcConfig(horizon=horizon, q=np.eye(2), r=np.array([[r]]),
                        governor_horizon=governor_horizon)
    ing = mpc.terminal_ingredients(model, cfg.q, cfg.r, tight.u_prime_bound,
                                   qf_scale=cfg.qf_scale)
    return cfg.with_terminal(ing), ing


@pytest.fixture
def tightened(model, sets):
    return mpc.tighten_constraints(sets, 0.0348, model, 40, u_max_a=0.3,
                                   x_margin=np.array([0.06, 0.12]))


class TestTightening:
    def test_zero_disturbance_zero_margin_identity(self, model, sets):
        tight = mpc.tighten_constraints(sets, 0.0, model, 20, u_max_a=0.0,
                                        u_margin_fraction=0.0)
        np.testing.assert_array_equal(tight.x_low, sets.state_low)
        np.testing.assert_array_equal(tight.x_high, sets.state_high)
        assert tight.u_r_bound == sets.u_max
        assert tight.u_prime_bound == sets.u_max

    def test_growth_sum_margin_formula(self, model, sets):
        w_prime = 1e-3
        tight = mpc.tighten_constraints(sets, w_prime, model, 10, u_max_a=0.1)
        rate = mpc.growth_rate(model, tight.u_r_bound)
        expected = w_prime * sum(rate**i for i in range(10))
        np.testing.assert_allclose(sets.state_low + expected, tight.x_low,
                                   rtol=1e-12)

    def test_oversized_margin_raises_with_coordinate(self, model, sets):
        with pytest.raises(EmptyTightenedSet) as err:
            mpc.tighten_constraints(sets, sets.state_high[0] + 0.1, model, 20,
                                    u_max_a=0.0, x_margin=np.pi)
        assert err.value.coordinate == 0

    def test_strict_inclusions_on_benchmark(self, model, sets, tightened):
        assert np.all(tightened.x_low > sets.state_low)
        assert np.all(tightened.x_high < sets.state_high)
        assert 0 < tightened.u_r_bound < tightened.u_prime_bound < sets.u_max

    def test_adaptive_authority_exhausting_input_raises(self, model, sets):
        with pytest.raises(EmptyTightenedSet):
            mpc.tighten_constraints(sets, 0.0, model, 20, u_max_a=sets.u_max)


class TestReferenceGovernor:
    def test_origin_start_gives_zero_trajectory(self, model, sets, tightened):
        cfg, _ = make_cfg(model, sets, tightened)
        ref = mpc.solve_reference_governor(model, np.zeros(2), cfg, tightened)
        np.testing.assert_allclose(ref.states, 0.0, atol=1e-9)
        np.testing.assert_allclose(ref.inputs, 0.0, atol=1e-9)

    def test_benchmark_feasible_at_horizon_40(self, model, sets, tightened):
        cfg, _ = make_cfg(model, sets, tightened)
        x0 = np.array([np.pi / 30, np.pi / 12])
        ref = mpc.solve_reference_governor(model, x0, cfg, tightened)
        assert np.linalg.norm(ref.states[-1]) <= 1e-6
        assert np.max(np.abs(ref.inputs)) <= tightened.u_r_bound + 1e-9
        assert np.all(ref.states[:-1] >= tightened.x_low - 1e-9)
        assert np.all(ref.states[:-1] <= tightened.x_high + 1e-9)
        # dynamic consistency of the stored trajectory
        for i in range(ref.horizon):
            np.testing.assert_allclose(ref.states[i + 1],
                                       model.nominal(ref.states[i], ref.inputs[i]),
                                       atol=1e-12)

    def test_single_step_horizon_infeasible(self, model, sets, tightened):
        cfg, _ = make_cfg(model, sets, tightened, horizon=1, governor_horizon=1)
        with pytest.raises(GovernorInfeasible):
            mpc.solve_reference_governor(
                model, np.array([np.pi / 30, np.pi / 12]), cfg, tightened)

    def test_start_outside_tightened_box_rejected(self, model, sets, tightened):
        cfg, _ = make_cfg(model, sets, tightened)
        with pytest.raises(GovernorInfeasible):
            mpc.solve_reference_governor(model, np.array([0.52, 0.0]), cfg,
                                         tightened)

    def test_zero_padding_beyond_horizon(self, model, sets, tightened):
        cfg, _ = make_cfg(model, sets, tightened)
        ref = mpc.solve_reference_governor(model, np.array([0.05, 0.05]), cfg,
                                           tightened)
        np.testing.assert_array_equal(ref.state(ref.horizon + 3), np.zeros(2))
        np.testing.assert_array_equal(ref.input(ref.horizon), np.zeros(1))

    def test_csv_round_trip(self, model, sets, tightened, tmp_path):
        cfg, _ = make_cfg(model, sets, tightened)
        ref = mpc.solve_reference_governor(model, np.array([0.05, 0.05]), cfg,
                                           tightened)
        path = tmp_path / "ref.csv"
        ref.save_csv(path)
        loaded = mpc.ReferenceTrajectory.load_csv(path, state_dim=2)
        np.testing.assert_array_equal(loaded.states, ref.states)
        np.testing.assert_array_equal(loaded.inputs, ref.inputs)


@pytest.fixture
def tracking_setup(model, sets, tightened):
    cfg, ing = make_cfg(model, sets, tightened)
    ref = mpc.solve_reference_governor(
        model, np.array([np.pi / 30, np.pi / 12]), cfg, tightened)
    return cfg, ing, ref


class TestTrackingMpc:
    def test_exact_tracking_on_reference(self, model, tightened, tracking_setup):
        cfg, _, ref = tracking_setup
        sol = mpc.solve_tracking_mpc(model, ref.states[0], np.zeros(1), ref, 0,
                                     cfg, tightened)
        np.testing.assert_allclose(sol.u_mpc, ref.inputs[0], atol=1e-6)
        assert sol.value <= 1e-8

    def test_origin_regulation_zero(self, model, tightened, tracking_setup):
        cfg, _, ref = tracking_setup
        sol = mpc.solve_tracking_mpc(model, np.zeros(2), np.zeros(1), ref,
                                     ref.horizon + 5, cfg, tightened)
        np.testing.assert_allclose(sol.u_mpc, 0.0, atol=1e-8)
        assert sol.value == pytest.approx(0.0, abs=1e-10)

    def test_stage_zero_box_shift(self, model, tightened, tracking_setup):
        # u_a at 0.1 shifts the first-stage admissible interval to
        # [-u_max - 0.1, u_max - 0.1]; force the optimizer onto the upper
        # edge and verify the clip location
        cfg, _, ref = tracking_setup
        u_a = np.array([0.1])
        x = np.array([0.0, -1.0])     # large negative rate needs max input
        sol = mpc.solve_tracking_mpc(model, x, u_a, ref, ref.horizon + 5, cfg,
                                     tightened)
        assert sol.u_mpc[0] <= tightened.u_max - 0.1 + 1e-12
        assert sol.u_mpc[0] == pytest.approx(tightened.u_max - 0.1, abs=1e-7)
        # total applied input stays admissible
        assert abs(sol.u_mpc[0] + u_a[0]) <= tightened.u_max + 1e-12

    def test_value_below_reference_control_cost(self, model, tightened,
                                                tracking_setup):
        # optimality: V_m(x) never exceeds the cost of just replaying the
        # reference inputs from x
        cfg, _, ref = tracking_setup
        rng = np.random.default_rng(4)
        for _ in range(100):
            t = int(rng.integers(0, ref.horizon))
            x = ref.state(t) + rng.normal(size=2) * 0.02
            sol = mpc.solve_tracking_mpc(model, x, np.zeros(1), ref, t, cfg,
                                         tightened)
            cost = 0.0
            xi = x.copy()
            for i in range(cfg.horizon):
                ex = xi - ref.state(t + i)
                cost += ex @ cfg.q @ ex
                xi = model.nominal(xi, ref.input(t + i))
            cost += xi @ cfg.q_terminal @ xi
            assert sol.value <= cost + 1e-7

    def test_intermediate_equals_tracking_at_same_state(self, model, tightened,
                                                        tracking_setup):
        cfg, _, ref = tracking_setup
        x = np.array([0.05, 0.1])
        sol = mpc.solve_tracking_mpc(model, x, np.zeros(1), ref, 3, cfg,
                                     tightened)
        v_hat = mpc.solve_intermediate(model, x, ref, 3, cfg, tightened,
                                       np.zeros(1))
        assert v_hat == pytest.approx(sol.value, abs=1e-8)

    def test_nominal_decrease_along_closed_loop(self, model, tightened,
                                                tracking_setup):
        # V_hat(x_{t+1|t}) - V_m(x_t) <= -c_s(x_t, u*) within solver slack
        cfg, _, ref = tracking_setup
        x = ref.states[0].copy()
        for t in range(30):
            sol = mpc.solve_tracking_mpc(model, x, np.zeros(1), ref, t, cfg,
                                         tightened)
            v_hat = mpc.solve_intermediate(model, sol.predicted_next, ref,
                                           t + 1, cfg, tightened, np.zeros(1))
            assert v_hat - sol.value <= -sol.stage_cost + 1e-6
            x = sol.predicted_next

    def test_value_nonincreasing_nominal(self, model, tightened, tracking_setup):
        cfg, _, ref = tracking_setup
        x = ref.states[0] + np.array([0.01, -0.01])
        values = []
        for t in range(40):
            sol = mpc.solve_tracking_mpc(model, x, np.zeros(1), ref, t, cfg,
                                         tightened)
            values.append(sol.value)
            x = sol.predicted_next
        diffs = np.diff(values)
        assert np.all(diffs <= 1e-6)


class TestTerminalIngredients:
    def test_deadbeat_riccati_fixed_point(self):
        # A = 0, B = I, Q = R = I: the Riccati recursion fixes P = Q
        model = plant.ControlAffineModel.linear(np.zeros((2, 2)), np.eye(2))
        ing = mpc.terminal_ingredients(model, np.eye(2), np.eye(2),
                                       u_prime_bound=1.0, qf_scale=1.0)
        p = np.eye(2)
        for _ in range(200):  # fixed-point oracle
            k = np.linalg.solve(np.eye(2) + p, np.zeros((2, 2)))
            p = np.eye(2)
        np.testing.assert_allclose(ing.q_terminal, p, atol=1e-10)

    def test_feedback_respects_tail_bound_on_level_set(self, model, sets,
                                                       tightened):
        _, ing = make_cfg(model, sets, tightened)
        rng = np.random.default_rng(0)
        chol = np.linalg.cholesky(np.linalg.inv(ing.q_terminal))
        for _ in range(2000):
            v = rng.normal(size=2)
            x = np.sqrt(ing.alpha) * (chol @ (v / np.linalg.norm(v)))
            assert np.max(np.abs(ing.gain @ x)) <= tightened.u_prime_bound + 1e-9

    def test_clf_inequality_on_benchmark(self, model, sets, tightened):
        cfg, ing = make_cfg(model, sets, tightened)
        report = mpc.verify_terminal_clf(model, cfg, ing, tightened,
                                         n_samples=10000)
        assert report.passed
        assert report.worst_margin >= -1e-9

    def test_origin_margin_zero(self, model, sets, tightened):
        cfg, ing = make_cfg(model, sets, tightened)
        x = np.zeros(2)
        u = -ing.gain @ x
        lhs = (model.nominal(x, u) @ ing.q_terminal @ model.nominal(x, u)
               - x @ ing.q_terminal @ x)
        assert lhs == pytest.approx(0.0, abs=1e-15)

    def test_halved_level_still_passes(self, model, sets, tightened):
        cfg, ing = make_cfg(model, sets, tightened)
        smaller = mpc.TerminalIngredients(q_terminal=ing.q_terminal,
                                          alpha=ing.alpha / 2, gain=ing.gain)
        report = mpc.verify_terminal_clf(model, cfg, smaller, tightened,
                                         n_samples=4000)
        assert report.passed

    def test_inflated_level_reported_failing(self, model, sets, tightened):
        cfg, ing = make_cfg(model, sets, tightened)
        inflated = mpc.TerminalIngredients(q_terminal=ing.q_terminal,
                                           alpha=ing.alpha * 100, gain=ing.gain)
        report = mpc.verify_terminal_clf(model, cfg, inflated, tightened,
                                         n_samples=4000)
        assert not report.passed
        assert report.worst_margin < 0

    def test_alpha_scales_with_authority(self, model):
        q, r = np.eye(2), np.array([[0.1]])
        big = mpc.terminal_ingredients(model, q, r, u_prime_bound=1.0)
        small = mpc.terminal_ingredients(model, q, r, u_prime_bound=0.5)
        assert big.alpha == pytest.approx(4 * small.alpha, rel=1e-9)


class TestConfigValidation:
    def test_alpha_below_tube_level_rejected(self):
        with pytest.raises(Exception):
            mpc.MpcConfig(horizon=5, q=np.eye(2), r=np.eye(1),
                          q_terminal=np.eye(2), alpha=0.5, tube_level=1.0)

    def test_indefinite_q_rejected(self):
        with pytest.raises(Exception):
            mpc.MpcConfig(horizon=5, q=np.diag([1.0, -0.1]), r=np.eye(1))
