"""Estimator tests: intermittent-observation filter, smart-sensor filter, discrepancy."""

import numpy as np
import pytest

from wncsim import (
    RemoteEstimatorState,
    SmartSensorState,
    conventional_estimator_step,
    innovation_discrepancy,
    smart_remote_step,
    smart_sensor_filter_step,
)
from wncsim.errors import ModelInvalidError
from wncsim.numerics import compute_offline_gains, riccati_correct, riccati_predict

from conftest import make_scalar_model


def scalar_gains(model):
    return compute_offline_gains(
        model.A, model.B, model.C, model.Q, model.R, model.W, model.V
    )


class TestConventionalStep:
    def test_dropout_is_pure_prediction(self):
        m = make_scalar_model(0.9)
        est = RemoteEstimatorState(np.array([2.0]), np.array([[0.05]]), 3)
        out = conventional_estimator_step(est, np.array([0.5]), 0, None, m)
        assert out.x_hat[0] == pytest.approx(0.9 * 2.0 + 0.5)
        assert out.P[0, 0] == pytest.approx(0.81 * 0.05 + 0.1)
        assert out.t_since_success == 4

    def test_perfect_measurement_limit(self):
        m = make_scalar_model(0.9, v=1e-14)
        est = RemoteEstimatorState(np.array([2.0]), np.array([[0.05]]), 1)
        y = np.array([7.0])
        out = conventional_estimator_step(est, np.zeros(1), 1, y, m)
        assert out.x_hat[0] == pytest.approx(7.0, abs=1e-9)
        assert out.P[0, 0] < 1e-10
        assert out.t_since_success == 0

    def test_scalar_posterior_covariance_arithmetic(self):
        m = make_scalar_model(0.9, w=0.1, v=0.01)
        est = RemoteEstimatorState(np.zeros(1), np.array([[0.05]]), 0)
        out = conventional_estimator_step(est, np.zeros(1), 1, np.array([0.1]), m)
        prior = 0.81 * 0.05 + 0.1  # 0.1405
        assert out.P[0, 0] == pytest.approx(prior * 0.01 / (prior + 0.01), rel=1e-10)
        assert out.P[0, 0] == pytest.approx(0.009336, abs=5e-7)

    def test_covariance_follows_maps_exactly(self):
        m = make_scalar_model(1.1)
        p = np.array([[0.3]])
        est = RemoteEstimatorState(np.zeros(1), p.copy(), 0)
        dropped = conventional_estimator_step(est, np.zeros(1), 0, None, m)
        assert np.array_equal(dropped.P, riccati_predict(p, m.A, m.W))
        received = conventional_estimator_step(est, np.zeros(1), 1, np.array([1.0]), m)
        assert np.array_equal(
            received.P, riccati_correct(riccati_predict(p, m.A, m.W), m.C, m.V)
        )

    def test_missing_measurement_contract(self):
        m = make_scalar_model(0.9)
        est = RemoteEstimatorState(np.zeros(1), np.array([[0.1]]), 0)
        with pytest.raises(ModelInvalidError):
            conventional_estimator_step(est, np.zeros(1), 1, None, m)


class TestSmartSensorFilter:
    def test_zero_innovation_reduces_to_prediction(self):
        m = make_scalar_model(0.9)
        g = scalar_gains(m)
        sensor = SmartSensorState(
            np.array([2.0]), RemoteEstimatorState(np.array([2.0]), g.p_bar.copy(), 0)
        )
        u = np.array([0.3])
        pred = 0.9 * 2.0 + 0.3
        out = smart_sensor_filter_step(sensor, np.array([pred]), u, m, g)
        assert out.x_hat_s[0] == pytest.approx(pred)

    def test_near_perfect_sensor_tracks_measurement(self):
        m = make_scalar_model(0.9, v=1e-12)
        g = scalar_gains(m)
        sensor = SmartSensorState(
            np.array([0.0]), RemoteEstimatorState(np.zeros(1), g.p_bar.copy(), 0)
        )
        out = smart_sensor_filter_step(sensor, np.array([5.0]), np.zeros(1), m, g)
        assert out.x_hat_s[0] == pytest.approx(5.0, abs=1e-5)

    def test_long_run_error_covariance_matches_fixed_point(self, two_plant, two_plant_gains):
        m, g = two_plant.subsystems[0], two_plant_gains[0]
        rng = np.random.default_rng(123)
        steps = 100_000
        x = rng.multivariate_normal(np.zeros(2), m.W)
        sensor = SmartSensorState(
            np.zeros(2), RemoteEstimatorState(np.zeros(2), g.p_bar.copy(), 0)
        )
        errors = np.empty((steps, 2))
        u = np.zeros(2)
        for k in range(steps):
            y = m.C @ x + rng.multivariate_normal(np.zeros(2), m.V)
            sensor = smart_sensor_filter_step(sensor, y, u, m, g)
            errors[k] = x - sensor.x_hat_s
            u = g.l_inf @ sensor.x_hat_s
            x = m.A @ x + m.B @ u + rng.multivariate_normal(np.zeros(2), m.W)
        emp = errors.T @ errors / steps
        assert np.linalg.norm(emp - g.p_bar) < 0.10 * np.linalg.norm(g.p_bar)


class TestSmartRemoteStep:
    def test_success_resets_to_sensor_posterior(self):
        m = make_scalar_model(0.9)
        g = scalar_gains(m)
        est = RemoteEstimatorState(np.array([5.0]), np.array([[0.7]]), 4)
        out = smart_remote_step(est, 1, np.array([1.25]), m, g)
        assert out.x_hat[0] == 1.25
        assert np.array_equal(out.P, g.p_bar)
        assert out.t_since_success == 0

    def test_two_dropouts_compose(self):
        m = make_scalar_model(0.9)
        g = scalar_gains(m)
        est = RemoteEstimatorState(np.array([1.0]), g.p_bar.copy(), 0)
        out = smart_remote_step(smart_remote_step(est, 0, None, m, g), 0, None, m, g)
        f = g.a_closed[0, 0]
        assert out.x_hat[0] == pytest.approx(f * f)
        expected = riccati_predict(riccati_predict(g.p_bar, m.A, m.W), m.A, m.W)
        assert np.allclose(out.P, expected)
        assert out.t_since_success == 2

    def test_scalar_closed_loop_prediction(self):
        # a = 0.9 with effective b l = -0.5 gives x+ = 0.4 x
        m = make_scalar_model(0.9)
        g = scalar_gains(m)
        forced = type(g)(
            pi_inf=g.pi_inf, l_inf=np.array([[-0.5]]), gamma_inf=g.gamma_inf,
            p_bar=g.p_bar, k_steady=g.k_steady, a_closed=np.array([[0.4]]),
        )
        est = RemoteEstimatorState(np.array([1.0]), g.p_bar.copy(), 0)
        out = smart_remote_step(est, 0, None, m, forced)
        assert out.x_hat[0] == pytest.approx(0.4)

    def test_missing_payload_contract(self):
        m = make_scalar_model(0.9)
        g = scalar_gains(m)
        est = RemoteEstimatorState(np.zeros(1), g.p_bar.copy(), 0)
        with pytest.raises(ModelInvalidError):
            smart_remote_step(est, 1, None, m, g)


class TestInnovationDiscrepancy:
    def test_zero_innovation_after_success_gives_zero(self):
        m = make_scalar_model(0.9)
        g = scalar_gains(m)
        x_post = np.array([2.0])
        replica = RemoteEstimatorState(x_post.copy(), g.p_bar.copy(), 0)
        sensor = SmartSensorState(x_post.copy(), replica)
        u = g.l_inf @ x_post
        pred = m.A @ x_post + m.B @ u
        sensor = smart_sensor_filter_step(sensor, m.C @ pred, u, m, g)
        assert abs(innovation_discrepancy(sensor, g)[0]) < 1e-14

    def test_single_step_equals_gain_times_innovation(self):
        m = make_scalar_model(0.9)
        g = scalar_gains(m)
        x_post = np.array([1.5])
        sensor = SmartSensorState(
            x_post.copy(), RemoteEstimatorState(x_post.copy(), g.p_bar.copy(), 0)
        )
        u = g.l_inf @ x_post
        pred = m.A @ x_post + m.B @ u
        nu = 0.37
        sensor = smart_sensor_filter_step(sensor, m.C @ pred + nu, u, m, g)
        assert innovation_discrepancy(sensor, g)[0] == pytest.approx(
            g.k_steady[0, 0] * nu
        )

    def test_multi_step_recursion_oracle(self):
        # under consecutive dropouts the discrepancy obeys e+ = A e + K nu
        m = make_scalar_model(1.1, q_link=0.6)
        g = scalar_gains(m)
        rng = np.random.default_rng(77)
        x = np.array([0.0])
        sensor = SmartSensorState(
            np.zeros(1), RemoteEstimatorState(np.zeros(1), g.p_bar.copy(), 0)
        )
        remote = RemoteEstimatorState(np.zeros(1), g.p_bar.copy(), 0)
        u = g.l_inf @ remote.x_hat
        e_recursive = np.zeros(1)
        for _ in range(400):
            y = m.C @ x + rng.normal(0, 0.1, size=1)
            pred = m.A @ sensor.x_hat_s + m.B @ u
            nu = y - m.C @ pred
            sensor = smart_sensor_filter_step(sensor, y, u, m, g)
            e_recursive = m.A @ e_recursive + g.k_steady @ nu
            assert innovation_discrepancy(sensor, g)[0] == pytest.approx(
                e_recursive[0], abs=1e-12
            )
            gamma = int(rng.random() < 0.6)
            payload = sensor.x_hat_s if gamma else None
            remote = smart_remote_step(remote, gamma, payload, m, g)
            sensor.replica = smart_remote_step(sensor.replica, gamma, payload, m, g)
            if gamma:
                e_recursive = np.zeros(1)
            u = g.l_inf @ remote.x_hat
            x = m.A @ x + m.B @ u + rng.normal(0, np.sqrt(0.1), size=1)
