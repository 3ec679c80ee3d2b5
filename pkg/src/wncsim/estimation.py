"""Remote estimators for both sensor architectures.

Conventional sensors ship raw measurements, so the remote side runs a
Kalman filter with intermittent observations.  Smart sensors filter
locally at the steady-state gain and ship their posterior; the remote
side either adopts it (on success) or propagates through the closed-loop
dynamics.  The sensor keeps a replica of the remote state, which stays
exact because ACK/NACK reveals every packet outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import SubsystemModel
from .errors import ModelInvalidError
from .numerics import OfflineGains, kalman_gain, riccati_correct, riccati_predict


@dataclass
class RemoteEstimatorState:
    """Posterior estimate, posterior covariance, and slots since last success."""

    x_hat: np.ndarray
    P: np.ndarray
    t_since_success: int = 0

    def copy(self) -> "RemoteEstimatorState":
        return RemoteEstimatorState(self.x_hat.copy(), self.P.copy(), self.t_since_success)


@dataclass
class SmartSensorState:
    """Local steady-state filter posterior plus the sensor's replica of the remote estimator."""

    x_hat_s: np.ndarray
    replica: RemoteEstimatorState

    def copy(self) -> "SmartSensorState":
        return SmartSensorState(self.x_hat_s.copy(), self.replica.copy())


def conventional_estimator_step(
    est: RemoteEstimatorState,
    u_prev: np.ndarray,
    gamma: int,
    y: np.ndarray | None,
    model: SubsystemModel,
) -> RemoteEstimatorState:
    """One predict(+correct) step driven by the packet outcome gamma."""
    if gamma and y is None:
        raise ModelInvalidError("conventional_estimator_step: gamma=1 requires a measurement")
    x_prior = model.A @ est.x_hat + model.B @ u_prev
    p_prior = riccati_predict(est.P, model.A, model.W)
    if gamma:
        k = kalman_gain(p_prior, model.C, model.V)
        x_post = x_prior + k @ (y - model.C @ x_prior)
        p_post = riccati_correct(p_prior, model.C, model.V)
        return RemoteEstimatorState(x_post, p_post, 0)
    return RemoteEstimatorState(x_prior, p_prior, est.t_since_success + 1)


def smart_sensor_filter_step(
    sensor: SmartSensorState,
    y: np.ndarray,
    u_prev: np.ndarray,
    model: SubsystemModel,
    gains: OfflineGains,
) -> SmartSensorState:
    """Local filter update at the steady gain; covariance stays pinned at p_bar."""
    pred = model.A @ sensor.x_hat_s + model.B @ u_prev
    x_post = pred + gains.k_steady @ (y - model.C @ pred)
    return replace(sensor, x_hat_s=x_post)


def smart_remote_step(
    est: RemoteEstimatorState,
    gamma: int,
    x_hat_s: np.ndarray | None,
    model: SubsystemModel,
    gains: OfflineGains,
) -> RemoteEstimatorState:
    """Adopt the sensor posterior on success, else closed-loop prediction."""
    if gamma:
        if x_hat_s is None:
            raise ModelInvalidError("smart_remote_step: gamma=1 requires the sensor payload")
        return RemoteEstimatorState(np.array(x_hat_s, dtype=float), gains.p_bar.copy(), 0)
    return RemoteEstimatorState(
        gains.a_closed @ est.x_hat,
        riccati_predict(est.P, model.A, model.W),
        est.t_since_success + 1,
    )


def innovation_discrepancy(sensor: SmartSensorState, gains: OfflineGains) -> np.ndarray:
    """Sensor posterior minus the remote estimate that will hold if no packet arrives.

    Expects the sensor filter already updated for the current slot while the
    replica still carries the remote state of the previous slot.
    """
    return sensor.x_hat_s - gains.a_closed @ sensor.replica.x_hat
