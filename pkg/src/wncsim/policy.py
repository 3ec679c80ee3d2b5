"""Event-triggering rules and contention priority measures.

Four schemes are supported:

* ``sod``     - send-on-delta at the sensor (conventional architecture).
* ``coil``    - covariance-based priority at the estimator (conventional).
* ``voi``     - realized estimate-discrepancy priority at a smart sensor.
* ``coilbar`` - covariance-based priority for smart sensors, a function of
                the dropout count alone.

For the covariance-driven schemes the triggering threshold applies to the
final priority (the link-success factor included), so the trigger and the
contention share one quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import SubsystemModel
from .errors import ModelInvalidError
from .numerics import OfflineGains, riccati_correct, riccati_predict

SCHEMES = ("sod", "coil", "voi", "coilbar")
SMART_SCHEMES = ("voi", "coilbar")


@dataclass(frozen=True)
class TriggerDecision:
    """Outcome of one per-slot trigger evaluation."""

    theta: int
    priority: float


@dataclass(frozen=True)
class PolicyConfig:
    scheme: str
    threshold: float = 0.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ModelInvalidError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.threshold < 0:
            raise ModelInvalidError(f"threshold must be >= 0, got {self.threshold}")

    @property
    def smart(self) -> bool:
        return self.scheme in SMART_SCHEMES


def _decide(priority: float, threshold: float) -> TriggerDecision:
    priority = max(float(priority), 0.0)
    return TriggerDecision(theta=int(priority >= threshold), priority=priority)


def coil_measure(p_post_prev: np.ndarray, model: SubsystemModel, gains: OfflineGains) -> float:
    """Expected one-step cost increase from not receiving, given last posterior covariance."""
    p_prior = riccati_predict(p_post_prev, model.A, model.W)
    p_corrected = riccati_correct(p_prior, model.C, model.V)
    return float(np.trace(gains.gamma_inf @ (p_prior - p_corrected)))


def evaluate_coil(
    p_post_prev: np.ndarray,
    model: SubsystemModel,
    gains: OfflineGains,
    q: float,
    threshold: float,
) -> TriggerDecision:
    return _decide(coil_measure(p_post_prev, model, gains) * q, threshold)


def voi_measure(e_check: np.ndarray, gains: OfflineGains) -> float:
    """Realized one-step cost gap: the discrepancy's quadratic form under the cost weight."""
    return float(e_check @ (gains.gamma_inf @ e_check))


def evaluate_voi(
    e_check: np.ndarray, gains: OfflineGains, q: float, threshold: float
) -> TriggerDecision:
    return _decide(voi_measure(e_check, gains) * q, threshold)


def coil_bar_measure(t_prev: int, model: SubsystemModel, gains: OfflineGains) -> float:
    """Covariance-gap priority for smart sensors after t_prev consecutive misses."""
    if t_prev < 0:
        raise ModelInvalidError(f"t_prev must be >= 0, got {t_prev}")
    x = gains.p_bar
    for _ in range(t_prev + 1):
        x = riccati_predict(x, model.A, model.W)
    return float(np.trace(gains.gamma_inf @ (x - gains.p_bar)))


def evaluate_coil_bar(
    t_prev: int,
    model: SubsystemModel,
    gains: OfflineGains,
    q: float,
    threshold: float,
) -> TriggerDecision:
    return _decide(coil_bar_measure(t_prev, model, gains) * q, threshold)


def sod_measure(y_now: np.ndarray, y_last_acked: np.ndarray) -> float:
    return float(np.linalg.norm(y_now - y_last_acked))


def evaluate_sod(y_now: np.ndarray, y_last_acked: np.ndarray, threshold: float) -> TriggerDecision:
    return _decide(sod_measure(y_now, y_last_acked), threshold)


def vbt_sleep_horizon(
    p_post: np.ndarray,
    model: SubsystemModel,
    gains: OfflineGains,
    q: float,
    threshold: float,
    cap: int = 1000,
) -> tuple[int, bool]:
    """Slots the sensor may sleep after a reception before the trigger can fire again.

    Returns (s, capped): s is the smallest count of further no-reception
    slots after which the covariance-based priority reaches the threshold,
    i.e. the trigger first fires s + 1 slots ahead.  When the priority
    cannot reach the threshold within ``cap`` slots, returns (cap, True).
    """
    p = np.array(p_post, dtype=float)
    for s in range(cap):
        priority = max(coil_measure(p, model, gains) * q, 0.0)
        if priority >= threshold:
            return s, False
        p = riccati_predict(p, model.A, model.W)
    return cap, True
