"""Shared fixtures: the two-plant benchmark scenario and random test systems."""

import numpy as np
import pytest

from wncsim import Scenario, SubsystemModel, compile_gains, parse_scenario
from wncsim.numerics import is_controllable, is_observable, sqrtm_psd


@pytest.fixture(scope="session")
def two_plant():
    """The built-in two-subsystem benchmark (unstable plant 1, stable plant 2)."""
    return parse_scenario("two-plant")


@pytest.fixture(scope="session")
def two_plant_gains(two_plant):
    return compile_gains(two_plant)


def make_scalar_model(a, b=1.0, c=1.0, q=1.0, r=0.01, w=0.1, v=0.01,
                      q_link=1.0, index=1, x0_mean=0.0, x0_cov=None):
    if x0_cov is None:
        x0_cov = w
    return SubsystemModel(
        index=index,
        A=[[a]], B=[[b]], C=[[c]], Q=[[q]], R=[[r]], W=[[w]], V=[[v]],
        x0_mean=[x0_mean], x0_cov=[[x0_cov]], q_link=q_link,
    )


def random_system(rng, n_max=4, need_filter=False):
    """Random well-posed LTI system for solver stress tests."""
    while True:
        n = rng.integers(1, n_max + 1)
        m = rng.integers(1, n + 1)
        p = rng.integers(1, n + 1)
        a = rng.standard_normal((n, n))
        radius = np.max(np.abs(np.linalg.eigvals(a)))
        if radius > 0:
            a = a * rng.uniform(0.3, 1.25) / radius
        b = rng.standard_normal((n, m))
        c = rng.standard_normal((p, n))
        mq = rng.standard_normal((n, n))
        q = mq @ mq.T + 0.1 * np.eye(n)
        mr = rng.standard_normal((m, m))
        r = mr @ mr.T + 0.1 * np.eye(m)
        mw = rng.standard_normal((n, n))
        w = mw @ mw.T + 0.1 * np.eye(n)
        v = np.diag(rng.uniform(0.01, 0.5, size=p))
        ok = is_controllable(a, b) and is_observable(a, sqrtm_psd(q))
        if need_filter:
            ok = ok and is_observable(a, c) and is_controllable(a, sqrtm_psd(w))
        if ok:
            return a, b, c, q, r, w, v


def random_psd(rng, n):
    m = rng.standard_normal((n, n))
    return m @ m.T


def single_plant_scenario(model, scheme="voi", threshold=0.0, horizon=1000,
                          trials=1, seed=7, **kwargs):
    from wncsim.policy import PolicyConfig

    return Scenario(
        subsystems=[model],
        policies=[PolicyConfig(scheme, threshold)],
        horizon=horizon,
        n_trials=trials,
        base_seed=seed,
        **kwargs,
    )
