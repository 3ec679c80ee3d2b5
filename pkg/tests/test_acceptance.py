"""Acceptance suite: one test per criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
summary lines.  The threshold grids below were calibrated once so that all
four schemes cover a common band of communication rates; they are fixed
constants of the suite.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from wncsim import (
    Scenario,
    compile_gains,
    parse_scenario,
    run_monte_carlo,
    run_trial,
    stability_diagnostic,
    theoretic_step_cost,
)
from wncsim.cli import main as cli_main
from wncsim.engine import TrialStreams, run_batch, trial_streams
from wncsim.network import dynamic_identifier
from wncsim.numerics import (
    feedback_gain,
    riccati_correct,
    riccati_predict,
    solve_dare,
    steady_state_covariance,
)
from wncsim.policy import PolicyConfig

from conftest import random_system
from test_numerics import scalar_dare_root, scalar_steady_posterior

SWEEP_GRIDS = {
    "voi": [0.0, 0.005, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8],
    "coil": [0.0, 0.02, 0.05, 0.08, 0.12, 0.2, 0.35, 0.6],
    "coilbar": [0.0, 0.02, 0.05, 0.08, 0.12, 0.2, 0.35, 0.6],
    "sod": [0.0, 0.1, 0.2, 0.35, 0.5, 0.8, 1.2, 2.0],
}
PROBE_RATES = [0.3, 0.45, 0.6]

_ALL_RESULTS = []  # every Monte Carlo result produced here, for the collision tally


def _mc(scenario, workers=1):
    result = run_monte_carlo(scenario, workers=workers)
    _ALL_RESULTS.append(result)
    return result


def clone_model(model, **overrides):
    fields = dict(
        index=model.index, A=model.A, B=model.B, C=model.C, Q=model.Q, R=model.R,
        W=model.W, V=model.V, x0_mean=model.x0_mean, x0_cov=model.x0_cov,
        q_link=model.q_link, static_id=model.static_id,
    )
    fields.update(overrides)
    return type(model)(**fields)


@pytest.fixture(scope="module")
def benchmark():
    return parse_scenario("two-plant")


@pytest.fixture(scope="module")
def benchmark_gains(benchmark):
    return compile_gains(benchmark)


@pytest.fixture(scope="module")
def fig5_sweep(benchmark, benchmark_gains):
    """Full-scale sweep: 1000 trials x K=1000 per (scheme, threshold) cell."""
    t0 = time.time()
    curves = {}
    for scheme, thresholds in SWEEP_GRIDS.items():
        points = []
        for th in thresholds:
            mc = _mc(benchmark.with_policy(scheme, th), workers=2)
            points.append({
                "threshold": th,
                "rate": mc.attempt_rate_mean,
                "rate_se": mc.attempt_rate_stderr,
                "cost": mc.cost_rate_mean,
                "cost_se": mc.cost_rate_stderr,
            })
        curves[scheme] = points
    return curves, time.time() - t0


def test_criterion_1_dare_correctness(benchmark, benchmark_gains):
    t0 = time.time()
    for m, g in zip(benchmark.subsystems, benchmark_gains):
        l = feedback_gain(m.A, m.B, m.R, g.pi_inf)
        res = g.pi_inf - (
            m.A.T @ g.pi_inf @ m.A + m.Q - l.T @ (m.B.T @ g.pi_inf @ m.B + m.R) @ l
        )
        assert np.linalg.norm(res) < 1e-9
        for j in range(2):
            root = scalar_dare_root(m.A[j, j], 1.0, 1.0, 0.01)
            assert abs(g.pi_inf[j, j] - root) < 1e-9
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        a, b, _, q, r, _, _ = random_system(rng)
        pi = solve_dare(a, b, q, r)
        l = feedback_gain(a, b, r, pi)
        res = np.linalg.norm(pi - (a.T @ pi @ a + q - l.T @ (b.T @ pi @ b + r) @ l))
        worst = max(worst, res)
        assert res < 1e-9
    elapsed = time.time() - t0
    assert elapsed < 5.0
    print(f"\nPASS criterion 1: DARE residual < 1e-9 on 2 benchmark + 100 random "
          f"systems (worst {worst:.2e}), {elapsed:.2f}s")


def test_criterion_2_steady_covariance(benchmark, benchmark_gains):
    for m, g in zip(benchmark.subsystems, benchmark_gains):
        res = np.linalg.norm(
            riccati_correct(riccati_predict(g.p_bar, m.A, m.W), m.C, m.V) - g.p_bar
        )
        assert res < 1e-10
        for j in range(2):
            root = scalar_steady_posterior(m.A[j, j], 1.0, 0.1, 0.01)
            assert abs(g.p_bar[j, j] - root) < 1e-9
    p1, _ = steady_state_covariance([[1.1]], [[1.0]], [[0.1]], [[0.01]])
    assert abs(p1[0, 0] - scalar_steady_posterior(1.1, 1.0, 0.1, 0.01)) < 1e-9
    print("PASS criterion 2: steady covariance fixed-point residual < 1e-10, "
          "scalar cross-check < 1e-9")


def _coil_cost_gap(p_post_prev, model, gains, q):
    """Expected-cost gap oracle from the conditional-cost expressions."""
    p_prior = model.A @ p_post_prev @ model.A.T + model.W
    s = model.C @ p_prior @ model.C.T + model.V
    corrected = p_prior - p_prior @ model.C.T @ np.linalg.inv(s) @ model.C @ p_prior
    base = float(np.trace(gains.pi_inf @ model.W))
    e_idle = base + float(np.trace(gains.gamma_inf @ p_prior))
    e_send = base + (1 - q) * float(np.trace(gains.gamma_inf @ p_prior)) \
        + q * float(np.trace(gains.gamma_inf @ corrected))
    return e_idle - e_send


def _voi_cost_gap(e_check, model, gains, q):
    base = float(np.trace(gains.pi_inf @ model.W))
    stale = float(np.trace(gains.gamma_inf @ gains.p_bar))
    gap = float(np.trace(gains.gamma_inf @ np.outer(e_check, e_check)))
    e_idle = base + stale + gap
    e_send = base + q * stale + (1 - q) * (stale + gap)
    return e_idle - e_send


def _audit_argmax(scheme, gap_fn, benchmark, benchmark_gains):
    scn = replace(benchmark.with_policy(scheme, 0.0), horizon=5200, n_trials=2,
                  base_seed=314)
    qs = [m.link_probability() for m in scn.subsystems]
    checked = mismatches = quant_ties = near_ties = total = 0
    for trial in range(scn.n_trials):
        telem = run_trial(scn, trial, gains=benchmark_gains, record_slots=True)
        rec = telem.records
        for k in range(scn.horizon):
            total += 1
            m_vals = rec.m[k]
            if scheme == "coil":
                gaps = [
                    gap_fn(rec.decision_cov[i][k], scn.subsystems[i],
                           benchmark_gains[i], qs[i])
                    for i in range(2)
                ]
            else:
                gaps = [
                    gap_fn(rec.e_check[i][k], scn.subsystems[i],
                           benchmark_gains[i], qs[i])
                    for i in range(2)
                ]
            dyn = [dynamic_identifier(m_vals[i], scn.layout) for i in range(2)]
            if dyn[0] == dyn[1]:
                quant_ties += 1
                continue
            if abs(m_vals[0] - m_vals[1]) <= 1e-12:
                near_ties += 1
                continue
            checked += 1
            if int(np.argmax(m_vals)) != int(np.argmax(gaps)):
                mismatches += 1
            # TOD grants the channel to the exact-real argmax here
            assert int(rec.winner[k, 0]) == int(np.argmax(m_vals))
    assert total >= 10_000
    assert checked > 0.9 * total
    assert mismatches == 0
    return total, checked, quant_ties, near_ties


def test_criterion_3_priority_optimality_audits(benchmark, benchmark_gains):
    stats_coil = _audit_argmax("coil", _coil_cost_gap, benchmark, benchmark_gains)
    stats_voi = _audit_argmax("voi", _voi_cost_gap, benchmark, benchmark_gains)
    print("PASS criterion 3: priority argmax equals conditional-cost-gap oracle "
          f"in 100% of decided slots; covariance scheme {stats_coil[1]}/{stats_coil[0]} "
          f"checked ({stats_coil[2]} quantization ties), value scheme "
          f"{stats_voi[1]}/{stats_voi[0]} checked ({stats_voi[2]} quantization ties)")


def test_criterion_4_filter_consistency(benchmark, benchmark_gains):
    # one reliable channel per subsystem: every slot delivers the local posterior
    scn = Scenario(
        subsystems=[clone_model(m, q_link=1.0) for m in benchmark.subsystems],
        policies=[PolicyConfig("voi", 0.0) for _ in benchmark.subsystems],
        layout=benchmark.layout,
        n_channels=2,
        horizon=100_000,
        n_trials=1,
        base_seed=2718,
    )
    telem = run_trial(scn, 0, gains=benchmark_gains, record_slots=True)
    assert np.all(telem.transmissions == scn.horizon)
    assert np.all(telem.successes == scn.horizon)
    cov_errors = []
    for i, g in enumerate(benchmark_gains):
        err = telem.records.x[i] - telem.records.x_hat[i]
        emp = err.T @ err / scn.horizon
        rel = np.linalg.norm(emp - g.p_bar) / np.linalg.norm(g.p_bar)
        cov_errors.append(rel)
        assert rel < 0.10
    expected_cost = sum(
        theoretic_step_cost(g, g.p_bar, m.W)
        for g, m in zip(benchmark_gains, scn.subsystems)
    )
    cost_rel = abs(telem.cost_rate - expected_cost) / expected_cost
    assert cost_rel < 0.03
    print(f"PASS criterion 4: error covariance within "
          f"{max(cov_errors):.1%} of the fixed point (tol 10%), "
          f"cost within {cost_rel:.2%} of the two-trace value (tol 3%)")


def test_criterion_5_channel_statistics(benchmark):
    scn = replace(benchmark.with_policy("coil", 0.0), n_trials=60, base_seed=161)
    mc = _mc(scn)
    lines = []
    for i, m in enumerate(scn.subsystems):
        sent = int(mc.transmissions.sum(axis=0)[i])
        got = int(mc.successes.sum(axis=0)[i])
        q = m.link_probability()
        assert sent >= 10_000
        band = 3 * np.sqrt(q * (1 - q) / sent)
        rate = got / sent
        assert abs(rate - q) < band
        lines.append(f"link {m.index}: {rate:.4f} vs {q} over {sent} sends")
    print(f"PASS criterion 5: {'; '.join(lines)} (3-sigma binomial bands)")


def test_criterion_6_contention_pattern(benchmark, benchmark_gains):
    t0 = time.time()
    scn = replace(benchmark.with_policy("coil", 0.0), horizon=20_000, base_seed=11)
    telem = run_trial(scn, 0, gains=benchmark_gains, record_slots=True)
    unstable_pos = int(np.argmax(
        [np.max(np.abs(np.linalg.eigvals(m.A))) for m in scn.subsystems]
    ))
    assert scn.subsystems[unstable_pos].index == 1
    share = telem.transmissions[unstable_pos] / scn.horizon
    assert share > 0.5

    # priorities are a function of the packet-outcome history alone: swap the
    # noise substreams, keep the channel substream, and nothing changes
    streams_a = trial_streams(scn, 0)
    other = trial_streams(replace(scn, base_seed=9999), 0)
    streams_b = TrialStreams(x0=other.x0, w=other.w, v=other.v, channel=streams_a.channel)
    run_a = run_trial(scn, 0, gains=benchmark_gains, streams=streams_a, record_slots=True)
    run_b = run_trial(scn, 0, gains=benchmark_gains, streams=streams_b, record_slots=True)
    assert np.array_equal(run_a.records.gamma, run_b.records.gamma)
    assert np.array_equal(run_a.records.winner, run_b.records.winner)
    assert np.array_equal(run_a.records.m, run_b.records.m)

    # with reliable links the covariance orbit settles into a cycle, so the
    # win sequence becomes periodic
    reliable = Scenario(
        subsystems=[clone_model(m, q_link=1.0) for m in scn.subsystems],
        policies=scn.policies,
        layout=scn.layout,
        horizon=3000,
        n_trials=1,
        base_seed=5,
    )
    rec = run_trial(reliable, 0, gains=benchmark_gains, record_slots=True).records
    winners = rec.winner[:, 0]
    seen = {}
    start = period = None
    for k in range(reliable.horizon):
        key = (
            tuple(np.round(rec.decision_cov[0][k], 12).ravel()),
            tuple(np.round(rec.decision_cov[1][k], 12).ravel()),
        )
        if key in seen:
            start, period = seen[key], k - seen[key]
            break
        seen[key] = k
    assert period is not None, "no covariance recurrence found"
    tail = winners[start:]
    usable = (len(tail) // period) * period
    folded = tail[:usable].reshape(-1, period)
    assert np.all(folded == folded[0])
    elapsed = time.time() - t0
    assert elapsed < 60.0
    print(f"PASS criterion 6: unstable subsystem wins {share:.1%} of slots; "
          f"priorities depend on the outcome history alone; reliable-link win "
          f"pattern periodic with period {period} from slot {start} ({elapsed:.1f}s)")


def _interp(points, rate):
    xs = np.array([p["rate"] for p in points])
    ys = np.array([p["cost"] for p in points])
    ses = np.array([p["cost_se"] for p in points])
    order = np.argsort(xs)
    xs, ys, ses = xs[order], ys[order], ses[order]
    cost = float(np.interp(rate, xs, ys))
    pos = np.searchsorted(xs, rate)
    lo, hi = max(pos - 1, 0), min(pos, len(ses) - 1)
    return cost, float(max(ses[lo], ses[hi]))


def test_criterion_7_rate_cost_ordering(fig5_sweep):
    curves, elapsed = fig5_sweep
    assert elapsed < 600.0
    for scheme, points in curves.items():
        rates = [p["rate"] for p in points]
        slack = [2 * p["rate_se"] for p in points]
        for a, b, s in zip(rates, rates[1:], slack[1:]):
            assert b <= a + s + 1e-12, f"{scheme}: attempt rate not monotone"
        lo, hi = min(rates), max(rates)
        assert lo < PROBE_RATES[0] and hi > PROBE_RATES[-1]

    gaps = []
    for rate in PROBE_RATES:
        voi, voi_se = _interp(curves["voi"], rate)
        coil, _ = _interp(curves["coil"], rate)
        coilbar, _ = _interp(curves["coilbar"], rate)
        sod, _ = _interp(curves["sod"], rate)
        assert voi <= coilbar
        assert voi <= coil <= sod
        assert voi + 2 * voi_se < min(coil, coilbar, sod)
        gaps.append(coil - coilbar)
    print(f"PASS criterion 7: at matched rates {PROBE_RATES} the value-driven "
          f"scheme is strictly best (>2 SE); covariance-scheme gap from sending "
          f"filtered estimates instead of raw outputs: "
          f"{', '.join(f'{g:+.4f}' for g in gaps)} (reported, not asserted); "
          f"sweep took {elapsed:.0f}s")


def test_criterion_8_stability_diagnostic(benchmark, benchmark_gains):
    # sanity: a lone always-transmitting subsystem sees i.i.d. packet outcomes,
    # so the dropout-age tail decays like 1 - q
    lone = Scenario(
        subsystems=[clone_model(benchmark.subsystems[1], index=1)],
        policies=[PolicyConfig("coilbar", 0.0)],
        layout=benchmark.layout,
        horizon=125_000,
        n_trials=8,
        base_seed=23,
    )
    mc = _mc(lone)
    assert int(mc.t_hist.sum()) == 1_000_000
    lone_report = stability_diagnostic(mc.t_hist, lone.subsystems)[0]
    assert not lone_report.inconclusive
    q = lone.subsystems[0].link_probability()
    assert abs(lone_report.decay_rate - (1 - q)) < 0.1 * (1 - q)

    scn = replace(benchmark.with_policy("voi", 0.0), horizon=5000, n_trials=20,
                  base_seed=29)
    reports = stability_diagnostic(_mc(scn).t_hist, scn.subsystems)
    assert reports[0].bound == pytest.approx(1 / 1.21)
    assert reports[1].bound == pytest.approx(1 / 0.81)
    for rep in reports:
        assert not rep.inconclusive
        assert rep.satisfied
        assert rep.margin > 0
    print(f"PASS criterion 8: lone-link decay {lone_report.decay_rate:.3f} "
          f"(sanity target {1 - q}); benchmark margins "
          f"{reports[0].margin:.3f} vs bound {reports[0].bound:.4f} and "
          f"{reports[1].margin:.3f} vs bound {reports[1].bound:.4f}")


def test_criterion_9_determinism_and_collision_freedom(tmp_path, benchmark):
    args = [
        "run", "--preset", "two-plant", "--schemes", "voi,coil",
        "--thresholds", "0,0.2", "--trials", "50", "--horizon", "500",
    ]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli_main(args + ["--out", str(out_a)]) == 0
    assert cli_main(args + ["--out", str(out_b)]) == 0
    for name in ["aggregate.csv", "aggregate.json", "plot_data.csv"]:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    # the engine raises on any channel-access violation, so every result that
    # exists was produced collision-free; the tally makes that visible
    _mc(replace(benchmark.with_policy("sod", 0.0), n_trials=20, horizon=400))
    violations = sum(r.access_violations for r in _ALL_RESULTS)
    assert violations == 0
    print(f"PASS criterion 9: byte-identical reruns; {violations} channel-access "
          f"violations across {len(_ALL_RESULTS)} Monte Carlo runs of this suite")
