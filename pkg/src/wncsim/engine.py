"""Slot loop, Monte Carlo harness, cost accounting, and stability diagnostics.

Two execution paths implement the same slot semantics:

* a per-trial reference path (``run_trial``) that walks one trial slot by
  slot through the public estimator/policy/network operations and can
  record everything, and
* a trials-vectorized batch path (``run_batch``) that evolves many trials
  at once with the same update formulas, used by ``run_monte_carlo`` for
  throughput.

Both paths consume identical pre-drawn noise, so a test can hold them to
agreement.  The slot timeline is fixed: measure, trigger, contend,
transmit, estimate, control and accrue cost, then step the plant.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import PlantState, SubsystemModel, control_input, measure, step_plant
from .errors import ModelInvalidError
from .estimation import (
    RemoteEstimatorState,
    SmartSensorState,
    conventional_estimator_step,
    innovation_discrepancy,
    smart_remote_step,
    smart_sensor_filter_step,
)
from .network import ContentionFrame, IdentifierLayout, resolve_contention
from .numerics import OfflineGains, compute_offline_gains, psd_factor, spectral_radius
from .policy import (
    PolicyConfig,
    coil_bar_measure,
    coil_measure,
    sod_measure,
    voi_measure,
)

T_HIST_CAP = 200  # histogram bins 0..cap plus one overflow bin


@dataclass
class Scenario:
    """Everything needed to run one experiment configuration."""

    subsystems: list[SubsystemModel]
    policies: list[PolicyConfig]
    layout: IdentifierLayout = field(default_factory=IdentifierLayout)
    n_channels: int = 1
    horizon: int = 1000
    n_trials: int = 1
    base_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.subsystems:
            raise ModelInvalidError("scenario needs at least one subsystem")
        if len(self.policies) != len(self.subsystems):
            raise ModelInvalidError("one policy per subsystem required")
        if self.horizon < 1:
            raise ModelInvalidError(f"horizon must be >= 1, got {self.horizon}")
        if self.n_trials < 1:
            raise ModelInvalidError(f"trial count must be >= 1, got {self.n_trials}")
        if self.n_channels < 1:
            raise ModelInvalidError(f"channel count must be >= 1, got {self.n_channels}")
        if len(self.subsystems) > self.layout.static_max:
            raise ModelInvalidError(
                f"{len(self.subsystems)} subsystems exceed static identifier capacity "
                f"{self.layout.static_max}"
            )
        indices = [m.index for m in self.subsystems]
        if len(set(indices)) != len(indices):
            raise ModelInvalidError("subsystem indices must be unique")
        sids = list(self.static_ids().values())
        if len(set(sids)) != len(sids):
            raise ModelInvalidError("static identifiers must be unique")
        for m, sid in zip(self.subsystems, sids):
            if not 0 <= sid <= self.layout.static_max:
                raise ModelInvalidError(
                    f"subsystem {m.index}: static_id {sid} outside "
                    f"[0, {self.layout.static_max}]"
                )
        for m in self.subsystems:
            qs = m.link_probabilities()
            if len(qs) not in (1, self.n_channels):
                raise ModelInvalidError(
                    f"subsystem {m.index}: q_link lists one probability or one per channel"
                )

    def static_ids(self) -> dict[int, int]:
        """Subsystem position -> static identifier."""
        out = {}
        for pos, m in enumerate(self.subsystems):
            sid = m.static_id if m.static_id is not None else self.layout.default_static_id(m.index)
            out[pos] = sid
        return out

    def with_policy(self, scheme: str, threshold: float) -> "Scenario":
        """Same scenario with every subsystem on one scheme/threshold."""
        return replace(
            self, policies=[PolicyConfig(scheme, threshold) for _ in self.subsystems]
        )


def compile_gains(scenario: Scenario) -> list[OfflineGains]:
    return [
        compute_offline_gains(m.A, m.B, m.C, m.Q, m.R, m.W, m.V) for m in scenario.subsystems
    ]


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

_SUB_INIT, _SUB_PLANT, _SUB_MEAS, _SUB_CHANNEL = 0, 1, 2, 3


@dataclass
class TrialStreams:
    """Pre-drawn randomness for one trial, split into named substreams.

    Plant and measurement noise depend only on (base_seed, trial_index), so
    scheme comparisons on the same trial reuse identical realizations.  The
    channel substream is consumed one uniform per channel per slot whether
    or not anyone transmits, keeping packet outcomes aligned across schemes
    with identical winner sequences.
    """

    x0: list[np.ndarray]        # initial state per subsystem
    w: list[np.ndarray]         # (K, n_i) process noise
    v: list[np.ndarray]         # (K, p_i) measurement noise
    channel: np.ndarray         # (K, M) uniforms


def _substream(base_seed: int, trial_index: int, sub: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=base_seed, spawn_key=(trial_index, sub))
    )


def trial_streams(scenario: Scenario, trial_index: int) -> TrialStreams:
    k = scenario.horizon
    rng_init = _substream(scenario.base_seed, trial_index, _SUB_INIT)
    rng_plant = _substream(scenario.base_seed, trial_index, _SUB_PLANT)
    rng_meas = _substream(scenario.base_seed, trial_index, _SUB_MEAS)
    rng_chan = _substream(scenario.base_seed, trial_index, _SUB_CHANNEL)

    x0, w, v = [], [], []
    for m in scenario.subsystems:
        fx = psd_factor(m.x0_cov)
        x0.append(m.x0_mean + fx @ rng_init.standard_normal(m.n))
    for m in scenario.subsystems:
        fw = psd_factor(m.W)
        w.append(rng_plant.standard_normal((k, m.n)) @ fw.T)
    for m in scenario.subsystems:
        fv = psd_factor(m.V)
        v.append(rng_meas.standard_normal((k, m.p)) @ fv.T)
    channel = rng_chan.random((k, scenario.n_channels))
    return TrialStreams(x0=x0, w=w, v=v, channel=channel)


# ---------------------------------------------------------------------------
# Telemetry
# ---------------------------------------------------------------------------


@dataclass
class SlotRecords:
    """Struct-of-arrays per-slot log kept by the reference path when asked."""

    x: list[np.ndarray]
    x_hat: list[np.ndarray]
    y: list[np.ndarray]
    theta: np.ndarray        # (K, N)
    delta: np.ndarray
    gamma: np.ndarray
    m: np.ndarray            # exact-real priorities
    t: np.ndarray
    cost: np.ndarray
    winner: np.ndarray       # (K, M) subsystem position or -1
    frames: list[list[ContentionFrame]]
    decision_cov: list[np.ndarray] | None  # (K, n, n) posterior used by the trigger (conventional)
    e_check: list[np.ndarray] | None       # (K, n) discrepancy at decision time (smart)


@dataclass
class Telemetry:
    """Per-trial outcome: aggregates always, per-slot records on request."""

    trial_index: int
    horizon: int
    cost_total: float
    cost_by_subsystem: np.ndarray
    attempts: np.ndarray
    transmissions: np.ndarray
    successes: np.ndarray
    t_hist: np.ndarray        # (N, T_HIST_CAP + 2)
    access_violations: int
    records: SlotRecords | None = None

    @property
    def cost_rate(self) -> float:
        return self.cost_total / self.horizon

    @property
    def attempt_rate(self) -> float:
        n = len(self.attempts)
        return float(self.attempts.sum()) / (n * self.horizon)


# ---------------------------------------------------------------------------
# Reference path: one trial, slot by slot
# ---------------------------------------------------------------------------


@dataclass
class _SubsystemTrialState:
    plant: PlantState
    remote: RemoteEstimatorState
    sensor: SmartSensorState | None
    y_last_acked: np.ndarray
    u_prev: np.ndarray


@dataclass
class TrialWorld:
    """Mutable state of one running trial."""

    scenario: Scenario
    gains: list[OfflineGains]
    streams: TrialStreams
    states: list[_SubsystemTrialState]
    static_ids: dict[int, int]
    k: int = 0
    check_invariants: bool = False
    coilbar_tables: list[list[float]] = field(default_factory=list)

    # accumulators
    cost_by_subsystem: np.ndarray = None
    attempts: np.ndarray = None
    transmissions: np.ndarray = None
    successes: np.ndarray = None
    t_hist: np.ndarray = None
    access_violations: int = 0


def _initial_world(
    scenario: Scenario,
    gains: list[OfflineGains],
    streams: TrialStreams,
    check_invariants: bool = False,
) -> TrialWorld:
    states = []
    for pos, (m, pol) in enumerate(zip(scenario.subsystems, scenario.policies)):
        g = gains[pos]
        if pol.smart:
            remote = RemoteEstimatorState(m.x0_mean.copy(), g.p_bar.copy(), 0)
            sensor = SmartSensorState(m.x0_mean.copy(), remote.copy())
        else:
            remote = RemoteEstimatorState(m.x0_mean.copy(), m.x0_cov.copy(), 0)
            sensor = None
        states.append(
            _SubsystemTrialState(
                plant=PlantState(x=streams.x0[pos].copy(), k=0),
                remote=remote,
                sensor=sensor,
                y_last_acked=m.C @ m.x0_mean,
                u_prev=control_input(g.l_inf, m.x0_mean),
            )
        )
    n = len(scenario.subsystems)
    return TrialWorld(
        scenario=scenario,
        gains=gains,
        streams=streams,
        states=states,
        static_ids=scenario.static_ids(),
        check_invariants=check_invariants,
        coilbar_tables=[[] for _ in range(n)],
        cost_by_subsystem=np.zeros(n),
        attempts=np.zeros(n, dtype=np.int64),
        transmissions=np.zeros(n, dtype=np.int64),
        successes=np.zeros(n, dtype=np.int64),
        t_hist=np.zeros((n, T_HIST_CAP + 2), dtype=np.int64),
    )


def _coilbar_priority(world: TrialWorld, pos: int, t_prev: int) -> float:
    """Memoized covariance-gap measure; identical arithmetic to the direct loop."""
    table = world.coilbar_tables[pos]
    model = world.scenario.subsystems[pos]
    g = world.gains[pos]
    while len(table) <= t_prev:
        table.append(coil_bar_measure(len(table), model, g))
    return table[t_prev]


def run_slot(world: TrialWorld) -> dict:
    """Execute one slot of the fixed timeline and return this slot's record."""
    scn = world.scenario
    k = world.k
    n_sub = len(scn.subsystems)
    y_now: list[np.ndarray] = [None] * n_sub
    priorities = np.zeros((n_sub, scn.n_channels))
    theta = np.zeros(n_sub, dtype=np.int64)
    decision_cov: list[np.ndarray | None] = [None] * n_sub
    e_checks: list[np.ndarray | None] = [None] * n_sub

    # 1) measurement, 2) trigger evaluation
    for pos, (model, pol) in enumerate(zip(scn.subsystems, scn.policies)):
        g = world.gains[pos]
        st = world.states[pos]
        y_now[pos] = measure(st.plant, world.streams.v[pos][k], model.C)
        if pol.smart:
            st.sensor = smart_sensor_filter_step(st.sensor, y_now[pos], st.u_prev, model, g)
            e_checks[pos] = innovation_discrepancy(st.sensor, g)
            if pol.scheme == "voi":
                base = voi_measure(e_checks[pos], g)
            else:
                base = _coilbar_priority(world, pos, st.remote.t_since_success)
        elif pol.scheme == "coil":
            decision_cov[pos] = st.remote.P.copy()
            base = coil_measure(st.remote.P, model, g)
        else:  # sod
            base = sod_measure(y_now[pos], st.y_last_acked)
        if pol.scheme == "sod":
            per_channel = [base] * scn.n_channels
        else:
            per_channel = [base * model.link_probability(j) for j in range(scn.n_channels)]
        priorities[pos] = np.maximum(per_channel, 0.0)
        theta[pos] = int(priorities[pos].max() >= pol.threshold)
        world.attempts[pos] += theta[pos]

    # 3) contention
    contenders = [
        (pos, list(priorities[pos])) for pos in range(n_sub) if theta[pos]
    ]
    frames = resolve_contention(k, contenders, scn.layout, world.static_ids, scn.n_channels)

    # 4) transmission outcomes; one uniform per channel per slot
    delta = np.zeros(n_sub, dtype=np.int64)
    gamma = np.zeros(n_sub, dtype=np.int64)
    winner_row = np.full(scn.n_channels, -1, dtype=np.int64)
    for frame in frames:
        if frame.winner is None:
            continue
        pos = frame.winner
        winner_row[frame.channel] = pos
        delta[pos] += 1
        q = scn.subsystems[pos].link_probability(frame.channel)
        frame.gamma = int(world.streams.channel[k, frame.channel] < q)
        gamma[pos] = frame.gamma
        frame.validate()
    if delta.max(initial=0) > 1:
        world.access_violations += 1
        raise RuntimeError(f"channel-access constraint violated at slot {k}")
    world.transmissions += delta
    world.successes += gamma

    # 5) estimator updates
    for pos, (model, pol) in enumerate(zip(scn.subsystems, scn.policies)):
        g = world.gains[pos]
        st = world.states[pos]
        if pol.smart:
            payload = st.sensor.x_hat_s if gamma[pos] else None
            st.remote = smart_remote_step(st.remote, gamma[pos], payload, model, g)
            st.sensor.replica = smart_remote_step(
                st.sensor.replica, gamma[pos], payload, model, g
            )
            if world.check_invariants:
                assert np.array_equal(st.sensor.replica.x_hat, st.remote.x_hat)
                assert np.array_equal(st.sensor.replica.P, st.remote.P)
                assert st.sensor.replica.t_since_success == st.remote.t_since_success
        else:
            st.remote = conventional_estimator_step(
                st.remote, st.u_prev, gamma[pos], y_now[pos] if gamma[pos] else None, model
            )
            if gamma[pos]:
                st.y_last_acked = y_now[pos].copy()
        world.t_hist[pos, min(st.remote.t_since_success, T_HIST_CAP + 1)] += 1

    # 6) control input and cost
    slot_cost = np.zeros(n_sub)
    u_now = []
    for pos, model in enumerate(scn.subsystems):
        st = world.states[pos]
        u = control_input(world.gains[pos].l_inf, st.remote.x_hat)
        x = st.plant.x
        slot_cost[pos] = float(x @ (model.Q @ x)) + float(u @ (model.R @ u))
        world.cost_by_subsystem[pos] += slot_cost[pos]
        u_now.append(u)

    record = {
        "x": [st.plant.x.copy() for st in world.states],
        "y": [y.copy() for y in y_now],
        "x_hat": [st.remote.x_hat.copy() for st in world.states],
        "frames": frames,
        "theta": theta,
        "delta": delta,
        "gamma": gamma,
        "m": priorities.max(axis=1) if scn.n_channels > 1 else priorities[:, 0].copy(),
        "t": np.array([st.remote.t_since_success for st in world.states], dtype=np.int64),
        "cost": slot_cost,
        "winner": winner_row,
        "decision_cov": decision_cov,
        "e_check": e_checks,
    }

    # 7) plant step
    for pos, model in enumerate(scn.subsystems):
        st = world.states[pos]
        st.plant = step_plant(st.plant, u_now[pos], world.streams.w[pos][k], model)
        st.u_prev = u_now[pos]
    world.k += 1
    return record


def run_trial(
    scenario: Scenario,
    trial_index: int,
    gains: list[OfflineGains] | None = None,
    streams: TrialStreams | None = None,
    record_slots: bool = False,
    check_invariants: bool = False,
) -> Telemetry:
    """Reference path: one deterministic trial over the full horizon."""
    if gains is None:
        gains = compile_gains(scenario)
    if streams is None:
        streams = trial_streams(scenario, trial_index)
    world = _initial_world(scenario, gains, streams, check_invariants)
    raw_records = []
    for k in range(scenario.horizon):
        try:
            rec = run_slot(world)
        except Exception as exc:
            raise RuntimeError(f"trial {trial_index} aborted at slot {k}: {exc}") from exc
        if record_slots:
            raw_records.append(rec)
    records = _pack_records(scenario, raw_records) if record_slots else None
    return Telemetry(
        trial_index=trial_index,
        horizon=scenario.horizon,
        cost_total=float(world.cost_by_subsystem.sum()),
        cost_by_subsystem=world.cost_by_subsystem,
        attempts=world.attempts,
        transmissions=world.transmissions,
        successes=world.successes,
        t_hist=world.t_hist,
        access_violations=world.access_violations,
        records=records,
    )


def _pack_records(scenario: Scenario, raw: list[dict]) -> SlotRecords:
    n_sub = len(scenario.subsystems)
    smart = [pol.smart for pol in scenario.policies]
    return SlotRecords(
        x=[np.array([r["x"][i] for r in raw]) for i in range(n_sub)],
        x_hat=[np.array([r["x_hat"][i] for r in raw]) for i in range(n_sub)],
        y=[np.array([r["y"][i] for r in raw]) for i in range(n_sub)],
        theta=np.array([r["theta"] for r in raw]),
        delta=np.array([r["delta"] for r in raw]),
        gamma=np.array([r["gamma"] for r in raw]),
        m=np.array([r["m"] for r in raw]),
        t=np.array([r["t"] for r in raw]),
        cost=np.array([r["cost"] for r in raw]),
        winner=np.array([r["winner"] for r in raw]),
        frames=[r["frames"] for r in raw],
        decision_cov=[
            None if smart[i] or raw[0]["decision_cov"][i] is None
            else np.array([r["decision_cov"][i] for r in raw])
            for i in range(n_sub)
        ],
        e_check=[
            np.array([r["e_check"][i] for r in raw]) if smart[i] else None
            for i in range(n_sub)
        ],
    )


# ---------------------------------------------------------------------------
# Batch path: many trials at once
# ---------------------------------------------------------------------------


@dataclass
class BatchResult:
    """Per-trial aggregates for a block of trials evolved together."""

    trial_indices: np.ndarray
    horizon: int
    cost_rates: np.ndarray          # (T,)
    cost_by_subsystem: np.ndarray   # (T, N)
    attempts: np.ndarray            # (T, N)
    transmissions: np.ndarray
    successes: np.ndarray
    t_hist: np.ndarray              # (N, T_HIST_CAP + 2) pooled over the block
    access_violations: int


class _BatchSub:
    """Vectorized per-subsystem state for one block of trials."""

    def __init__(self, model: SubsystemModel, policy: PolicyConfig, g: OfflineGains,
                 t_block: int):
        self.model = model
        self.policy = policy
        self.g = g
        mean = np.tile(model.x0_mean, (t_block, 1))
        self.x = None  # set from streams
        self.xhat = mean.copy()
        self.u = mean @ g.l_inf.T
        self.t = np.zeros(t_block, dtype=np.int64)
        self.y_last = np.tile(model.C @ model.x0_mean, (t_block, 1))
        if policy.smart:
            self.xs = mean.copy()
            self.P = None
        else:
            self.xs = None
            self.P = np.tile(model.x0_cov, (t_block, 1, 1))
        self.coilbar_table: list[float] = []

    def coilbar(self, t_prev_max: int) -> np.ndarray:
        while len(self.coilbar_table) <= t_prev_max:
            self.coilbar_table.append(
                coil_bar_measure(len(self.coilbar_table), self.model, self.g)
            )
        return np.asarray(self.coilbar_table)


def run_batch(
    scenario: Scenario,
    trial_indices: list[int],
    gains: list[OfflineGains] | None = None,
) -> BatchResult:
    """Evolve a block of trials in lockstep; per-trial results match ``run_trial``."""
    if gains is None:
        gains = compile_gains(scenario)
    t_block = len(trial_indices)
    n_sub = len(scenario.subsystems)
    k_max = scenario.horizon
    n_ch = scenario.n_channels
    layout = scenario.layout
    static_ids = scenario.static_ids()

    streams = [trial_streams(scenario, idx) for idx in trial_indices]
    w = [np.stack([s.w[i] for s in streams]) for i in range(n_sub)]        # (T, K, n)
    v = [np.stack([s.v[i] for s in streams]) for i in range(n_sub)]
    uni = np.stack([s.channel for s in streams])                            # (T, K, M)

    subs = [
        _BatchSub(m, pol, g, t_block)
        for m, pol, g in zip(scenario.subsystems, scenario.policies, gains)
    ]
    for i, s in enumerate(subs):
        s.x = np.stack([st.x0[i] for st in streams])

    cost_by_sub = np.zeros((t_block, n_sub))
    attempts = np.zeros((t_block, n_sub), dtype=np.int64)
    transmissions = np.zeros((t_block, n_sub), dtype=np.int64)
    successes = np.zeros((t_block, n_sub), dtype=np.int64)
    t_hist = np.zeros((n_sub, T_HIST_CAP + 2), dtype=np.int64)
    q_by_channel = np.array(
        [[m.link_probability(j) for j in range(n_ch)] for m in scenario.subsystems]
    )  # (N, M)
    sid_arr = np.array([static_ids[pos] for pos in range(n_sub)], dtype=np.int64)

    rows = np.arange(t_block)
    for k in range(k_max):
        prio = np.zeros((t_block, n_sub, n_ch))
        theta = np.zeros((t_block, n_sub), dtype=bool)
        slot_cache = []
        for i, s in enumerate(subs):
            model, pol, g = s.model, s.policy, s.g
            y = s.x @ model.C.T + v[i][:, k]
            cache = {"y": y}
            if pol.smart:
                pred = s.xs @ model.A.T + s.u @ model.B.T
                xs_new = pred + (y - pred @ model.C.T) @ g.k_steady.T
                cache["xs_new"] = xs_new
                e_check = xs_new - s.xhat @ g.a_closed.T
                if pol.scheme == "voi":
                    ge = e_check @ g.gamma_inf.T
                    base = np.einsum("tn,tn->t", e_check, ge)
                else:
                    table = s.coilbar(int(s.t.max()))
                    base = table[s.t]
            elif pol.scheme == "coil":
                p_prior = _bat_sym(model.A @ s.P @ model.A.T + model.W)
                cp = model.C @ p_prior
                innov_cov = cp @ model.C.T + model.V
                sol = np.linalg.solve(innov_cov, cp)              # (T, p, n)
                p_corr = _bat_sym(p_prior - np.transpose(cp, (0, 2, 1)) @ sol)
                gd = g.gamma_inf @ (p_prior - p_corr)
                base = np.einsum("tii->t", gd)
                cache.update(p_prior=p_prior, p_corr=p_corr, kal=np.transpose(sol, (0, 2, 1)))
            else:  # sod
                d = y - s.y_last
                base = np.sqrt(np.einsum("tp,tp->t", d, d))
            if pol.scheme == "sod":
                prio[:, i, :] = np.maximum(base, 0.0)[:, None]
            else:
                prio[:, i, :] = np.maximum(base[:, None] * q_by_channel[i][None, :], 0.0)
            theta[:, i] = prio[:, i, :].max(axis=1) >= pol.threshold
            slot_cache.append(cache)
        attempts += theta

        # contention, resolved channel by channel with back-off
        delta = np.zeros((t_block, n_sub), dtype=bool)
        gamma = np.zeros((t_block, n_sub), dtype=bool)
        available = theta.copy()
        for j in range(n_ch):
            dyn = np.floor(np.abs(layout.alpha * prio[:, :, j]) + 0.5).astype(np.int64)
            np.clip(dyn, 0, layout.dynamic_max, out=dyn)
            full = (dyn << layout.static_bits) | sid_arr[None, :]
            if not layout.one_dominant:
                full = -full
            masked = np.where(available, full, np.iinfo(np.int64).min)
            pos = np.argmax(masked, axis=1)
            has_winner = available.any(axis=1)
            win = np.where(has_winner, pos, -1)
            for i in range(n_sub):
                won = win == i
                delta[:, i] |= won
                gamma[:, i] |= won & (uni[:, k, j] < q_by_channel[i, j])
                available[won, i] = False
        transmissions += delta
        successes += gamma

        # estimator updates, control, cost, plant step
        for i, s in enumerate(subs):
            model, pol, g = s.model, s.policy, s.g
            cache = slot_cache[i]
            gam = gamma[:, i]
            if pol.smart:
                xs_new = cache["xs_new"]
                pred_r = s.xhat @ g.a_closed.T
                s.xhat = np.where(gam[:, None], xs_new, pred_r)
                s.xs = xs_new
            else:
                x_prior = s.xhat @ model.A.T + s.u @ model.B.T
                if pol.scheme == "coil":
                    p_prior, p_corr, kal = cache["p_prior"], cache["p_corr"], cache["kal"]
                else:
                    p_prior = _bat_sym(model.A @ s.P @ model.A.T + model.W)
                    cp = model.C @ p_prior
                    sol = np.linalg.solve(cp @ model.C.T + model.V, cp)
                    p_corr = _bat_sym(p_prior - np.transpose(cp, (0, 2, 1)) @ sol)
                    kal = np.transpose(sol, (0, 2, 1))
                innov = cache["y"] - x_prior @ model.C.T
                corr = np.einsum("tnp,tp->tn", kal, innov)
                s.xhat = np.where(gam[:, None], x_prior + corr, x_prior)
                s.P = np.where(gam[:, None, None], p_corr, p_prior)
                s.y_last = np.where(gam[:, None], cache["y"], s.y_last)
            s.t = np.where(gam, 0, s.t + 1)
            t_hist[i] += np.bincount(
                np.minimum(s.t, T_HIST_CAP + 1), minlength=T_HIST_CAP + 2
            )
            u_new = s.xhat @ g.l_inf.T
            cost_k = np.einsum("tn,tn->t", s.x, s.x @ model.Q.T) + np.einsum(
                "tm,tm->t", u_new, u_new @ model.R.T
            )
            cost_by_sub[:, i] += cost_k
            s.x = s.x @ model.A.T + u_new @ model.B.T + w[i][:, k]
            s.u = u_new

    return BatchResult(
        trial_indices=np.asarray(trial_indices, dtype=np.int64),
        horizon=k_max,
        cost_rates=cost_by_sub.sum(axis=1) / k_max,
        cost_by_subsystem=cost_by_sub,
        attempts=attempts,
        transmissions=transmissions,
        successes=successes,
        t_hist=t_hist,
        access_violations=0,
    )


def _bat_sym(p: np.ndarray) -> np.ndarray:
    return (p + np.transpose(p, (0, 2, 1))) / 2.0


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------


@dataclass
class MonteCarloResult:
    """Aggregate over trials; per-trial vectors kept for extensibility checks."""

    horizon: int
    n_subsystems: int
    cost_rates: np.ndarray          # (T,)
    attempt_rates: np.ndarray       # (T,)
    attempts: np.ndarray            # (T, N)
    transmissions: np.ndarray
    successes: np.ndarray
    t_hist: np.ndarray              # (N, T_HIST_CAP + 2) pooled
    access_violations: int

    @property
    def n_trials(self) -> int:
        return len(self.cost_rates)

    @property
    def cost_rate_mean(self) -> float:
        return float(np.mean(self.cost_rates))

    @property
    def cost_rate_stderr(self) -> float:
        if self.n_trials < 2:
            return 0.0
        return float(np.std(self.cost_rates, ddof=1) / np.sqrt(self.n_trials))

    @property
    def attempt_rate_mean(self) -> float:
        return float(np.mean(self.attempt_rates))

    @property
    def attempt_rate_stderr(self) -> float:
        if self.n_trials < 2:
            return 0.0
        return float(np.std(self.attempt_rates, ddof=1) / np.sqrt(self.n_trials))

    @property
    def attempt_rate_by_subsystem(self) -> np.ndarray:
        return self.attempts.mean(axis=0) / self.horizon

    @property
    def win_share(self) -> np.ndarray:
        total = self.transmissions.sum()
        if total == 0:
            return np.zeros(self.n_subsystems)
        return self.transmissions.sum(axis=0) / total

    @property
    def gamma_rate(self) -> np.ndarray:
        sent = self.transmissions.sum(axis=0)
        got = self.successes.sum(axis=0)
        return np.where(sent > 0, got / np.maximum(sent, 1), np.nan)


def _chunk_indices(n_trials: int, horizon: int) -> list[list[int]]:
    per_chunk = max(1, min(n_trials, 2_000_000 // max(1, horizon)))
    return [
        list(range(lo, min(lo + per_chunk, n_trials))) for lo in range(0, n_trials, per_chunk)
    ]


def _batch_task(args) -> BatchResult:
    scenario, indices = args
    try:
        return run_batch(scenario, indices)
    except Exception as exc:
        raise RuntimeError(f"worker failed on trials {indices[0]}..{indices[-1]}: {exc}") from exc


def run_monte_carlo(scenario: Scenario, workers: int = 1) -> MonteCarloResult:
    """Run all trials of a scenario; deterministic for a fixed base seed.

    Trials derive their streams from (base_seed, trial_index), so results do
    not depend on chunking or worker count, and extending the trial count
    leaves earlier trials unchanged.
    """
    chunks = _chunk_indices(scenario.n_trials, scenario.horizon)
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_batch_task, [(scenario, c) for c in chunks]))
    else:
        results = [run_batch(scenario, c) for c in chunks]

    n_sub = len(scenario.subsystems)
    cost_rates = np.concatenate([r.cost_rates for r in results])
    attempts = np.vstack([r.attempts for r in results])
    transmissions = np.vstack([r.transmissions for r in results])
    successes = np.vstack([r.successes for r in results])
    t_hist = np.sum([r.t_hist for r in results], axis=0)
    return MonteCarloResult(
        horizon=scenario.horizon,
        n_subsystems=n_sub,
        cost_rates=cost_rates,
        attempt_rates=attempts.sum(axis=1) / (n_sub * scenario.horizon),
        attempts=attempts,
        transmissions=transmissions,
        successes=successes,
        t_hist=t_hist,
        access_violations=sum(r.access_violations for r in results),
    )


# ---------------------------------------------------------------------------
# Cost identity and stability diagnostics
# ---------------------------------------------------------------------------


def theoretic_step_cost(
    gains: OfflineGains, error_second_moment: np.ndarray, w: np.ndarray
) -> float:
    """Expected per-step cost tr(Pi W) + tr(Gamma E[e e^T]) for one subsystem."""
    return float(
        np.trace(gains.pi_inf @ w) + np.trace(gains.gamma_inf @ error_second_moment)
    )


@dataclass
class StabilityReport:
    """Tail-decay estimate of the dropout-age distribution versus the stability bound."""

    subsystem_index: int
    decay_rate: float
    bound: float               # 1 / spectral_radius(A)^2
    margin: float
    satisfied: bool | None
    inconclusive: bool
    fit_range: tuple[int, int] | None
    overflow_mass: float


MIN_BIN_SAMPLES = 30
MIN_FIT_BINS = 4


def stability_diagnostic(
    t_hist: np.ndarray, models: list[SubsystemModel]
) -> list[StabilityReport]:
    """Estimate the geometric tail rate of each subsystem's dropout-age histogram.

    Fits log counts over the longest contiguous run of bins holding at least
    ``MIN_BIN_SAMPLES`` samples; flags the result inconclusive when fewer
    than ``MIN_FIT_BINS`` bins qualify.
    """
    reports = []
    for i, model in enumerate(models):
        counts = np.asarray(t_hist[i], dtype=float)
        total = counts.sum()
        bound = 1.0 / spectral_radius(model.A) ** 2
        overflow = float(counts[-1] / total) if total else 0.0
        body = counts[:-1]
        if total and body[0] == total:
            reports.append(
                StabilityReport(model.index, 0.0, bound, bound, True, False, (0, 0), overflow)
            )
            continue
        eligible = body >= MIN_BIN_SAMPLES
        lo, hi = _longest_run(eligible)
        if hi - lo + 1 < MIN_FIT_BINS:
            reports.append(
                StabilityReport(
                    model.index, float("nan"), bound, float("nan"), None, True, None, overflow
                )
            )
            continue
        ts = np.arange(lo, hi + 1)
        slope = np.polyfit(ts, np.log(body[lo : hi + 1]), 1)[0]
        decay = float(np.exp(slope))
        reports.append(
            StabilityReport(
                model.index,
                decay,
                bound,
                bound - decay,
                decay < bound,
                False,
                (int(lo), int(hi)),
                overflow,
            )
        )
    return reports


def _longest_run(mask: np.ndarray) -> tuple[int, int]:
    best_lo, best_hi, lo = 0, -1, None
    for i, ok in enumerate(list(mask) + [False]):
        if ok and lo is None:
            lo = i
        elif not ok and lo is not None:
            if i - 1 - lo > best_hi - best_lo:
                best_lo, best_hi = lo, i - 1
            lo = None
    return best_lo, best_hi
