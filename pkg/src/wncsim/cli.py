"""Command-line front end: experiment execution and machine-readable results.

Two subcommands share one grid executor:

* ``run``   - execute the configured policies, or a (scheme x threshold)
              grid given on the command line.
* ``sweep`` - execute the threshold sweep from the config's [sweep] table
              (or from flags) and emit plot-ready rate/cost pairs.

Every numeric cell is written with 17 significant digits so reruns with a
fixed seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .engine import (
    MonteCarloResult,
    Scenario,
    compile_gains,
    run_monte_carlo,
    run_trial,
    stability_diagnostic,
)
from .policy import vbt_sleep_horizon
from .errors import ScenarioValidationError
from .numerics import spectral_radius
from .scenario import PRESETS, LoadedConfig, config_hash, load_config, scenario_to_dict


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return f"{float(x):.17g}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wncsim",
        description="Event-triggered control over a shared lossy channel: "
        "deterministic Monte Carlo experiments.",
    )
    parser.add_argument("--version", action="version", version=f"wncsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("run", "run the configured policies or an explicit scheme/threshold grid"),
        ("sweep", "run a threshold sweep and emit rate/cost pairs for plotting"),
    ]:
        p = sub.add_parser(name, help=help_text)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="path to a TOML or JSON scenario file")
        src.add_argument("--preset", choices=PRESETS, help="built-in scenario")
        p.add_argument("--schemes", help="comma-separated scheme list (overrides config)")
        p.add_argument("--thresholds", help="comma-separated threshold list (overrides config)")
        p.add_argument("--trials", type=int, help="override trial count")
        p.add_argument("--horizon", type=int, help="override slot horizon")
        p.add_argument("--seed", type=int, help="override base seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--per-slot", action="store_true",
                       help="also dump per-slot telemetry (size-guarded)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for trials")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config if args.config else args.preset)
    except ScenarioValidationError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    scenario = config.scenario
    if args.trials is not None:
        scenario = _replace(scenario, n_trials=args.trials)
    if args.horizon is not None:
        scenario = _replace(scenario, horizon=args.horizon)
    if args.seed is not None:
        scenario = _replace(scenario, base_seed=args.seed)

    grid = _build_grid(args, config, scenario)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for label, threshold, cell_scenario in grid:
        result = run_monte_carlo(cell_scenario, workers=args.workers)
        rows.append(_aggregate_row(label, threshold, cell_scenario, result))
        print(f"{label} threshold={_fmt(threshold)}: "
              f"cost={result.cost_rate_mean:.6g} (+-{result.cost_rate_stderr:.2g}) "
              f"attempt_rate={result.attempt_rate_mean:.4g}")

    _write_aggregate_csv(out_dir / "aggregate.csv", rows)
    _write_aggregate_json(out_dir / "aggregate.json", scenario, rows)
    _write_plot_csv(out_dir / "plot_data.csv", rows)
    if args.per_slot:
        try:
            _write_per_slot_csv(out_dir / "per_slot.csv", grid, config.per_slot_row_cap)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    print(f"wrote {out_dir}/aggregate.csv ({len(rows)} rows)")
    return 0


def _replace(scenario: Scenario, **kwargs) -> Scenario:
    from dataclasses import replace

    return replace(scenario, **kwargs)


def _build_grid(args, config: LoadedConfig, scenario: Scenario):
    """Yield (scheme label, threshold, scenario) cells, unique and in a fixed order."""
    schemes = [s.strip().lower() for s in args.schemes.split(",")] if args.schemes else None
    thresholds = (
        [float(t) for t in args.thresholds.split(",")] if args.thresholds else None
    )
    grid = []
    if args.command == "sweep":
        if (schemes is None) != (thresholds is None):
            raise SystemExit("sweep: --schemes and --thresholds go together")
        sweep = {s: thresholds for s in schemes} if schemes else config.sweep
        if not sweep:
            raise SystemExit("sweep: provide --schemes/--thresholds or a [sweep] config table")
        for scheme, values in sweep.items():
            for th in values:
                grid.append((scheme, th, scenario.with_policy(scheme, th)))
    elif schemes:
        for scheme in schemes:
            for th in thresholds if thresholds else [0.0]:
                grid.append((scheme, th, scenario.with_policy(scheme, th)))
    elif thresholds:
        label = "+".join(dict.fromkeys(p.scheme for p in scenario.policies))
        for th in thresholds:
            grid.append((label, th, _replace(
                scenario,
                policies=[type(p)(p.scheme, th) for p in scenario.policies],
            )))
    else:
        label = "+".join(dict.fromkeys(p.scheme for p in scenario.policies))
        grid.append((label, scenario.policies[0].threshold, scenario))
    # aggregate rows are keyed by (scheme, threshold); drop repeated cells
    unique, seen = [], set()
    for cell in grid:
        key = (cell[0], cell[1])
        if key not in seen:
            seen.add(key)
            unique.append(cell)
    return unique


def _aggregate_row(label, threshold, scenario: Scenario, result: MonteCarloResult) -> dict:
    row = {
        "scheme": label,
        "threshold": threshold,
        "trials": result.n_trials,
        "horizon": result.horizon,
        "mean_cost": result.cost_rate_mean,
        "cost_stderr": result.cost_rate_stderr,
        "mean_attempt_rate": result.attempt_rate_mean,
        "attempt_rate_stderr": result.attempt_rate_stderr,
        "access_violations": result.access_violations,
    }
    gains = compile_gains(scenario)
    reports = stability_diagnostic(result.t_hist, scenario.subsystems)
    for model, policy, g, att, share, grate, rep in zip(
        scenario.subsystems,
        scenario.policies,
        gains,
        result.attempt_rate_by_subsystem,
        result.win_share,
        result.gamma_rate,
        reports,
    ):
        i = model.index
        row[f"attempt_rate_{i}"] = float(att)
        row[f"win_share_{i}"] = float(share)
        row[f"gamma_rate_{i}"] = float(grate)
        row[f"spectral_radius_{i}"] = spectral_radius(model.A)
        row[f"decay_rate_{i}"] = rep.decay_rate
        row[f"stability_bound_{i}"] = rep.bound
        row[f"stability_margin_{i}"] = rep.margin
        row[f"stability_inconclusive_{i}"] = rep.inconclusive
        row[f"t_overflow_mass_{i}"] = rep.overflow_mass
        if policy.scheme == "coil":
            # steady-regime sensor sleep allowance after a reception
            horizon, capped = vbt_sleep_horizon(
                g.p_bar, model, g, model.link_probability(), policy.threshold
            )
            row[f"sleep_horizon_{i}"] = None if capped else horizon
        else:
            row[f"sleep_horizon_{i}"] = None
    return row


def _write_aggregate_csv(path: Path, rows: list[dict]):
    if not rows:
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in fields])


def _write_aggregate_json(path: Path, scenario: Scenario, rows: list[dict]):
    def clean(value):
        if isinstance(value, (np.floating, float)):
            v = float(value)
            return None if np.isnan(v) else v
        if isinstance(value, (np.integer, int)):
            return int(value)
        return value

    payload = {
        "version": __version__,
        "config_hash": config_hash(scenario),
        "seed": scenario.base_seed,
        "scenario": scenario_to_dict(scenario),
        "rows": [{k: clean(v) for k, v in row.items()} for row in rows],
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_plot_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scheme", "threshold", "attempt_rate", "cost", "cost_stderr"])
        for row in rows:
            writer.writerow([
                row["scheme"], _fmt(row["threshold"]), _fmt(row["mean_attempt_rate"]),
                _fmt(row["mean_cost"]), _fmt(row["cost_stderr"]),
            ])


def _write_per_slot_csv(path: Path, grid, row_cap: int):
    total_rows = sum(
        scn.n_trials * scn.horizon * len(scn.subsystems) for _, _, scn in grid
    )
    if total_rows > row_cap:
        raise ValueError(
            f"per-slot dump would write {total_rows} rows, above the cap of {row_cap}; "
            "lower --trials/--horizon or raise per_slot_row_cap in the config"
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([
            "scheme", "threshold", "trial", "slot", "subsystem",
            "theta", "delta", "gamma", "priority", "t", "cost", "x", "x_hat", "y",
        ])
        for label, threshold, scn in grid:
            gains = compile_gains(scn)
            for trial in range(scn.n_trials):
                telem = run_trial(scn, trial, gains=gains, record_slots=True)
                rec = telem.records
                for k in range(scn.horizon):
                    for pos, model in enumerate(scn.subsystems):
                        writer.writerow([
                            label, _fmt(threshold), trial, k, model.index,
                            int(rec.theta[k, pos]), int(rec.delta[k, pos]),
                            int(rec.gamma[k, pos]), _fmt(rec.m[k, pos]),
                            int(rec.t[k, pos]), _fmt(rec.cost[k, pos]),
                            _vec(rec.x[pos][k]), _vec(rec.x_hat[pos][k]), _vec(rec.y[pos][k]),
                        ])


def _vec(arr: np.ndarray) -> str:
    return ";".join(_fmt(v) for v in arr)


if __name__ == "__main__":
    sys.exit(main())
