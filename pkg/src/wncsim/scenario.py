"""Scenario documents: parsing, validation, presets, and canonical serialization.

Configs are TOML (or JSON with the same shape).  Validation walks the whole
document and reports every problem found, each with the path of the
offending key.  The canonical form is a sorted-key JSON rendering of the
scenario, which also feeds the config hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .dynamics import SubsystemModel
from .engine import Scenario
from .errors import ModelInvalidError, ScenarioValidationError
from .network import IdentifierLayout
from .policy import SCHEMES, PolicyConfig

_TOP_KEYS = {"horizon", "trials", "seed", "channels", "per_slot_row_cap",
             "network", "subsystems", "sweep"}
_NETWORK_KEYS = {"dynamic_bits", "static_bits", "alpha", "one_dominant"}
_SUBSYSTEM_KEYS = {"index", "A", "B", "C", "Q", "R", "W", "V", "x0_mean", "x0_cov",
                   "q_link", "static_id", "policy"}
_POLICY_KEYS = {"scheme", "threshold"}
_MATRIX_KEYS = ("A", "B", "C", "Q", "R", "W", "V", "x0_cov")

DEFAULT_PER_SLOT_ROW_CAP = 200_000

PRESETS = ("two-plant",)


@dataclass
class LoadedConfig:
    """A validated scenario plus the document-level extras the CLI consumes."""

    scenario: Scenario
    sweep: dict[str, list[float]] = field(default_factory=dict)
    per_slot_row_cap: int = DEFAULT_PER_SLOT_ROW_CAP


def build_preset(name: str) -> dict:
    """Built-in scenario documents, reproducible with a single flag."""
    if name == "two-plant":
        eye = [[1.0, 0.0], [0.0, 1.0]]
        small = [[0.01, 0.0], [0.0, 0.01]]
        noise = [[0.1, 0.0], [0.0, 0.1]]
        sub = {
            "B": eye, "C": eye, "Q": eye, "R": small, "W": noise, "V": small,
            "x0_mean": [0.0, 0.0], "x0_cov": noise,
            "policy": {"scheme": "coil", "threshold": 0.0},
        }
        return {
            "horizon": 1000,
            "trials": 1000,
            "seed": 12345,
            "channels": 1,
            "network": {"dynamic_bits": 20, "static_bits": 9, "alpha": 1000.0,
                        "one_dominant": True},
            "subsystems": [
                {"index": 1, "A": [[1.1, 0.0], [0.0, 0.9]], "q_link": 0.85, **sub},
                {"index": 2, "A": [[0.9, 0.0], [0.0, 0.9]], "q_link": 0.5, **sub},
            ],
        }
    raise ScenarioValidationError([f"unknown preset {name!r}; available: {PRESETS}"])


def load_config(source: str | Path | dict) -> LoadedConfig:
    """Load and fully validate a scenario document from a path, dict, or preset name."""
    if isinstance(source, dict):
        doc = source
    else:
        path = Path(source)
        if str(source) in PRESETS and not path.exists():
            doc = build_preset(str(source))
        elif path.suffix == ".json":
            doc = json.loads(path.read_text())
        else:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
    return _validate_document(doc)


def parse_scenario(source: str | Path | dict) -> Scenario:
    return load_config(source).scenario


def _validate_document(doc: dict) -> LoadedConfig:
    errors: list[str] = []

    def err(path, msg):
        errors.append(f"{path}: {msg}")

    if not isinstance(doc, dict):
        raise ScenarioValidationError(["document: expected a table at the top level"])
    for key in sorted(set(doc) - _TOP_KEYS):
        err(key, "unknown key")

    horizon = _expect_int(doc, "horizon", 1000, errors, minimum=1)
    trials = _expect_int(doc, "trials", 1, errors, minimum=1)
    seed = _expect_int(doc, "seed", 0, errors, minimum=None)
    channels = _expect_int(doc, "channels", 1, errors, minimum=1)
    row_cap = _expect_int(doc, "per_slot_row_cap", DEFAULT_PER_SLOT_ROW_CAP, errors, minimum=1)

    layout = IdentifierLayout()
    net = doc.get("network", {})
    if not isinstance(net, dict):
        err("network", "expected a table")
    else:
        for key in sorted(set(net) - _NETWORK_KEYS):
            err(f"network.{key}", "unknown key")
        try:
            layout = IdentifierLayout(
                dynamic_bits=int(net.get("dynamic_bits", 20)),
                static_bits=int(net.get("static_bits", 9)),
                alpha=float(net.get("alpha", 1000.0)),
                one_dominant=bool(net.get("one_dominant", True)),
            )
        except (TypeError, ValueError) as exc:
            err("network", str(exc))

    sweep: dict[str, list[float]] = {}
    raw_sweep = doc.get("sweep", {})
    if not isinstance(raw_sweep, dict):
        err("sweep", "expected a table mapping scheme to threshold list")
    else:
        for scheme, thresholds in raw_sweep.items():
            if scheme not in SCHEMES:
                err(f"sweep.{scheme}", f"unknown scheme; expected one of {SCHEMES}")
                continue
            if not isinstance(thresholds, list) or not thresholds:
                err(f"sweep.{scheme}", "expected a non-empty list of thresholds")
                continue
            vals = []
            for j, th in enumerate(thresholds):
                if not isinstance(th, (int, float)) or th < 0:
                    err(f"sweep.{scheme}[{j}]", "thresholds must be numbers >= 0")
                else:
                    vals.append(float(th))
            sweep[scheme] = vals

    raw_subs = doc.get("subsystems")
    models: list[SubsystemModel] = []
    policies: list[PolicyConfig] = []
    if not isinstance(raw_subs, list) or not raw_subs:
        err("subsystems", "expected a non-empty list of subsystem tables")
    else:
        for idx, raw in enumerate(raw_subs):
            base = f"subsystems[{idx}]"
            if not isinstance(raw, dict):
                err(base, "expected a table")
                continue
            for key in sorted(set(raw) - _SUBSYSTEM_KEYS):
                err(f"{base}.{key}", "unknown key")
            missing = [k for k in _MATRIX_KEYS + ("x0_mean", "q_link") if k not in raw]
            for k in missing:
                err(f"{base}.{k}", "missing required field")
            pol_doc = raw.get("policy")
            if not isinstance(pol_doc, dict):
                err(f"{base}.policy", "missing policy table")
                continue
            for key in sorted(set(pol_doc) - _POLICY_KEYS):
                err(f"{base}.policy.{key}", "unknown key")
            if missing:
                continue
            q_link = raw["q_link"]
            if isinstance(q_link, list):
                bad = [q for q in q_link if not isinstance(q, (int, float)) or not 0 <= q <= 1]
            else:
                bad = [] if isinstance(q_link, (int, float)) and 0 <= q_link <= 1 else [q_link]
            if bad:
                err(f"{base}.q_link", f"probabilities must lie in [0, 1], got {bad}")
                continue
            try:
                models.append(
                    SubsystemModel(
                        index=int(raw.get("index", idx + 1)),
                        A=raw["A"], B=raw["B"], C=raw["C"], Q=raw["Q"], R=raw["R"],
                        W=raw["W"], V=raw["V"],
                        x0_mean=raw["x0_mean"], x0_cov=raw["x0_cov"],
                        q_link=q_link,
                        static_id=raw.get("static_id"),
                    )
                )
            except (ModelInvalidError, TypeError, ValueError) as exc:
                err(base, str(exc))
                continue
            try:
                policies.append(
                    PolicyConfig(
                        scheme=str(pol_doc.get("scheme", "")).lower(),
                        threshold=float(pol_doc.get("threshold", 0.0)),
                    )
                )
            except (ModelInvalidError, TypeError, ValueError) as exc:
                err(f"{base}.policy", str(exc))

    if errors:
        raise ScenarioValidationError(errors)

    try:
        scenario = Scenario(
            subsystems=models,
            policies=policies,
            layout=layout,
            n_channels=channels,
            horizon=horizon,
            n_trials=trials,
            base_seed=seed,
        )
    except ModelInvalidError as exc:
        raise ScenarioValidationError([str(exc)]) from exc
    return LoadedConfig(scenario=scenario, sweep=sweep, per_slot_row_cap=row_cap)


def _expect_int(doc, key, default, errors, minimum):
    val = doc.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        errors.append(f"{key}: expected an integer, got {val!r}")
        return default
    if minimum is not None and val < minimum:
        errors.append(f"{key}: must be >= {minimum}, got {val}")
        return default
    return val


def scenario_to_dict(scenario: Scenario) -> dict:
    """Canonical plain-data rendering of a scenario (no sweep, no CLI extras)."""
    subs = []
    for m, pol in zip(scenario.subsystems, scenario.policies):
        entry = {
            "index": m.index,
            "A": m.A.tolist(), "B": m.B.tolist(), "C": m.C.tolist(),
            "Q": m.Q.tolist(), "R": m.R.tolist(), "W": m.W.tolist(), "V": m.V.tolist(),
            "x0_mean": m.x0_mean.tolist(), "x0_cov": m.x0_cov.tolist(),
            "q_link": m.q_link if not isinstance(m.q_link, np.ndarray) else m.q_link.tolist(),
            "policy": {"scheme": pol.scheme, "threshold": pol.threshold},
        }
        if m.static_id is not None:
            entry["static_id"] = m.static_id
        subs.append(entry)
    return {
        "horizon": scenario.horizon,
        "trials": scenario.n_trials,
        "seed": scenario.base_seed,
        "channels": scenario.n_channels,
        "network": {
            "dynamic_bits": scenario.layout.dynamic_bits,
            "static_bits": scenario.layout.static_bits,
            "alpha": scenario.layout.alpha,
            "one_dominant": scenario.layout.one_dominant,
        },
        "subsystems": subs,
    }


def canonical_json(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), sort_keys=True, separators=(",", ":"))


def config_hash(scenario: Scenario) -> str:
    return hashlib.sha256(canonical_json(scenario).encode()).hexdigest()
