"""JSON experiment configuration and the built-in preset.

Schema (all keys optional unless noted)::

    {
      "network": {                                   # required unless "preset" is given
        "omega": 376.99,
        "buses": [1, 2, ...] | [{"id": 1, "v_nominal": 13200.0}, ...],
        "branches": [{"id": "1-2", "from": 1, "to": 2,
                      "length_ft": 3100, "cable": "500MCM"}      # or "r_ohm"/"l_h"
                     , ...]
      },
      "sensors": {"branches": ["1-2", ...], "buses": [1, ...]},   # default: everything metered
      "areas": {"1": ["1-2", ...], ...},
      "scenario": {"t0": 0.0, "duration": 1.0, "dt": 0.01,
                   "profiles": {"1": [{"start": 0.0, "d": 13200.0, "q": 0.0,
                                       "ramp_d": 0.0, "ramp_q": 0.0}], ...},
                   "events": [{"time": 0.5, "buses": [1], "values": [[13000.0, 0.0]]}]},
      "noise": {"sigma2_u": 5e-4, "sigma2_x": 5e-4, "sigma2_q": 1e-4},
      "estimator_noise": {...same keys...},
      "bases": {"v_base": 13200.0, "s_base": 1e7},
      "estimators": ["SIE", "WLS", "TSE", "DSIE"],
      "seed": 0, "alpha": 0.01, "tse_q_pu": 5e-4,
      "attack": {"target_buses": [2, 3, 4, 13], "x_b": [[1500, 20], ...],
                 "start_time": 1.25 | "start_step": 50, "end_step": null,
                 "bias_voltage_sensors": true},
      "preset": "potsdam13"                          # start from the preset, then override
    }

Bus ids given as JSON object keys are matched to network bus ids by their
string form.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .detection import AttackSpec
from .errors import ConfigurationError
from .harness import ESTIMATORS, TSE_PROCESS_PU, ExperimentConfig
from .network import OMEGA_60HZ, Branch, Bus, MeasurementLayout, NetworkTopology, line_from_length
from .simulation import (
    POTSDAM_AREAS,
    Scenario,
    VoltageEvent,
    VoltageSegment,
    potsdam_preset,
)
from .units import Bases, NoiseSpec

PRESETS = ("potsdam13",)

# the attack used with the preset: biases of 1500, 750, 1250 and 850 V (+20 V in q) at 1.25 s
POTSDAM_ATTACK = {
    "target_buses": [2, 3, 4, 13],
    "x_b": [[1500.0, 20.0], [750.0, 20.0], [1250.0, 20.0], [850.0, 20.0]],
    "start_time": 1.25,
    "end_step": None,
}


def _bus_lookup(topology: NetworkTopology, key):
    for b in topology.bus_ids:
        if b == key or str(b) == str(key):
            return b
    raise ConfigurationError(f"unknown bus {key!r}")


def _complex(v) -> complex:
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, (int, float)):
        return complex(float(v), 0.0)
    raise ConfigurationError(f"expected [d, q] pair, got {v!r}")


def parse_network(d: dict) -> NetworkTopology:
    try:
        buses = tuple(
            Bus(b["id"], float(b.get("v_nominal", 13.2e3))) if isinstance(b, dict) else Bus(b)
            for b in d["buses"]
        )
        branches = []
        for br in d["branches"]:
            if "length_ft" in br:
                r, l = line_from_length(float(br["length_ft"]), br.get("cable", "500MCM"))
            else:
                r, l = float(br["r_ohm"]), float(br["l_h"])
            branches.append(Branch(str(br["id"]), br["from"], br["to"], r, l))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed network section: {exc}") from exc
    return NetworkTopology(buses, tuple(branches), float(d.get("omega", OMEGA_60HZ)))


def parse_sensors(d: dict | None, topology: NetworkTopology) -> MeasurementLayout:
    if d is None:
        return MeasurementLayout.full(topology)
    branches = [str(b) for b in d.get("branches", [])]
    for b in branches:
        if b not in topology.branch_ids:
            raise ConfigurationError(f"sensor on unknown branch {b!r}")
    buses = [_bus_lookup(topology, b) for b in d.get("buses", [])]
    return MeasurementLayout(tuple(branches), tuple(buses))


def parse_scenario(d: dict, topology: NetworkTopology) -> Scenario:
    try:
        profiles = {
            _bus_lookup(topology, key): tuple(
                VoltageSegment(float(s.get("start", 0.0)), float(s["d"]), float(s["q"]),
                               float(s.get("ramp_d", 0.0)), float(s.get("ramp_q", 0.0)))
                for s in segs
            )
            for key, segs in d["profiles"].items()
        }
        events = tuple(
            VoltageEvent(float(e["time"]), tuple(_bus_lookup(topology, b) for b in e["buses"]),
                         tuple(_complex(v) for v in e["values"]))
            for e in d.get("events", [])
        )
        return Scenario(duration=float(d["duration"]), dt=float(d["dt"]), profiles=profiles,
                        events=events, t0=float(d.get("t0", 0.0)))
    except (KeyError, TypeError, AttributeError) as exc:
        raise ConfigurationError(f"malformed scenario section: {exc}") from exc


def _noise(d: dict | None, seed: int = 0) -> NoiseSpec:
    d = d or {}
    try:
        return NoiseSpec(float(d.get("sigma2_u", 5e-4)), float(d.get("sigma2_x", 5e-4)),
                         float(d.get("sigma2_q", 1e-4)), seed)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def parse_attack(d: dict | None, topology: NetworkTopology, scenario: Scenario) -> AttackSpec | None:
    if not d:
        return None
    try:
        targets = tuple(_bus_lookup(topology, b) for b in d["target_buses"])
        x_b = np.array([_complex(v) for v in d["x_b"]])
        if "start_step" in d:
            start = int(d["start_step"])
        else:
            start = scenario.step_of(float(d["start_time"]))
        end = d.get("end_step")
        return AttackSpec(targets, x_b, (start, None if end is None else int(end)),
                          bool(d.get("bias_voltage_sensors", True)))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed attack section: {exc}") from exc


def preset_parts(name: str):
    if name != "potsdam13":
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    topo, layout, _, scenario = potsdam_preset()
    return topo, layout, dict(POTSDAM_AREAS), scenario


def build_config(d: dict, *, seed: int | None = None, estimators=None, alpha: float | None = None,
                 out_dir=None, with_attack: bool | None = None) -> ExperimentConfig:
    """Experiment configuration from a parsed JSON document plus CLI overrides."""
    if not isinstance(d, dict):
        raise ConfigurationError("configuration must be a JSON object")
    preset = d.get("preset")
    if preset:
        topo, layout, areas, scenario = preset_parts(preset)
        if "network" in d:
            raise ConfigurationError("give either a preset or a network, not both")
        if "sensors" in d:
            layout = parse_sensors(d["sensors"], topo)
        if "scenario" in d:
            scenario = parse_scenario(d["scenario"], topo)
        areas = d.get("areas", areas)
        default_attack = POTSDAM_ATTACK
    else:
        if "network" not in d:
            raise ConfigurationError("configuration needs a 'network' section or a 'preset'")
        topo = parse_network(d["network"])
        layout = parse_sensors(d.get("sensors"), topo)
        if "scenario" not in d:
            raise ConfigurationError("configuration needs a 'scenario' section")
        scenario = parse_scenario(d["scenario"], topo)
        areas = d.get("areas")
        default_attack = None
    if areas is not None:
        areas = {(int(k) if str(k).isdigit() else k): v for k, v in areas.items()}

    attack_doc = d.get("attack")
    if with_attack is True and not attack_doc:
        attack_doc = default_attack
        if attack_doc is None:
            raise ConfigurationError("no attack configured")
    if with_attack is False:
        attack_doc = None

    seed = int(d.get("seed", 0)) if seed is None else seed
    ests = estimators or d.get("estimators") or ("SIE", "WLS", "TSE")
    if isinstance(ests, str):
        ests = [e for e in ests.split(",") if e.strip()]
    noise = _noise(d.get("noise"), seed)
    est_noise = _noise(d["estimator_noise"], seed) if "estimator_noise" in d else None
    bases = Bases(**d.get("bases", {})) if d.get("bases") else Bases()
    try:
        return ExperimentConfig(
            topology=topo, layout=layout, scenario=scenario, areas=areas, estimators=tuple(ests),
            noise=noise, estimator_noise=est_noise, bases=bases, seed=seed,
            attack=parse_attack(attack_doc, topo, scenario),
            alpha=float(d.get("alpha", 0.01)) if alpha is None else alpha,
            out_dir=out_dir, tse_q_pu=float(d.get("tse_q_pu", TSE_PROCESS_PU)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path, **overrides) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    return build_config(doc, **overrides)


__all__ = ["ESTIMATORS", "PRESETS", "POTSDAM_ATTACK", "build_config", "load_config", "parse_network",
           "parse_scenario", "parse_sensors", "preset_parts"]
