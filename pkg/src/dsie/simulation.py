"""Scripted bus-voltage scenarios, ground truth and PMU measurement streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .csvio import write_table
from .errors import ConfigurationError
from .estimation import MeasurementFrame
from .network import (
    AreaPartition,
    Branch,
    Bus,
    DiscreteModel,
    MeasurementLayout,
    NetworkTopology,
    build_measurement_matrices,
    build_partition,
    line_from_length,
    stack_phasors,
)
from .units import Bases, NoiseSpec

# stream ids used with SeedSequence so process and measurement draws never alias
_PROCESS_STREAM = 0
_MEASUREMENT_STREAM = 1


@dataclass(frozen=True)
class VoltageSegment:
    """Bus voltage from ``start`` onward: ``(d + jq) + (ramp_d + j ramp_q) (t - start)``."""

    start: float
    d: float
    q: float
    ramp_d: float = 0.0
    ramp_q: float = 0.0

    def value(self, t: float) -> complex:
        return complex(self.d, self.q) + complex(self.ramp_d, self.ramp_q) * (t - self.start)


@dataclass(frozen=True)
class VoltageEvent:
    """Step change: from ``time`` on, each bus in ``buses`` holds the matching value."""

    time: float
    buses: tuple
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "values", tuple(complex(v) for v in self.values))
        if len(self.buses) != len(self.values):
            raise ConfigurationError("event needs one value per bus")


@dataclass(frozen=True)
class Scenario:
    """Piecewise bus-voltage script sampled on ``t0 + k dt``, ``k < duration / dt``."""

    duration: float
    dt: float
    profiles: Mapping  # bus -> sequence of VoltageSegment
    events: tuple = ()
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "profiles", {b: tuple(s) for b, s in self.profiles.items()})
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.time)))
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.duration > 0:
            raise ConfigurationError("duration must be positive")
        for bus, segs in self.profiles.items():
            if not segs or min(s.start for s in segs) > self.t0 + 1e-12:
                raise ConfigurationError(f"profile of bus {bus!r} does not cover the start of the run")
        for ev in self.events:
            if abs(self.step_of(ev.time) * self.dt + self.t0 - ev.time) > 1e-9:
                raise ConfigurationError(f"event time {ev.time} is not on the sampling grid")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps)

    def step_of(self, t: float) -> int:
        return int(round((t - self.t0) / self.dt))

    def event_steps(self) -> list[int]:
        return [self.step_of(e.time) for e in self.events]

    def voltage(self, bus, t: float) -> complex:
        # segments and events both act as change points; the latest one at or before t wins
        best, best_t = None, -np.inf
        for s in self.profiles[bus]:
            if s.start <= t + 1e-12 and s.start >= best_t:
                best, best_t = s.value, s.start
        for ev in self.events:
            if ev.time <= t + 1e-12 and ev.time >= best_t and bus in ev.buses:
                v = ev.values[ev.buses.index(bus)]
                best, best_t = (lambda _t, v=v: v), ev.time
        return best(t)

    def voltages(self, bus_ids: Sequence) -> np.ndarray:
        """Complex ``(n_steps, m)`` array of sampled voltages."""
        missing = [b for b in bus_ids if b not in self.profiles]
        if missing:
            raise ConfigurationError(f"scenario has no profile for buses {missing}")
        return np.array([[self.voltage(b, t) for b in bus_ids] for t in self.times], dtype=complex)


@dataclass(frozen=True)
class TruthTrajectory:
    t: np.ndarray
    x: np.ndarray  # (N, 2n) real-stacked branch currents, A
    u: np.ndarray  # (N, 2m) real-stacked bus voltages, V
    w: np.ndarray  # (N-1, 2n) process-noise draws, x[k] = A x[k-1] + B u[k-1] + w[k-1]
    topology: NetworkTopology = field(repr=False, compare=False)

    @property
    def n_steps(self) -> int:
        return self.t.size


def steady_state_currents(topology: NetworkTopology, v: np.ndarray) -> np.ndarray:
    """Per-branch ``(v_from - v_to) / (R + j w L)`` for complex bus voltages ``v``."""
    idx = {b: i for i, b in enumerate(topology.bus_ids)}
    return np.array([
        (v[idx[br.from_bus]] - v[idx[br.to_bus]]) / complex(br.r, topology.omega * br.l)
        for br in topology.branches
    ])


def simulate_truth(model: DiscreteModel, scenario: Scenario, process_noise: NoiseSpec | None = None,
                   bases: Bases | None = None) -> TruthTrajectory:
    """Run ``x_k = A x_k-1 + B u_k-1 (+ w)`` from the sinusoidal steady state of ``u_0``."""
    if model.topology is None:
        raise ConfigurationError("model carries no topology")
    if abs(model.dt - scenario.dt) > 1e-12 * scenario.dt:
        raise ConfigurationError(f"model dt {model.dt} differs from scenario dt {scenario.dt}")
    topo = model.topology
    v = scenario.voltages(topo.bus_ids)
    N = v.shape[0]
    u = np.stack([stack_phasors(row) for row in v])
    x = np.empty((N, model.n_x))
    x[0] = stack_phasors(steady_state_currents(topo, v[0]))
    w = np.zeros((max(N - 1, 0), model.n_x))
    if process_noise is not None and process_noise.sigma2_q > 0:
        rng = np.random.default_rng([process_noise.seed, _PROCESS_STREAM])
        sd = np.sqrt(process_noise.process_variance(bases or Bases()))
        w = sd * rng.standard_normal(w.shape)
    for k in range(1, N):
        x[k] = model.A @ x[k - 1] + model.B @ u[k - 1] + w[k - 1]
    return TruthTrajectory(t=scenario.times, x=x, u=u, w=w, topology=topo)


def generate_measurements(truth: TruthTrajectory, layout: MeasurementLayout, noise: NoiseSpec,
                          bases: Bases | None = None) -> list[MeasurementFrame]:
    """Noisy PMU frames ``z_x = C x + e_x``, ``z_u = D u + e_u``; seeded and reproducible."""
    bases = bases or Bases()
    C, D = build_measurement_matrices(layout, truth.topology)
    rng = np.random.default_rng([noise.seed, _MEASUREMENT_STREAM])
    sx = np.sqrt(noise.current_variance(bases))
    su = np.sqrt(noise.voltage_variance(bases))
    ex = sx * rng.standard_normal((truth.n_steps, C.shape[0]))
    eu = su * rng.standard_normal((truth.n_steps, D.shape[0]))
    return [
        MeasurementFrame(k=k, z_x=C @ truth.x[k] + ex[k], z_u=D @ truth.u[k] + eu[k], t=float(truth.t[k]))
        for k in range(truth.n_steps)
    ]


# ---------------------------------------------------------------------------
# CSV export


def _signal_columns(prefix: str, ids) -> list[str]:
    return [f"{prefix}_{i}_{c}" for i in ids for c in ("d", "q")]


def write_truth_csv(path, truth: TruthTrajectory):
    topo = truth.topology
    header = ["step", "time_s"] + _signal_columns("i", topo.branch_ids) + _signal_columns("v", topo.bus_ids)
    rows = ([k, float(truth.t[k])] + [float(v) for v in truth.x[k]] + [float(v) for v in truth.u[k]]
            for k in range(truth.n_steps))
    return write_table(path, header, rows, "truth")


def write_measurements_csv(path, frames: Sequence[MeasurementFrame], layout: MeasurementLayout):
    header = (["step", "time_s"] + _signal_columns("zi", layout.metered_branches)
              + _signal_columns("zv", layout.metered_buses))
    rows = ([f.k, float(f.t)] + [float(v) for v in f.z_x] + [float(v) for v in f.z_u] for f in frames)
    return write_table(path, header, rows, "measurements")


# ---------------------------------------------------------------------------
# Potsdam 13-bus preset

POTSDAM_LENGTHS_FT = {
    "1-2": 3100, "2-3": 4150, "3-4": 125, "4-5": 3350, "5-6": 4350, "6-7": 5425, "7-9": 7025,
    "8-9": 8100, "9-10": 8200, "10-11": 375, "11-12": 400, "1-12": 1950, "13-2": 4150,
}

# metadata only; nothing here drives the voltage script
POTSDAM_LOADS_KW_KVAR = {
    1: (4866, 3015), 2: (48, 30), 3: (144, 89), 4: (54, 33), 5: (560, 347), 6: (122, 76), 7: (142, 88),
    9: (4166, 2582), 11: (48, 30), 12: (48, 30), 13: (83, 51),
}
POTSDAM_DGU_R_OHM_L_MH = {1: (0.3, 7.8), 8: (0.4, 10.0), 9: (0.2, 4.4), 10: (1.0, 26.0), 13: (1.2, 29.0)}

POTSDAM_AREAS = {
    1: ("1-2", "11-12", "1-12"),
    2: ("2-3", "3-4", "13-2"),
    3: ("4-5", "5-6", "6-7"),
    4: ("7-9", "8-9", "9-10", "10-11"),
}
# buses shared between areas (2, 11) are left unmetered so neighbours' estimates stay independent
POTSDAM_METERED_BUSES = (1, 3, 4, 8, 9, 10, 12, 13)

# hand-picked operating point near 13.2 kV giving branch currents of tens to ~130 A
POTSDAM_BASE_VOLTAGES = {
    1: 13200.0 + 0.0j, 2: 13196.7 - 1.1j, 3: 13200.8 + 0.3j, 4: 13200.9 + 0.3j, 5: 13202.7 + 0.9j,
    6: 13199.5 - 0.2j, 7: 13193.9 - 2.1j, 8: 13137.0 - 22.0j, 9: 13184.5 - 5.4j, 10: 13191.7 - 2.9j,
    11: 13192.9 - 2.5j, 12: 13194.1 - 2.0j, 13: 13187.8 - 4.3j,
}

# common-mode load steps of 8% (fraction of the present level) every 0.1 s, plus a differential
# step at bus 6 so the interior of the network also sees current transients
POTSDAM_STEPS = (-0.08, 0.08, -0.08, 0.08, -0.08, 0.08, -0.08, 0.08, -0.08, 0.08)
POTSDAM_DIFFERENTIAL_BUS = 6
POTSDAM_DIFFERENTIAL = 0.002


def potsdam_topology(cable: str = "500MCM") -> NetworkTopology:
    buses = tuple(Bus(i) for i in range(1, 14))
    branches = []
    for bid, length in POTSDAM_LENGTHS_FT.items():
        a, b = (int(s) for s in bid.split("-"))
        r, l = line_from_length(length, cable)
        branches.append(Branch(bid, a, b, r, l))
    return NetworkTopology(buses, tuple(branches))


def potsdam_scenario(t0: float = 0.75, duration: float = 1.0, dt: float = 0.01) -> Scenario:
    profiles = {b: (VoltageSegment(0.0, v.real, v.imag),) for b, v in POTSDAM_BASE_VOLTAGES.items()}
    level = dict(POTSDAM_BASE_VOLTAGES)
    events = []
    for i, s in enumerate(POTSDAM_STEPS):
        t = round(t0 + 0.05 + 0.1 * i, 10)
        if t >= t0 + duration:
            break
        sign = 1.0 if i % 2 == 0 else -1.0
        for b in level:
            level[b] = level[b] * (1.0 + s)
        level[POTSDAM_DIFFERENTIAL_BUS] *= 1.0 + sign * POTSDAM_DIFFERENTIAL
        events.append(VoltageEvent(t, tuple(level), tuple(level.values())))
    return Scenario(duration=duration, dt=dt, profiles=profiles, events=tuple(events), t0=t0)


def potsdam_preset() -> tuple[NetworkTopology, MeasurementLayout, AreaPartition, Scenario]:
    """Potsdam 13-bus microgrid: topology, PMU layout, 4-area split and the default scenario.

    Area 3 carries no sensors and is unobservable; the others are observable
    on their own. Bases are the package defaults (13.2 kV, 10 MVA).
    """
    topo = potsdam_topology()
    metered = tuple(b for a in (1, 2, 4) for b in POTSDAM_AREAS[a])
    layout = MeasurementLayout(
        tuple(b for b in topo.branch_ids if b in metered),
        tuple(b for b in topo.bus_ids if b in POTSDAM_METERED_BUSES),
    )
    part = build_partition(topo, layout, POTSDAM_AREAS)
    return topo, layout, part, potsdam_scenario()
