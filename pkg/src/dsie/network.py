"""Branch-current network model in the synchronous dq frame.

Phasors are real-stacked as interleaved ``(d, q)`` pairs, so a complex
coefficient ``c`` acting on a phasor becomes the 2x2 block
``[[Re c, -Im c], [Im c, Re c]]``. All quantities are SI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigurationError, ParameterError, PartitionError, TopologyError
from .units import Bases, NoiseSpec

OMEGA_60HZ = 2.0 * math.pi * 60.0
FEET_PER_MILE = 5280.0

BusId = Hashable


# ---------------------------------------------------------------------------
# real stacking helpers


def real_block(c: complex) -> np.ndarray:
    """2x2 real matrix acting on ``(d, q)`` like multiplication by ``c``."""
    c = complex(c)
    return np.array([[c.real, -c.imag], [c.imag, c.real]])


def realify(M) -> np.ndarray:
    """Expand a complex ``r x c`` matrix to its real ``2r x 2c`` form."""
    M = np.atleast_2d(np.asarray(M, dtype=complex))
    r, c = M.shape
    out = np.empty((2 * r, 2 * c))
    out[0::2, 0::2] = M.real
    out[0::2, 1::2] = -M.imag
    out[1::2, 0::2] = M.imag
    out[1::2, 1::2] = M.real
    return out


def stack_phasors(z) -> np.ndarray:
    """Complex vector -> interleaved real ``[d0, q0, d1, q1, ...]``."""
    z = np.asarray(z, dtype=complex).ravel()
    out = np.empty(2 * z.size)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def unstack_phasors(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., 0::2] + 1j * x[..., 1::2]


def pair_indices(indices: Sequence[int]) -> np.ndarray:
    """Real-stacked row indices for a list of complex indices."""
    idx = np.asarray(indices, dtype=int)
    return np.stack([2 * idx, 2 * idx + 1], axis=-1).ravel()


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class Bus:
    id: BusId
    v_nominal: float = 13.2e3


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: BusId
    to_bus: BusId
    r: float
    l: float


@dataclass(frozen=True)
class CableType:
    """Per-mile positive-sequence data; reactance is quoted at ``f_ref``."""

    r_per_mile: float
    x_per_mile: float
    b_per_mile: float = 0.0
    f_ref: float = 60.0


CABLES = {
    "500MCM": CableType(r_per_mile=0.1558, x_per_mile=0.1927, b_per_mile=253.54e-6),
}


def line_from_length(length_ft: float, cable: str | CableType = "500MCM") -> tuple[float, float]:
    """Series ``(R [ohm], L [H])`` of a cable run. Shunt susceptance is ignored."""
    if isinstance(cable, str):
        try:
            cable = CABLES[cable]
        except KeyError:
            raise ConfigurationError(f"unknown cable type {cable!r}") from None
    miles = length_ft / FEET_PER_MILE
    r = miles * cable.r_per_mile
    l = miles * cable.x_per_mile / (2.0 * math.pi * cable.f_ref)
    return r, l


@dataclass(frozen=True)
class NetworkTopology:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    omega: float = OMEGA_60HZ

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate bus id")
        if len({br.id for br in self.branches}) != len(self.branches):
            raise TopologyError("duplicate branch id")
        if not self.buses:
            raise TopologyError("network has no buses")
        known = set(ids)
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise TopologyError(f"branch {br.id} references unknown bus {end!r}")
            if br.from_bus == br.to_bus:
                raise TopologyError(f"branch {br.id} is a self loop")
            if not (br.r > 0):
                raise ParameterError(f"branch {br.id}: R must be positive")
            if not (br.l > 0):
                raise ParameterError(f"branch {br.id}: L must be positive")
        if not self._connected():
            raise TopologyError("network graph is not connected")

    def _connected(self) -> bool:
        m = len(self.buses)
        if m == 1:
            return True
        rows = [self.bus_index(br.from_bus) for br in self.branches]
        cols = [self.bus_index(br.to_bus) for br in self.branches]
        g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
        n_comp, _ = connected_components(g, directed=False)
        return n_comp == 1

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list:
        return [b.id for b in self.buses]

    @property
    def branch_ids(self) -> list[str]:
        return [br.id for br in self.branches]

    def bus_index(self, bus_id) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise TopologyError(f"unknown bus {bus_id!r}")

    def branch_index(self, branch_id) -> int:
        for k, br in enumerate(self.branches):
            if br.id == branch_id:
                return k
        raise TopologyError(f"unknown branch {branch_id!r}")

    def branch(self, branch_id) -> Branch:
        return self.branches[self.branch_index(branch_id)]

    def impedance(self, branch_id) -> complex:
        br = self.branch(branch_id)
        return complex(br.r, self.omega * br.l)

    def subnetwork(self, branch_ids, bus_ids) -> "NetworkTopology":
        """Topology restricted to the given branches and buses, in global order."""
        branch_ids, bus_ids = set(branch_ids), set(bus_ids)
        return NetworkTopology(
            buses=tuple(b for b in self.buses if b.id in bus_ids),
            branches=tuple(br for br in self.branches if br.id in branch_ids),
            omega=self.omega,
        )


def build_incidence(topology: NetworkTopology) -> np.ndarray:
    """Signed branch-to-bus incidence, ``n x m``: +1 at the from-bus, -1 at the to-bus."""
    inc = np.zeros((topology.n_branches, topology.n_buses), dtype=np.int8)
    index = {bid: i for i, bid in enumerate(topology.bus_ids)}
    for k, br in enumerate(topology.branches):
        try:
            inc[k, index[br.from_bus]] = 1
            inc[k, index[br.to_bus]] = -1
        except KeyError as exc:
            raise TopologyError(f"dangling endpoint on branch {br.id}") from exc
    return inc


# ---------------------------------------------------------------------------
# continuous and discrete models


@dataclass(frozen=True)
class ContinuousModel:
    """``di/dt = -diag(R/L + j w) i + (1/L) o B_ind^T v`` in real-stacked form."""

    A_c: np.ndarray
    B_c: np.ndarray
    rates: np.ndarray  # complex R/L + j w per branch
    inv_l: np.ndarray
    incidence: np.ndarray

    @property
    def phasor_layout(self) -> dict[int, tuple[int, int]]:
        return {k: (2 * k, 2 * k + 1) for k in range(len(self.rates))}

    @classmethod
    def from_rates(cls, rates, inv_l, incidence) -> "ContinuousModel":
        rates = np.asarray(rates, dtype=complex)
        inv_l = np.asarray(inv_l, dtype=float)
        incidence = np.asarray(incidence)
        A_c = realify(np.diag(-rates))
        B_c = realify(inv_l[:, None] * incidence)
        return cls(A_c=A_c, B_c=B_c, rates=rates, inv_l=inv_l, incidence=incidence)


def build_continuous(topology: NetworkTopology) -> ContinuousModel:
    r = np.array([br.r for br in topology.branches], dtype=float)
    l = np.array([br.l for br in topology.branches], dtype=float)
    if np.any(l <= 0):
        raise ParameterError("inductance must be positive")
    rates = r / l + 1j * topology.omega
    return ContinuousModel.from_rates(rates, 1.0 / l, build_incidence(topology))


def _phi(rates: np.ndarray, dt: float) -> np.ndarray:
    """(1 - exp(-lambda dt)) / lambda, continuous at lambda = 0."""
    z = rates * dt
    out = np.empty_like(rates, dtype=complex)
    small = np.abs(z) < 1e-8
    out[~small] = -np.expm1(-z[~small]) / rates[~small]
    zs = z[small]
    out[small] = dt * (1.0 - zs / 2.0 + zs**2 / 6.0)
    return out


def discretize(model: ContinuousModel, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization, branch by branch."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    a = np.exp(-model.rates * dt)
    g = _phi(model.rates, dt) * model.inv_l
    A = realify(np.diag(a))
    B = realify(g[:, None] * model.incidence)
    return A, B


@dataclass(frozen=True)
class MeasurementLayout:
    metered_branches: tuple = ()
    metered_buses: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "metered_branches", tuple(self.metered_branches))
        object.__setattr__(self, "metered_buses", tuple(self.metered_buses))

    @classmethod
    def full(cls, topology: NetworkTopology) -> "MeasurementLayout":
        return cls(tuple(topology.branch_ids), tuple(topology.bus_ids))

    def restricted(self, topology: NetworkTopology) -> "MeasurementLayout":
        """The part of this layout that lies inside ``topology``."""
        br, bu = set(topology.branch_ids), set(topology.bus_ids)
        return MeasurementLayout(
            tuple(b for b in topology.branch_ids if b in set(self.metered_branches) and b in br),
            tuple(b for b in topology.bus_ids if b in set(self.metered_buses) and b in bu),
        )


def build_measurement_matrices(layout: MeasurementLayout, topology: NetworkTopology):
    """Selection matrices ``C`` (branch currents) and ``D`` (bus voltages).

    Rows follow the order of ``layout``; a layout with no voltage sensors
    yields ``D`` with zero rows.
    """
    if not layout.metered_branches and not layout.metered_buses:
        raise ConfigurationError("measurement layout is empty")
    if len(set(layout.metered_branches)) != len(layout.metered_branches) or len(
        set(layout.metered_buses)
    ) != len(layout.metered_buses):
        raise ConfigurationError("duplicate sensor in layout")
    try:
        br_idx = [topology.branch_index(b) for b in layout.metered_branches]
        bu_idx = [topology.bus_index(b) for b in layout.metered_buses]
    except TopologyError as exc:
        raise ConfigurationError(str(exc)) from exc
    C = np.eye(2 * topology.n_branches)[pair_indices(br_idx)] if br_idx else np.zeros((0, 2 * topology.n_branches))
    D = np.eye(2 * topology.n_buses)[pair_indices(bu_idx)] if bu_idx else np.zeros((0, 2 * topology.n_buses))
    return C, D


@dataclass(frozen=True)
class DiscreteModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R_x: np.ndarray
    R_u: np.ndarray
    dt: float
    topology: NetworkTopology | None = field(default=None, compare=False, repr=False)
    layout: MeasurementLayout | None = field(default=None, compare=False, repr=False)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def l(self) -> int:
        return self.D.shape[0]

    def with_covariances(self, Q=None, R_x=None, R_u=None) -> "DiscreteModel":
        return DiscreteModel(
            self.A, self.B, self.C, self.D,
            self.Q if Q is None else Q,
            self.R_x if R_x is None else R_x,
            self.R_u if R_u is None else R_u,
            self.dt, self.topology, self.layout,
        )


def build_discrete_model(
    topology: NetworkTopology,
    layout: MeasurementLayout,
    dt: float,
    noise: NoiseSpec | None = None,
    bases: Bases | None = None,
) -> DiscreteModel:
    noise = noise or NoiseSpec()
    bases = bases or Bases()
    A, B = discretize(build_continuous(topology), dt)
    C, D = build_measurement_matrices(layout, topology)
    return DiscreteModel(
        A=A, B=B, C=C, D=D,
        Q=noise.process_variance(bases) * np.eye(A.shape[0]),
        R_x=noise.current_variance(bases) * np.eye(C.shape[0]),
        R_u=noise.voltage_variance(bases) * np.eye(D.shape[0]),
        dt=dt, topology=topology, layout=layout,
    )


# ---------------------------------------------------------------------------
# observability


@dataclass(frozen=True)
class ObservabilityReport:
    rank: int
    required: int
    n_rows: int
    observable: bool
    note: str = (
        "each branch-current sensor contributes two row pairs of O (its own row and the "
        "propagated row), so removing it costs rank twice as fast as a bus-voltage sensor"
    )


def regressor(model: DiscreteModel) -> np.ndarray:
    """Stacked batch regressor ``[[C, 0], [0, D], [CA, CB]]``."""
    C, D = model.C, model.D
    return np.block([
        [C, np.zeros((C.shape[0], model.n_u))],
        [np.zeros((D.shape[0], model.n_x)), D],
        [C @ model.A, C @ model.B],
    ])


def numerical_rank(M: np.ndarray, rtol: float = 1e-10) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def check_observability(model: DiscreteModel) -> ObservabilityReport:
    O = regressor(model)
    required = model.n_x + model.n_u
    # column scaling keeps the relative threshold meaningful when A ~ 1 and B ~ dt/L
    norms = np.linalg.norm(O, axis=0)
    norms[norms == 0] = 1.0
    rank = numerical_rank(O / norms)
    return ObservabilityReport(rank=rank, required=required, n_rows=O.shape[0], observable=rank >= required)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class Area:
    id: Hashable
    branches: tuple
    buses: tuple
    topology: NetworkTopology
    layout: MeasurementLayout


@dataclass(frozen=True)
class AreaPartition:
    areas: tuple[Area, ...]
    shared_buses: dict
    selection_maps: dict

    def area(self, area_id) -> Area:
        for a in self.areas:
            if a.id == area_id:
                return a
        raise KeyError(area_id)

    @property
    def area_ids(self) -> list:
        return [a.id for a in self.areas]

    def neighbors(self, area_id) -> list:
        return [j for (i, j) in self.shared_buses if i == area_id]

    def subset(self, area_ids) -> "AreaPartition":
        keep = set(area_ids)
        return AreaPartition(
            areas=tuple(a for a in self.areas if a.id in keep),
            shared_buses={k: v for k, v in self.shared_buses.items() if k[0] in keep and k[1] in keep},
            selection_maps={k: v for k, v in self.selection_maps.items() if k[0] in keep and k[1] in keep},
        )


def _normalise_assignment(assignment) -> list[tuple]:
    out = []
    for area_id, spec in assignment.items():
        if isinstance(spec, Mapping):
            out.append((area_id, tuple(spec["branches"]), tuple(spec.get("buses", ()))))
        else:
            out.append((area_id, tuple(spec), ()))
    return out


def build_partition(topology: NetworkTopology, layout: MeasurementLayout, assignment) -> AreaPartition:
    """Split the network into areas given ``{area: branches}`` or ``{area: {branches, buses}}``."""
    entries = _normalise_assignment(assignment)
    seen: dict[str, Hashable] = {}
    for area_id, branches, _ in entries:
        for b in branches:
            if b not in topology.branch_ids:
                raise PartitionError(f"area {area_id!r}: unknown branch {b!r}")
            if b in seen:
                raise PartitionError(f"branch {b!r} assigned to areas {seen[b]!r} and {area_id!r}")
            seen[b] = area_id
    missing = [b for b in topology.branch_ids if b not in seen]
    if missing:
        raise PartitionError(f"branches not assigned to any area: {missing}")

    areas = []
    for area_id, branches, explicit_buses in entries:
        ends = set()
        for b in branches:
            br = topology.branch(b)
            ends.update((br.from_bus, br.to_bus))
        if explicit_buses:
            bus_set = set(explicit_buses)
            for b in branches:
                br = topology.branch(b)
                if br.from_bus not in bus_set or br.to_bus not in bus_set:
                    raise PartitionError(
                        f"branch {b!r} straddles area {area_id!r} without both endpoints in its bus set"
                    )
            ends |= bus_set
        try:
            sub = topology.subnetwork(branches, ends)
        except TopologyError as exc:
            raise PartitionError(f"area {area_id!r}: {exc}") from exc
        areas.append(Area(area_id, tuple(sub.branch_ids), tuple(sub.bus_ids), sub, layout.restricted(sub)))

    covered = set().union(*(a.buses for a in areas))
    if covered != set(topology.bus_ids):
        raise PartitionError(f"buses outside every area: {set(topology.bus_ids) - covered}")

    order = {bid: i for i, bid in enumerate(topology.bus_ids)}
    shared, maps = {}, {}
    for ai in areas:
        for aj in areas:
            if ai.id == aj.id:
                continue
            common = sorted(set(ai.buses) & set(aj.buses), key=order.__getitem__)
            if not common:
                continue
            shared[(ai.id, aj.id)] = tuple(common)
            local = [ai.buses.index(b) for b in common]
            maps[(ai.id, aj.id)] = np.eye(2 * len(ai.buses))[pair_indices(local)]
    return AreaPartition(tuple(areas), shared, maps)


def partition(
    topology: NetworkTopology,
    layout: MeasurementLayout,
    assignment,
    *,
    dt: float,
    noise: NoiseSpec | None = None,
    bases: Bases | None = None,
) -> tuple[AreaPartition, list[DiscreteModel]]:
    """Area partition plus one local discrete model per area.

    Local models are built exactly like the centralized one but only from
    the area's branches (states) and buses (inputs); a bus shared by two
    areas is an input of both.
    """
    part = build_partition(topology, layout, assignment)
    models = []
    for area in part.areas:
        lay = area.layout if (area.layout.metered_branches or area.layout.metered_buses) else None
        if lay is None:
            # an area without sensors still gets a model so observability can be reported
            A, B = discretize(build_continuous(area.topology), dt)
            noise_ = noise or NoiseSpec()
            bases_ = bases or Bases()
            models.append(DiscreteModel(
                A=A, B=B, C=np.zeros((0, A.shape[0])), D=np.zeros((0, B.shape[1])),
                Q=noise_.process_variance(bases_) * np.eye(A.shape[0]),
                R_x=np.zeros((0, 0)), R_u=np.zeros((0, 0)), dt=dt,
                topology=area.topology, layout=area.layout,
            ))
        else:
            models.append(build_discrete_model(area.topology, area.layout, dt, noise, bases))
    return part, models
