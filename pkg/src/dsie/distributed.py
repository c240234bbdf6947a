"""Multi-area estimation with shared-input assimilation.

Each area runs the batch regression on its own model, publishes the
estimates of the buses it shares with neighbours, screens what it receives
with a Mahalanobis gate and fuses the surviving messages with one WLS solve
before its own predict/update.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .detection import DetectionReport, InnovationTest, detect, mahalanobis, prediction_innovation
from .errors import SynchronizationError
from .estimation import (
    FilterState,
    JointEstimate,
    MeasurementFrame,
    RegressionSystem,
    assemble_regression,
    block_diag,
    predict,
    solve_batch_wls,
    symmetrize,
    update,
)
from .network import AreaPartition, DiscreteModel, MeasurementLayout, check_observability, pair_indices

MESSAGE_SCHEMA = "dsie.shared-input/1"


@dataclass(frozen=True)
class SharedInputMessage:
    from_area: Hashable
    to_area: Hashable
    k: int
    u_shared: np.ndarray
    P_shared: np.ndarray

    def to_json(self) -> str:
        """Text form: ``{"schema", "from", "to", "k", "u", "P"}`` with P row-major."""
        return json.dumps({
            "schema": MESSAGE_SCHEMA,
            "from": self.from_area,
            "to": self.to_area,
            "k": int(self.k),
            "u": [float(v) for v in self.u_shared],
            "P": [[float(v) for v in row] for row in self.P_shared],
        })

    @classmethod
    def from_json(cls, text: str) -> "SharedInputMessage":
        d = json.loads(text)
        if d.get("schema") != MESSAGE_SCHEMA:
            raise ValueError(f"unsupported message schema {d.get('schema')!r}")
        u = np.asarray(d["u"], dtype=float)
        P = np.asarray(d["P"], dtype=float).reshape(u.size, u.size)
        return cls(d["from"], d["to"], int(d["k"]), u, P)


@dataclass(frozen=True)
class FusedEstimate:
    k: int
    x_f: np.ndarray
    u_f: np.ndarray
    P_f: np.ndarray

    def as_joint(self) -> JointEstimate:
        return JointEstimate(k=self.k, x_hat=self.x_f, u_hat=self.u_f, P=self.P_f)


def extract_shared(est: JointEstimate, T: np.ndarray, from_area=None, to_area=None) -> SharedInputMessage:
    """Message with ``T u_hat`` and ``T P_u T^T``."""
    T = np.asarray(T, dtype=float)
    if T.shape[1] != est.u_hat.size:
        raise IndexError(f"selection has {T.shape[1]} columns, input vector has {est.u_hat.size}")
    return SharedInputMessage(
        from_area=from_area, to_area=to_area, k=est.k,
        u_shared=T @ est.u_hat, P_shared=symmetrize(T @ est.P_u @ T.T),
    )


def assimilation_system(local: JointEstimate, msgs: Sequence[SharedInputMessage],
                        selections: Mapping) -> RegressionSystem:
    """Stack ``[x_i; u_i; u_j...] = S [x_f; u_f]`` with ``R = blockdiag(P_i, P_uj...)``."""
    n_x, n_u = local.x_hat.size, local.u_hat.size
    rows = [np.eye(n_x + n_u)]
    covs = [local.P]
    z = [local.theta]
    for msg in msgs:
        if msg.k != local.k:
            raise SynchronizationError(f"message from {msg.from_area!r} is for step {msg.k}, local is {local.k}")
        T = selections[msg.from_area]
        rows.append(np.hstack([np.zeros((T.shape[0], n_x)), T]))
        covs.append(msg.P_shared)
        z.append(msg.u_shared)
    return RegressionSystem(O=np.vstack(rows), R_w=block_diag(*covs), rhs=np.concatenate(z))


def assimilate(local: JointEstimate, msgs: Sequence[SharedInputMessage], selections: Mapping) -> FusedEstimate:
    """One-shot WLS fusion of the local joint estimate with neighbours' shared inputs."""
    if not msgs:
        return FusedEstimate(local.k, local.x_hat.copy(), local.u_hat.copy(), local.P.copy())
    sys = assimilation_system(local, msgs, selections)
    est = solve_batch_wls(sys, k=local.k, n_x=local.x_hat.size)
    return FusedEstimate(local.k, est.x_hat, est.u_hat, est.P)


def assimilation_residual(local: JointEstimate, msgs: Sequence[SharedInputMessage],
                          fused: FusedEstimate, selections: Mapping) -> tuple[np.ndarray, np.ndarray]:
    sys = assimilation_system(local, msgs, selections)
    theta_f = np.concatenate([fused.x_f, fused.u_f])
    y = sys.rhs - sys.O @ theta_f
    S = symmetrize(sys.O @ fused.P_f @ sys.O.T + sys.R_w)
    return y, S


def message_gate(local: JointEstimate, msg: SharedInputMessage, T: np.ndarray, alpha: float = 0.01) -> DetectionReport:
    """Consistency of a neighbour's shared inputs with the local ones.

    The two estimates come from disjoint measurements, so their difference
    has covariance ``T P_u T^T + P_uj``.
    """
    y = msg.u_shared - T @ local.u_hat
    S = T @ local.P_u @ T.T + msg.P_shared
    return detect(mahalanobis(y, S), y.size, alpha)


# ---------------------------------------------------------------------------
# area estimators and the exchange loop


@dataclass
class AreaEstimator:
    area_id: Hashable
    model: DiscreteModel
    state: FilterState
    selections: dict  # neighbour id -> T (shared buses in message order x local inputs)
    bus_ids: tuple = ()

    @classmethod
    def create(cls, area_id, model: DiscreteModel, selections=None, bus_ids=()) -> "AreaEstimator":
        return cls(area_id, model, FilterState(model), dict(selections or {}), tuple(bus_ids))

    def local_solve(self, prev: MeasurementFrame, curr: MeasurementFrame) -> tuple[RegressionSystem, JointEstimate]:
        if curr.k != prev.k + 1:
            raise SynchronizationError(f"area {self.area_id!r}: frames {prev.k}, {curr.k} not consecutive")
        sys = assemble_regression(self.model, prev, curr.z_x)
        return sys, solve_batch_wls(sys, k=prev.k, n_x=self.model.n_x)


def build_area_estimators(partition: AreaPartition, models: Sequence[DiscreteModel],
                          observable_only: bool = True) -> list[AreaEstimator]:
    keep = []
    for area, model in zip(partition.areas, models):
        if observable_only and (model.p + model.l == 0 or not check_observability(model).observable):
            continue
        keep.append((area, model))
    ids = {a.id for a, _ in keep}
    out = []
    for area, model in keep:
        sel = {j: partition.selection_maps[(area.id, j)] for (i, j) in partition.selection_maps
               if i == area.id and j in ids}
        out.append(AreaEstimator.create(area.id, model, sel, area.buses))
    return out


class MessageChannel:
    """In-process mailbox. Delivery happens only after every area has posted (per-step barrier)."""

    def __init__(self):
        self._box: dict = defaultdict(list)
        self.lost: set = set()  # (from, to) links that drop everything

    def post(self, msg: SharedInputMessage) -> None:
        if (msg.from_area, msg.to_area) in self.lost:
            return
        # serialise through the wire form so no arrays are shared between areas
        self._box[(msg.to_area, msg.k)].append(msg.to_json())

    def collect(self, to_area, k: int) -> list[SharedInputMessage]:
        return [SharedInputMessage.from_json(s) for s in self._box.pop((to_area, k), [])]


@dataclass(frozen=True)
class AreaStepResult:
    area_id: Hashable
    local: JointEstimate
    fused: FusedEstimate
    x_filt: np.ndarray
    P_filt: np.ndarray
    innovation: InnovationTest | None
    detection: DetectionReport | None
    gates: dict = field(default_factory=dict)
    excluded: tuple = ()
    degraded: bool = False


def distributed_step(estimators: Sequence[AreaEstimator], frames: Mapping, *, alpha: float = 0.01,
                     channel: MessageChannel | None = None, executor=None) -> dict:
    """One synchronous round for all areas.

    ``frames`` maps area id -> ``(prev_frame, curr_frame)`` in that area's
    local measurement layout. Phases: local solve, exchange, gate,
    assimilate, predict/update. Missing neighbour messages leave the area
    on its local estimate and mark the result degraded.
    """
    channel = channel or MessageChannel()
    mapper = executor.map if executor is not None else map

    def solve(est: AreaEstimator):
        prev, curr = frames[est.area_id]
        return est.local_solve(prev, curr)

    solved = dict(zip([e.area_id for e in estimators], mapper(solve, estimators)))

    for est in estimators:
        _, local = solved[est.area_id]
        for j, T in est.selections.items():
            channel.post(extract_shared(local, T, est.area_id, j))

    def finish(est: AreaEstimator) -> AreaStepResult:
        _, local = solved[est.area_id]
        prev, curr = frames[est.area_id]
        st = est.state
        # screened against the previous fused estimate, before it is replaced
        inn = None
        if st.estimate is not None and st.estimate.k == local.k - 1:
            inn = prediction_innovation(est.model, st.estimate, prev, curr.z_x)
        received = {m.from_area: m for m in channel.collect(est.area_id, local.k)}
        gates, accepted, excluded = {}, [], []
        for j in sorted(est.selections, key=str):
            if j not in received:
                continue
            rep = message_gate(local, received[j], est.selections[j], alpha)
            gates[j] = rep
            (excluded if rep.bad else accepted).append(j)
        degraded = any(j not in received for j in est.selections)
        fused = assimilate(local, [received[j] for j in accepted], est.selections)
        joint = fused.as_joint()
        pred = predict(est.model, joint)
        x_filt, P_filt = update(est.model, pred, curr.z_x)
        st.estimate, st.prediction, st.x_filt, st.P_filt = joint, pred, x_filt, P_filt
        return AreaStepResult(
            area_id=est.area_id, local=local, fused=fused, x_filt=x_filt, P_filt=P_filt,
            innovation=inn,
            detection=detect(inn.d_M, inn.dof, alpha) if inn is not None and inn.dof >= 1 else None,
            gates=gates, excluded=tuple(excluded), degraded=degraded,
        )

    results = list(mapper(finish, estimators))
    return {r.area_id: r for r in results}


def local_frame(frame: MeasurementFrame, layout: MeasurementLayout, local: MeasurementLayout) -> MeasurementFrame:
    """Project a frame recorded under ``layout`` onto the sensors of ``local``."""
    bi = [list(layout.metered_branches).index(b) for b in local.metered_branches]
    vi = [list(layout.metered_buses).index(b) for b in local.metered_buses]
    return MeasurementFrame(
        k=frame.k,
        z_x=frame.z_x[pair_indices(bi)] if bi else np.zeros(0),
        z_u=frame.z_u[pair_indices(vi)] if vi else np.zeros(0),
        t=frame.t,
    )
