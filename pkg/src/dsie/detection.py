"""Bad-data detection and false-data-injection attacks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.stats import chi2

from .errors import AttackError, ConfigurationError
from .estimation import (
    JointEstimate,
    MeasurementFrame,
    RegressionSystem,
    block_diag,
    chol,
    static_wls,
    symmetrize,
)
from .network import MeasurementLayout, NetworkTopology, pair_indices, realify, stack_phasors

CLEAN = "clean"
BAD_DATA = "bad_data"


@dataclass(frozen=True)
class Innovation:
    y: np.ndarray
    S: np.ndarray

    @property
    def dof(self) -> int:
        return self.y.size

    def distance(self) -> float:
        return mahalanobis(self.y, self.S)


@dataclass(frozen=True)
class DetectionReport:
    d_M: float
    threshold: float
    dof: int
    flag: str

    @property
    def bad(self) -> bool:
        return self.flag == BAD_DATA


def innovation(sys: RegressionSystem, prior: JointEstimate) -> Innovation:
    """Measurements minus their prediction from an independent prior.

    ``S = O P O^T + R_w`` assumes the prior error is independent of the
    measurement noise in ``sys``.
    """
    theta = prior.theta
    if theta.size != sys.O.shape[1] or prior.P.shape != (theta.size, theta.size):
        raise ValueError("prior dimension does not match the regressor")
    y = sys.rhs - sys.O @ theta
    S = symmetrize(sys.O @ prior.P @ sys.O.T + sys.R_w)
    return Innovation(y=y, S=S)


def regression_residual(sys: RegressionSystem, est: JointEstimate) -> tuple[np.ndarray, float, int]:
    """Post-fit residual of the batch regression and its normalised size.

    ``est`` must be the WLS solution of ``sys`` itself. The residual then has
    covariance ``R_w - O P O^T`` and ``r^T R_w^-1 r`` is chi-square with
    ``rows - cols`` degrees of freedom, so the returned distance is
    calibrated against that many dof.
    """
    r = sys.rhs - sys.O @ est.theta
    cf = chol(sys.R_w, "regression weight")
    d2 = float(r @ cho_solve(cf, r))
    return r, float(np.sqrt(max(d2, 0.0))), sys.O.shape[0] - sys.O.shape[1]


@dataclass(frozen=True)
class InnovationTest:
    """Innovation ``y`` with covariance ``S``, and its distance after nuisance removal."""

    y: np.ndarray
    S: np.ndarray
    d_M: float
    dof: int


def common_mode_columns(n_u: int) -> np.ndarray:
    """``2m x 2`` basis of equal d- and q-offsets on every bus."""
    M = np.zeros((n_u, 2))
    M[0::2, 0] = 1.0
    M[1::2, 1] = 1.0
    return M


def prediction_innovation(model, prior: JointEstimate, prev: MeasurementFrame, curr_zx,
                          free_common_mode: bool = True) -> InnovationTest:
    """Consistency of a new frame pair with the one-step prediction of ``prior``.

    ``prior`` is the joint estimate of ``(x, u)`` at step ``k-2``. It is
    propagated to ``[A x + B u; u]`` (inputs held) and compared with the
    measurements it has not used yet, ``[z_u,k-1; z_x,k]``; ``z_x,k-1`` was
    already part of the regression that produced ``prior`` and is left out
    so the innovation stays independent of the prior error.

    The network is blind to a common voltage offset (``B 1 = 0``), so with
    ``free_common_mode`` that offset is fitted out instead of forecast and
    the distance has two fewer degrees of freedom.
    """
    n_x, n_u = model.n_x, model.n_u
    G = np.block([[model.A, model.B], [np.zeros((n_u, n_x)), np.eye(n_u)]])
    theta = G @ prior.theta
    P = symmetrize(G @ prior.P @ G.T + block_diag(model.Q, np.zeros((n_u, n_u))))
    O2 = np.block([
        [np.zeros((model.l, n_x)), model.D],
        [model.C @ model.A, model.C @ model.B],
    ])
    E_x = model.C @ model.Q @ model.C.T + model.R_x
    rhs = np.concatenate([prev.z_u, np.asarray(curr_zx, dtype=float)])
    y = rhs - O2 @ theta
    S = symmetrize(O2 @ P @ O2.T + block_diag(model.R_u, E_x))
    cf = chol(S, "prediction innovation covariance")
    Siy = cho_solve(cf, y)
    d2 = float(y @ Siy)
    dof = y.size
    if free_common_mode and model.l > 0:
        E = O2[:, n_x:] @ common_mode_columns(n_u)
        SiE = cho_solve(cf, E)
        F = E.T @ SiE
        r = np.linalg.matrix_rank(F)
        if r:
            g = E.T @ Siy
            d2 -= float(g @ np.linalg.lstsq(F, g, rcond=None)[0])
            dof -= r
    return InnovationTest(y=y, S=S, d_M=float(np.sqrt(max(d2, 0.0))), dof=int(dof))


def residual_static(z, H, W, x_hat=None) -> np.ndarray:
    """Static residual ``(I - M) z`` with ``M = H (H^T W H)^-1 H^T W``.

    ``x_hat`` may be passed when the WLS solution is already known.
    """
    z = np.asarray(z, dtype=float)
    if x_hat is None:
        x_hat, _ = static_wls(H, W, z)
    return z - H @ x_hat


def weighted_norm(r, W) -> float:
    r = np.asarray(r, dtype=float)
    return float(np.sqrt(max(r @ np.asarray(W) @ r, 0.0)))


def mahalanobis(y, S) -> float:
    """``sqrt(y^T S^-1 y)`` through a Cholesky solve."""
    y = np.asarray(y, dtype=float)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if y.size == 0:
        return 0.0
    cf = chol(S, "innovation covariance")
    return float(np.sqrt(max(y @ cho_solve(cf, y), 0.0)))


def chi2_threshold(dof: int, alpha: float = 0.01) -> float:
    """Distance threshold: ``sqrt`` of the ``1 - alpha`` chi-square quantile."""
    return float(np.sqrt(chi2.ppf(1.0 - alpha, dof)))


def detect(d_M: float, dof: int, alpha: float = 0.01) -> DetectionReport:
    if dof < 1:
        raise ValueError("detection needs at least one degree of freedom")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    thr = chi2_threshold(dof, alpha)
    return DetectionReport(d_M=float(d_M), threshold=thr, dof=int(dof),
                           flag=BAD_DATA if d_M > thr else CLEAN)


# ---------------------------------------------------------------------------
# attacks


@dataclass(frozen=True)
class AttackSpec:
    """Bias ``x_b`` (complex volts) on ``target_buses`` over steps ``window`` (inclusive).

    ``end_step = None`` keeps the attack on until the end of the run.
    """

    target_buses: tuple
    x_b: np.ndarray
    window: tuple[int, int | None]
    bias_voltage_sensors: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_buses", tuple(self.target_buses))
        object.__setattr__(self, "x_b", np.asarray(self.x_b, dtype=complex).ravel())
        if self.x_b.size != len(self.target_buses):
            raise ConfigurationError("one complex bias per target bus is required")

    def active(self, k: int) -> bool:
        start, end = self.window
        return k >= start and (end is None or k <= end)


@dataclass(frozen=True)
class FdiaVector:
    """Attack in measurement space.

    ``a`` holds one complex value per attacked branch current (``a = H x_b``);
    ``voltage_bias`` maps metered target buses to the bias added to their
    voltage reading so the whole frame stays consistent with ``H``.
    """

    branch_ids: tuple
    a: np.ndarray
    H: np.ndarray
    voltage_bias: dict = field(default_factory=dict)


def build_fdia(spec: AttackSpec, topology: NetworkTopology, layout: MeasurementLayout | None = None) -> FdiaVector:
    """Attacker's quasi-static construction ``a = H x_b``.

    Rows of ``H`` are the metered branches whose two ends are both targets,
    each carrying ``+1/Z`` at its from-bus and ``-1/Z`` at its to-bus.
    """
    metered = topology.branch_ids if layout is None else list(layout.metered_branches)
    targets = list(spec.target_buses)
    for b in targets:
        topology.bus_index(b)
    col = {b: i for i, b in enumerate(targets)}
    rows, ids = [], []
    for bid in topology.branch_ids:
        if bid not in metered:
            continue
        br = topology.branch(bid)
        if br.from_bus in col and br.to_bus in col:
            y = 1.0 / topology.impedance(bid)
            row = np.zeros(len(targets), dtype=complex)
            row[col[br.from_bus]] = y
            row[col[br.to_bus]] = -y
            rows.append(row)
            ids.append(bid)
    H = np.array(rows, dtype=complex).reshape(len(rows), len(targets))
    touched = set(np.flatnonzero(np.any(H != 0, axis=0))) if rows else set()
    orphan = [b for i, b in enumerate(targets) if i not in touched]
    if orphan:
        raise AttackError(f"no metered branch between target buses covers {orphan}")
    a = H @ spec.x_b
    vbias = {}
    if spec.bias_voltage_sensors and layout is not None:
        vbias = {b: complex(spec.x_b[col[b]]) for b in layout.metered_buses if b in col}
    return FdiaVector(branch_ids=tuple(ids), a=a, H=H, voltage_bias=vbias)


def attack_offsets(fdia: FdiaVector, layout: MeasurementLayout) -> tuple[np.ndarray, np.ndarray]:
    """Real-stacked additive offsets for ``z_x`` and ``z_u`` under ``layout``."""
    dx = np.zeros(2 * len(layout.metered_branches))
    du = np.zeros(2 * len(layout.metered_buses))
    br = list(layout.metered_branches)
    for bid, val in zip(fdia.branch_ids, fdia.a):
        if bid not in br:
            raise AttackError(f"attacked branch {bid!r} is not metered")
        dx[pair_indices([br.index(bid)])] += stack_phasors([val])
    bu = list(layout.metered_buses)
    for bus, val in fdia.voltage_bias.items():
        du[pair_indices([bu.index(bus)])] += stack_phasors([val])
    return dx, du


def inject(frames: Sequence[MeasurementFrame], fdia: FdiaVector, layout: MeasurementLayout,
           window: tuple[int, int | None]) -> list[MeasurementFrame]:
    """Return a corrupted copy of ``frames``; frames outside ``window`` are passed through."""
    start, end = window
    if end is not None and end < start:
        return list(frames)
    ks = [f.k for f in frames]
    if ks and (start > ks[-1] or (end is not None and end < ks[0])):
        raise AttackError(f"attack window {window} lies outside the run {ks[0]}..{ks[-1]}")
    dx, du = attack_offsets(fdia, layout)
    out = []
    for f in frames:
        if f.k >= start and (end is None or f.k <= end):
            out.append(replace(f, z_x=f.z_x + dx, z_u=f.z_u + du))
        else:
            out.append(f)
    return out


def attack_matrix_real(fdia: FdiaVector) -> np.ndarray:
    return realify(fdia.H)
