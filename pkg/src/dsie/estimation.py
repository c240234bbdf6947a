"""Joint state/input estimation: batch regression, Kalman recursion and baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from .errors import ConfigurationError, NumericalError, SynchronizationError, UnobservableError
from .network import (
    DiscreteModel,
    MeasurementLayout,
    NetworkTopology,
    ObservabilityReport,
    build_incidence,
    numerical_rank,
    pair_indices,
    realify,
    regressor,
)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def block_diag(*blocks) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def chol(S: np.ndarray, what: str = "covariance"):
    try:
        return cho_factor(symmetrize(S), lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise NumericalError(f"{what} is not symmetric positive definite") from exc


@dataclass(frozen=True)
class MeasurementFrame:
    k: int
    z_x: np.ndarray
    z_u: np.ndarray
    t: float = float("nan")

    def check(self, model: DiscreteModel) -> None:
        if self.z_x.shape != (model.p,) or self.z_u.shape != (model.l,):
            raise ValueError(
                f"frame {self.k}: expected z_x[{model.p}], z_u[{model.l}], "
                f"got {self.z_x.shape}, {self.z_u.shape}"
            )


@dataclass(frozen=True)
class RegressionSystem:
    O: np.ndarray
    R_w: np.ndarray
    rhs: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.O.shape[0]


@dataclass(frozen=True)
class JointEstimate:
    k: int
    x_hat: np.ndarray
    u_hat: np.ndarray
    P: np.ndarray

    @property
    def n_x(self) -> int:
        return self.x_hat.size

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.x_hat, self.u_hat])

    @property
    def P_x(self) -> np.ndarray:
        return self.P[: self.n_x, : self.n_x]

    @property
    def P_xu(self) -> np.ndarray:
        return self.P[: self.n_x, self.n_x:]

    @property
    def P_ux(self) -> np.ndarray:
        return self.P[self.n_x:, : self.n_x]

    @property
    def P_u(self) -> np.ndarray:
        return self.P[self.n_x:, self.n_x:]

    @classmethod
    def from_theta(cls, k, theta, P, n_x) -> "JointEstimate":
        return cls(k=k, x_hat=theta[:n_x].copy(), u_hat=theta[n_x:].copy(), P=P)


@dataclass(frozen=True)
class Prediction:
    k: int
    x_pred: np.ndarray
    P_pred: np.ndarray


@dataclass
class FilterState:
    """Mutable per-filter memory; owned by a single estimator."""

    model: DiscreteModel
    estimate: JointEstimate | None = None
    prediction: Prediction | None = None
    x_filt: np.ndarray | None = None
    P_filt: np.ndarray | None = None

    @property
    def k(self) -> int | None:
        return None if self.prediction is None else self.prediction.k


def assemble_regression(model: DiscreteModel, prev: MeasurementFrame, curr_zx: np.ndarray) -> RegressionSystem:
    """Two-step regression ``[z_x,k-1; z_u,k-1; z_x,k] = O [x_k-1; u_k-1] + noise``."""
    prev.check(model)
    curr_zx = np.asarray(curr_zx, dtype=float)
    if curr_zx.shape != (model.p,):
        raise ValueError(f"z_x,k has shape {curr_zx.shape}, expected ({model.p},)")
    E_x = model.C @ model.Q @ model.C.T + model.R_x
    return RegressionSystem(
        O=regressor(model),
        R_w=block_diag(model.R_x, model.R_u, E_x),
        rhs=np.concatenate([prev.z_x, prev.z_u, curr_zx]),
    )


def _whitened_qr(O, R_w, rhs):
    L, _ = chol(R_w, "regression weight")
    L = np.tril(L)
    Ow = solve_triangular(L, O, lower=True)
    bw = solve_triangular(L, rhs, lower=True)
    return Ow, bw


def weighted_least_squares(O, R_w, rhs) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(theta, P)`` minimising ``||rhs - O theta||`` in the ``R_w^-1`` norm.

    Works on the whitened system with a QR factorization; the normal
    matrix is never formed or inverted.
    """
    Ow, bw = _whitened_qr(O, R_w, rhs)
    ncol = O.shape[1]
    norms = np.linalg.norm(Ow, axis=0)
    norms[norms == 0] = 1.0
    rank = numerical_rank(Ow / norms)
    if rank < ncol:
        report = ObservabilityReport(rank=rank, required=ncol, n_rows=O.shape[0], observable=False)
        raise UnobservableError(f"regressor rank {rank} < {ncol}", report)
    Qf, Rf = np.linalg.qr(Ow, mode="reduced")
    theta = solve_triangular(Rf, Qf.T @ bw)
    Rinv = solve_triangular(Rf, np.eye(ncol))
    P = symmetrize(Rinv @ Rinv.T)
    return theta, P


def solve_batch_wls(sys: RegressionSystem, k: int = 0, n_x: int | None = None) -> JointEstimate:
    """Joint estimate of ``(x_k-1, u_k-1)`` and its full covariance.

    ``n_x`` splits the solution into state and input parts; by default the
    whole vector is reported as state.
    """
    theta, P = weighted_least_squares(sys.O, sys.R_w, sys.rhs)
    return JointEstimate.from_theta(k, theta, P, sys.O.shape[1] if n_x is None else n_x)


def predict(model: DiscreteModel, est: JointEstimate) -> Prediction:
    """Propagate the joint estimate through ``[A B]`` with the full joint covariance."""
    AB = np.hstack([model.A, model.B])
    x_pred = model.A @ est.x_hat + model.B @ est.u_hat
    P_pred = symmetrize(AB @ est.P @ AB.T + model.Q)
    return Prediction(k=est.k + 1, x_pred=x_pred, P_pred=P_pred)


def update(model: DiscreteModel, pred: Prediction, z_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kalman measurement update with the branch-current measurements."""
    C = model.C
    if C.shape[0] == 0:
        return pred.x_pred.copy(), pred.P_pred.copy()
    S = C @ pred.P_pred @ C.T + model.R_x
    cf = chol(S, "innovation covariance")
    K = cho_solve(cf, C @ pred.P_pred).T
    x_hat = pred.x_pred + K @ (np.asarray(z_x) - C @ pred.x_pred)
    P = symmetrize((np.eye(model.n_x) - K @ C) @ pred.P_pred)
    return x_hat, P


def kalman_gain(model: DiscreteModel, pred: Prediction) -> np.ndarray:
    S = model.C @ pred.P_pred @ model.C.T + model.R_x
    return cho_solve(chol(S, "innovation covariance"), model.C @ pred.P_pred).T


@dataclass(frozen=True)
class DsieStep:
    estimate: JointEstimate
    system: RegressionSystem
    prediction: Prediction
    x_filt: np.ndarray
    P_filt: np.ndarray


def dsie_step(state: FilterState, prev_frame: MeasurementFrame, curr_frame: MeasurementFrame) -> DsieStep:
    """One pass of the centralized loop: batch solve, predict, update.

    The joint estimate returned refers to step ``k-1`` (inputs are only
    observable with one step of delay); the filtered state refers to ``k``.
    ``state`` is updated in place.
    """
    if curr_frame.k != prev_frame.k + 1:
        raise SynchronizationError(f"frames {prev_frame.k} and {curr_frame.k} are not consecutive")
    model = state.model
    curr_frame.check(model)
    sys = assemble_regression(model, prev_frame, curr_frame.z_x)
    est = solve_batch_wls(sys, k=prev_frame.k, n_x=model.n_x)
    return propagate_and_update(state, sys, est, curr_frame)


def propagate_and_update(state: FilterState, sys: RegressionSystem, est: JointEstimate,
                         curr_frame: MeasurementFrame) -> DsieStep:
    """Predict from ``est`` and update with ``z_x,k``; records everything on ``state``."""
    pred = predict(state.model, est)
    x_filt, P_filt = update(state.model, pred, curr_frame.z_x)
    state.estimate = est
    state.prediction = pred
    state.x_filt, state.P_filt = x_filt, P_filt
    return DsieStep(estimate=est, system=sys, prediction=pred, x_filt=x_filt, P_filt=P_filt)


# ---------------------------------------------------------------------------
# quasi-static baselines


def quasi_static_matrix(topology: NetworkTopology, layout: MeasurementLayout) -> np.ndarray:
    """Static map from bus voltages to ``[z_x; z_u]``.

    A metered branch current is ``(v_from - v_to) / (R + j w L)``; a metered
    voltage is read directly. Rows are real-stacked in frame order.
    """
    inc = build_incidence(topology).astype(complex)
    z = np.array([complex(br.r, topology.omega * br.l) for br in topology.branches])
    Y = inc / z[:, None]
    br_idx = [topology.branch_index(b) for b in layout.metered_branches]
    bu_idx = [topology.bus_index(b) for b in layout.metered_buses]
    Hx = realify(Y[br_idx]) if br_idx else np.zeros((0, 2 * topology.n_buses))
    Hu = np.eye(2 * topology.n_buses)[pair_indices(bu_idx)] if bu_idx else np.zeros((0, 2 * topology.n_buses))
    return np.vstack([Hx, Hu])


def static_wls_baseline(H_qs: np.ndarray, W: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Static WLS ``(H^T W H)^-1 H^T W z``; ``W`` is the weight (inverse covariance)."""
    x_hat, _ = static_wls(H_qs, W, z)
    return x_hat


def static_wls(H: np.ndarray, W: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Static WLS estimate and covariance ``(H^T W H)^-1`` via a whitened QR."""
    W = symmetrize(np.asarray(W, dtype=float))
    try:
        Lw = np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("WLS weight is not SPD") from exc
    Hw = Lw.T @ H
    zw = Lw.T @ z
    ncol = H.shape[1]
    norms = np.linalg.norm(Hw, axis=0)
    norms[norms == 0] = 1.0
    rank = numerical_rank(Hw / norms)
    if rank < ncol:
        raise UnobservableError(
            f"quasi-static model rank {rank} < {ncol}",
            ObservabilityReport(rank=rank, required=ncol, n_rows=H.shape[0], observable=False),
        )
    Qf, Rf = np.linalg.qr(Hw, mode="reduced")
    x_hat = solve_triangular(Rf, Qf.T @ zw)
    Rinv = solve_triangular(Rf, np.eye(ncol))
    return x_hat, symmetrize(Rinv @ Rinv.T)


@dataclass(frozen=True)
class QuasiStaticModel:
    """Quasi-static measurement model shared by the WLS and TSE baselines."""

    H: np.ndarray
    R: np.ndarray  # measurement covariance, frame order

    @property
    def W(self) -> np.ndarray:
        return np.linalg.inv(self.R)

    @classmethod
    def from_model(cls, model: DiscreteModel) -> "QuasiStaticModel":
        if model.topology is None or model.layout is None:
            raise ConfigurationError("discrete model carries no topology/layout")
        H = quasi_static_matrix(model.topology, model.layout)
        # process noise enters current readings the same way it does the batch regression
        E_x = model.C @ model.Q @ model.C.T + model.R_x
        return cls(H=H, R=block_diag(E_x, model.R_u))

    def stack(self, frame: MeasurementFrame) -> np.ndarray:
        return np.concatenate([frame.z_x, frame.z_u])


@dataclass
class TseState:
    qs: QuasiStaticModel
    q: float  # random-walk variance per real voltage component, V^2
    v_hat: np.ndarray | None = None
    P: np.ndarray | None = None
    k: int | None = None
    last_innovation: np.ndarray | None = field(default=None, repr=False)
    last_S: np.ndarray | None = field(default=None, repr=False)


def tse_step(state: TseState, frame: MeasurementFrame) -> np.ndarray:
    """Tracking estimator: ``v_k+1 = v_k + w`` with the quasi-static measurement model.

    The first frame initialises from static WLS. Innovation and its covariance
    are kept on the state for bad-data testing.
    """
    z = state.qs.stack(frame)
    H, R = state.qs.H, state.qs.R
    if state.v_hat is None:
        state.v_hat, state.P = static_wls(H, np.linalg.inv(R), z)
        state.k = frame.k
        state.last_innovation, state.last_S = None, None
        return state.v_hat.copy()
    if frame.k != state.k + 1:
        raise SynchronizationError(f"TSE expected frame {state.k + 1}, got {frame.k}")
    P_pred = state.P + state.q * np.eye(state.P.shape[0])
    nu = z - H @ state.v_hat
    S = symmetrize(H @ P_pred @ H.T + R)
    cf = chol(S, "TSE innovation covariance")
    K = cho_solve(cf, H @ P_pred).T
    state.v_hat = state.v_hat + K @ nu
    state.P = symmetrize((np.eye(P_pred.shape[0]) - K @ H) @ P_pred)
    state.k = frame.k
    state.last_innovation, state.last_S = nu, S
    return state.v_hat.copy()
