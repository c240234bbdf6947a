import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsie.distributed import (
    AreaEstimator,
    MessageChannel,
    SharedInputMessage,
    assimilate,
    assimilation_residual,
    assimilation_system,
    build_area_estimators,
    distributed_step,
    extract_shared,
    local_frame,
    message_gate,
)
from dsie.errors import SynchronizationError
from dsie.estimation import FilterState, JointEstimate, MeasurementFrame, dsie_step
from dsie.network import build_discrete_model, partition, stack_phasors
from dsie.simulation import steady_state_currents


def scalar_local(u=1.0, var=1.0, k=0):
    return JointEstimate(k, np.zeros(1), np.array([u]), np.diag([1.0, var]))


def msg(u, var, frm="j", k=0):
    return SharedInputMessage(frm, "i", k, np.array([u]), np.array([[var]]))


T1 = {"j": np.eye(1), "h": np.eye(1)}


# ---------------------------------------------------------------------------
# messages and fusion


def test_extract_single_coordinate():
    P = np.diag([1.0, 2.0, 3.0, 4.0, 5.0])
    est = JointEstimate(3, np.zeros(1), np.arange(4.0), P)
    T = np.zeros((1, 4))
    T[0, 3] = 1
    m = extract_shared(est, T, "a", "b")
    assert m.u_shared.tolist() == [3.0] and m.P_shared.tolist() == [[5.0]] and m.k == 3


def test_extract_identity_and_cross_terms():
    P = np.eye(3)
    P[1, 2] = P[2, 1] = 0.3
    est = JointEstimate(0, np.zeros(1), np.array([1.0, 2.0]), P)
    m = extract_shared(est, np.eye(2))
    np.testing.assert_array_equal(m.u_shared, [1.0, 2.0])
    assert m.P_shared[0, 1] == m.P_shared[1, 0] == 0.3
    with pytest.raises(IndexError):
        extract_shared(est, np.eye(3))


def test_message_json_round_trip():
    m = SharedInputMessage(1, 4, 17, np.array([1.5, -2.25e3]), np.array([[2.0, 0.1], [0.1, 3.0]]))
    back = SharedInputMessage.from_json(m.to_json())
    assert (back.from_area, back.to_area, back.k) == (1, 4, 17)
    np.testing.assert_array_equal(back.u_shared, m.u_shared)
    np.testing.assert_array_equal(back.P_shared, m.P_shared)
    with pytest.raises(ValueError):
        SharedInputMessage.from_json('{"schema": "other"}')


def test_assimilate_no_messages():
    loc = scalar_local()
    f = assimilate(loc, [], T1)
    np.testing.assert_array_equal(f.P_f, loc.P)
    np.testing.assert_array_equal(f.u_f, loc.u_hat)


def test_assimilate_symmetric_fusion():
    f = assimilate(scalar_local(1.0, 1.0), [msg(3.0, 1.0)], T1)
    assert f.u_f[0] == pytest.approx(2.0)
    assert f.P_f[1, 1] == pytest.approx(0.5)
    y, _ = assimilation_residual(scalar_local(1.0, 1.0), [msg(3.0, 1.0)], f, T1)
    np.testing.assert_allclose(y[1:], [-1.0, 1.0])


def test_assimilate_uninformative_neighbor():
    f = assimilate(scalar_local(1.0, 1.0), [msg(3.0, 1e12)], T1)
    assert f.u_f[0] == pytest.approx(1.0, abs=1e-9)


def test_assimilation_residual_consistent():
    f = assimilate(scalar_local(2.0), [msg(2.0, 0.5)], T1)
    y, _ = assimilation_residual(scalar_local(2.0), [msg(2.0, 0.5)], f, T1)
    np.testing.assert_allclose(y, 0, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_assimilation_normal_equations(seed):
    rng = np.random.default_rng(seed)
    n_x, n_u = 2, 4
    G = rng.normal(size=(n_x + n_u, n_x + n_u))
    loc = JointEstimate(0, rng.normal(size=n_x), rng.normal(size=n_u), G @ G.T + np.eye(n_x + n_u))
    sel = {"j": np.eye(n_u)[[0, 1]], "h": np.eye(n_u)[[2, 3]]}
    msgs = []
    for frm in ("j", "h"):
        H = rng.normal(size=(2, 2))
        msgs.append(SharedInputMessage(frm, "i", 0, rng.normal(size=2), H @ H.T + np.eye(2)))
    f = assimilate(loc, msgs, sel)
    sys = assimilation_system(loc, msgs, sel)
    y, _ = assimilation_residual(loc, msgs, f, sel)
    g = sys.O.T @ np.linalg.solve(sys.R_w, y)
    assert np.abs(g).max() <= 1e-9 * max(1.0, np.abs(sys.O.T @ np.linalg.solve(sys.R_w, sys.rhs)).max())
    # fusion never inflates uncertainty, and message order does not matter
    assert np.all(np.diag(f.P_f) <= np.diag(loc.P) + 1e-12)
    f2 = assimilate(loc, msgs[::-1], sel)
    np.testing.assert_allclose(f2.u_f, f.u_f, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(f2.P_f, f.P_f, rtol=1e-10, atol=1e-12)


def test_assimilate_rejects_stale_message():
    with pytest.raises(SynchronizationError):
        assimilate(scalar_local(k=3), [msg(1.0, 1.0, k=2)], T1)


@given(st.floats(0.0, 50.0), st.floats(0.0, 50.0))
@settings(max_examples=40, deadline=None)
def test_gate_monotone_in_bias(b1, b2):
    lo, hi = sorted((b1, b2))
    loc = scalar_local(1.0, 1.0)
    d_lo = message_gate(loc, msg(1.2 + lo, 1.0), np.eye(1)).d_M
    d_hi = message_gate(loc, msg(1.2 + hi, 1.0), np.eye(1)).d_M
    assert d_hi >= d_lo - 1e-12


def test_gate_rejects_ten_sigma():
    loc = scalar_local(1.0, 1.0)
    sigma = np.sqrt(2.0)
    assert message_gate(loc, msg(1.0 + 10 * sigma, 1.0), np.eye(1)).bad
    assert not message_gate(loc, msg(1.0 + 0.5 * sigma, 1.0), np.eye(1)).bad


# ---------------------------------------------------------------------------
# the exchange loop


def frames_for(model, N, rng=None, v=None, topo=None, noisy=True):
    topo = topo or model.topology
    v = np.array([13.2e3 - 40.0 * i + 3j * i for i in range(topo.n_buses)]) if v is None else v
    u = stack_phasors(v)
    x = stack_phasors(steady_state_currents(topo, v))
    out = []
    for k in range(N):
        ex = np.sqrt(np.diag(model.R_x)) * rng.standard_normal(model.p) if noisy else 0.0
        eu = np.sqrt(np.diag(model.R_u)) * rng.standard_normal(model.l) if noisy else 0.0
        out.append(MeasurementFrame(k, model.C @ x + ex, model.D @ u + eu))
        if noisy:
            x = model.A @ x + model.B @ u + np.sqrt(model.Q[0, 0]) * rng.standard_normal(model.n_x)
        else:
            x = model.A @ x + model.B @ u
    return out, u


def two_areas(topo, layout):
    part, models = partition(topo, layout, {"a": ["1-2"], "b": ["2-3"]}, dt=0.01)
    return part, models, build_area_estimators(part, models)


def test_one_area_matches_centralized(two_branch):
    topo, layout = two_branch
    central = build_discrete_model(topo, layout, 0.01)
    part, models = partition(topo, layout, {1: topo.branch_ids}, dt=0.01)
    est = build_area_estimators(part, models)
    fr, _ = frames_for(central, 30, np.random.default_rng(0))
    st_ = FilterState(central)
    for k in range(1, 30):
        ref = dsie_step(st_, fr[k - 1], fr[k])
        res = distributed_step(est, {1: (fr[k - 1], fr[k])})[1]
        np.testing.assert_allclose(res.fused.u_f, ref.estimate.u_hat, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(res.fused.x_f, ref.estimate.x_hat, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(res.x_filt, ref.x_filt, rtol=1e-10, atol=1e-10)
        assert not res.degraded and res.gates == {}


def test_noiseless_areas_agree_with_central(two_branch):
    topo, layout = two_branch
    central = build_discrete_model(topo, layout, 0.01)
    part, models, ests = two_areas(topo, layout)
    fr, u = frames_for(central, 6, noisy=False)
    st_ = FilterState(central)
    for k in range(1, 6):
        ref = dsie_step(st_, fr[k - 1], fr[k])
        loc = {a.id: [local_frame(f, layout, a.layout) for f in fr] for a in part.areas}
        res = distributed_step(ests, {a: (f[k - 1], f[k]) for a, f in loc.items()})
        for aid in ("a", "b"):
            i = list(part.area(aid).buses).index(2)
            np.testing.assert_allclose(res[aid].fused.u_f[2 * i: 2 * i + 2], ref.estimate.u_hat[2:4], rtol=1e-9)


def test_lost_message_marks_degraded(two_branch):
    topo, layout = two_branch
    part, models, ests = two_areas(topo, layout)
    central = build_discrete_model(topo, layout, 0.01)
    fr, _ = frames_for(central, 2, np.random.default_rng(1))
    loc = {a.id: [local_frame(f, layout, a.layout) for f in fr] for a in part.areas}
    ch = MessageChannel()
    ch.lost.add(("b", "a"))
    res = distributed_step(ests, {a: (f[0], f[1]) for a, f in loc.items()}, channel=ch)
    assert res["a"].degraded and not res["b"].degraded
    np.testing.assert_array_equal(res["a"].fused.u_f, res["a"].local.u_hat)


class BiasedChannel(MessageChannel):
    def __init__(self, source, sigmas):
        super().__init__()
        self.source, self.sigmas = source, sigmas

    def post(self, m):
        if m.from_area == self.source:
            m = SharedInputMessage(m.from_area, m.to_area, m.k,
                                   m.u_shared + self.sigmas * np.sqrt(2 * np.diag(m.P_shared)), m.P_shared)
        super().post(m)


def test_gate_excludes_corrupted_neighbor(two_branch):
    topo, layout = two_branch
    part, models, ests = two_areas(topo, layout)
    central = build_discrete_model(topo, layout, 0.01)
    fr, _ = frames_for(central, 2, np.random.default_rng(2))
    loc = {a.id: [local_frame(f, layout, a.layout) for f in fr] for a in part.areas}
    res = distributed_step(ests, {a: (f[0], f[1]) for a, f in loc.items()}, channel=BiasedChannel("b", 10.0))
    assert res["a"].excluded == ("b",) and res["a"].gates["b"].bad
    np.testing.assert_array_equal(res["a"].fused.u_f, res["a"].local.u_hat)
    assert res["b"].excluded == ()


def test_area_estimator_needs_consecutive_frames(one_branch):
    topo, layout = one_branch
    m = build_discrete_model(topo, layout, 0.01)
    ae = AreaEstimator.create(1, m)
    f = MeasurementFrame(0, np.zeros(2), np.zeros(4))
    with pytest.raises(SynchronizationError):
        ae.local_solve(f, MeasurementFrame(3, np.zeros(2), np.zeros(4)))


def test_parallel_executor_matches_serial(two_branch):
    from concurrent.futures import ThreadPoolExecutor

    topo, layout = two_branch
    central = build_discrete_model(topo, layout, 0.01)
    fr, _ = frames_for(central, 5, np.random.default_rng(3))
    out = []
    for pool in (None, ThreadPoolExecutor(2)):
        part, models, ests = two_areas(topo, layout)
        loc = {a.id: [local_frame(f, layout, a.layout) for f in fr] for a in part.areas}
        for k in range(1, 5):
            res = distributed_step(ests, {a: (f[k - 1], f[k]) for a, f in loc.items()}, executor=pool)
        out.append({a: r.fused.u_f for a, r in res.items()})
    for a in out[0]:
        np.testing.assert_array_equal(out[0][a], out[1][a])
