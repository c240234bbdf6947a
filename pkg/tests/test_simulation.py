import numpy as np
import pytest

from dsie.csvio import read_table
from dsie.errors import ConfigurationError
from dsie.network import build_discrete_model, stack_phasors, unstack_phasors
from dsie.simulation import (
    POTSDAM_LENGTHS_FT,
    Scenario,
    VoltageEvent,
    VoltageSegment,
    generate_measurements,
    potsdam_scenario,
    simulate_truth,
    steady_state_currents,
    write_measurements_csv,
    write_truth_csv,
)
from dsie.units import Bases, NoiseSpec


def flat(topo, v, duration=0.5, dt=0.01, events=()):
    return Scenario(duration=duration, dt=dt, events=events,
                    profiles={b: (VoltageSegment(0.0, z.real, z.imag),) for b, z in zip(topo.bus_ids, v)})


def test_constant_voltages_hold_steady_state(two_branch):
    topo, layout = two_branch
    m = build_discrete_model(topo, layout, 0.01)
    truth = simulate_truth(m, flat(topo, [13.2e3, 13.1e3 + 20j, 13.0e3 - 5j]))
    assert np.abs(truth.x - truth.x[0]).max() <= 1e-9 * np.abs(truth.x).max()


def test_equalised_branch_decays(one_branch):
    topo, layout = one_branch
    m = build_discrete_model(topo, layout, 0.01)
    ev = VoltageEvent(0.1, (2,), (13.2e3,))
    truth = simulate_truth(m, flat(topo, [13.2e3, 13.0e3], events=(ev,)))
    br = topo.branches[0]
    i = np.abs(unstack_phasors(truth.x)[:, 0])
    s = 10
    # the new input acts from step s on, so the first changed sample is s + 1
    k = np.arange(s + 1, truth.n_steps)
    np.testing.assert_allclose(i[k], i[s] * np.exp(-br.r / br.l * (k - s) * 0.01), rtol=1e-9)


def test_step_response_first_order(one_branch):
    topo, layout = one_branch
    m = build_discrete_model(topo, layout, 0.01)
    v0 = np.array([13.2e3, 13.0e3])
    v1 = np.array([13.2e3, 12.7e3 + 100j])
    ev = VoltageEvent(0.2, (1, 2), tuple(v1))
    truth = simulate_truth(m, flat(topo, v0, events=(ev,)))
    z = topo.impedance("1-2")
    i_old, i_new = (v0[0] - v0[1]) / z, (v1[0] - v1[1]) / z
    a = np.exp(-(topo.branches[0].r / topo.branches[0].l + 1j * topo.omega) * 0.01)
    i = unstack_phasors(truth.x)[:, 0]
    s = 20
    k = np.arange(s, truth.n_steps)
    np.testing.assert_allclose(i[k], i_new + (i_old - i_new) * a ** (k - s), rtol=1e-9)


def test_substepping_agrees(two_branch):
    topo, layout = two_branch
    v0 = [13.2e3, 13.1e3, 12.95e3 + 30j]
    ev = (VoltageEvent(0.1, (2,), (13.15e3 - 10j,)), VoltageEvent(0.25, (1, 3), (13.3e3, 13.0e3)))
    coarse = simulate_truth(build_discrete_model(topo, layout, 0.01), flat(topo, v0, 0.4, 0.01, ev))
    fine = simulate_truth(build_discrete_model(topo, layout, 0.001), flat(topo, v0, 0.4, 0.001, ev))
    np.testing.assert_allclose(fine.x[::10], coarse.x, atol=1e-8 * np.abs(coarse.x).max())


def test_zero_input_dissipates(two_branch):
    topo, layout = two_branch
    m = build_discrete_model(topo, layout, 0.01)
    x = np.random.default_rng(0).normal(size=m.n_x) * 100
    norms = []
    for _ in range(50):
        norms.append(np.linalg.norm(x))
        x = m.A @ x
    assert np.all(np.diff(norms) < 0)


def test_noiseless_measurements_are_projections(potsdam):
    topo, layout, _, scen = potsdam
    m = build_discrete_model(topo, layout, scen.dt)
    truth = simulate_truth(m, scen)
    frames = generate_measurements(truth, layout, NoiseSpec(0.0, 0.0, 0.0))
    for k in (0, 37, 99):
        np.testing.assert_array_equal(frames[k].z_x, m.C @ truth.x[k])
        np.testing.assert_array_equal(frames[k].z_u, m.D @ truth.u[k])
        assert frames[k].t == pytest.approx(truth.t[k])


def test_measurement_stream_deterministic(potsdam):
    topo, layout, _, scen = potsdam
    m = build_discrete_model(topo, layout, scen.dt)
    noise = NoiseSpec(seed=42)
    runs = []
    for _ in range(2):
        truth = simulate_truth(m, scen, noise)
        runs.append((truth.x, [f.z_x for f in generate_measurements(truth, layout, noise)]))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    np.testing.assert_array_equal(np.array(runs[0][1]), np.array(runs[1][1]))
    other = generate_measurements(simulate_truth(m, scen, NoiseSpec(seed=43)), layout, NoiseSpec(seed=43))
    assert not np.array_equal(other[5].z_x, runs[0][1][5])


def test_measurement_variance(one_branch):
    topo, layout = one_branch
    m = build_discrete_model(topo, layout, 0.01)
    noise = NoiseSpec(seed=3)
    truth = simulate_truth(m, flat(topo, [13.2e3, 13.1e3], duration=500.0))
    frames = generate_measurements(truth, layout, noise)
    ex = np.array([f.z_x for f in frames]) - truth.x
    eu = np.array([f.z_u for f in frames]) - truth.u
    b = Bases()
    # 5e4 steps x 2 components = 1e5 samples per stream
    assert np.var(ex[:, :2]) == pytest.approx(noise.current_variance(b), rel=0.03)
    assert np.var(eu[:, :2]) == pytest.approx(noise.voltage_variance(b), rel=0.03)


def test_process_noise_variance(one_branch):
    topo, layout = one_branch
    m = build_discrete_model(topo, layout, 0.01)
    truth = simulate_truth(m, flat(topo, [13.2e3, 13.1e3], duration=500.0), NoiseSpec(seed=8))
    assert np.var(truth.w) == pytest.approx(NoiseSpec().process_variance(Bases()), rel=0.03)
    np.testing.assert_allclose(truth.x[1:], truth.x[:-1] @ m.A.T + truth.u[:-1] @ m.B.T + truth.w,
                               atol=1e-9 * np.abs(truth.x).max())


def test_scenario_validation(one_branch):
    topo, _ = one_branch
    prof = {1: (VoltageSegment(0.0, 1.0, 0.0),), 2: (VoltageSegment(0.0, 1.0, 0.0),)}
    with pytest.raises(ConfigurationError):
        Scenario(duration=1.0, dt=0.0, profiles=prof)
    with pytest.raises(ConfigurationError):
        Scenario(duration=1.0, dt=0.01, profiles=prof, events=(VoltageEvent(0.005, (1,), (1.0,)),))
    with pytest.raises(ConfigurationError):
        Scenario(duration=1.0, dt=0.01, profiles={1: (VoltageSegment(0.5, 1.0, 0.0),)})
    with pytest.raises(ConfigurationError):
        Scenario(duration=1.0, dt=0.01, profiles=prof).voltages([1, 2, 3])
    with pytest.raises(ConfigurationError):
        VoltageEvent(0.1, (1, 2), (1.0,))


def test_ramps_and_change_points():
    prof = {1: (VoltageSegment(0.0, 100.0, 0.0, ramp_d=10.0), VoltageSegment(0.5, 50.0, 1.0))}
    sc = Scenario(duration=1.0, dt=0.1, profiles=prof, events=(VoltageEvent(0.8, (1,), (7.0,)),))
    assert sc.voltage(1, 0.2) == pytest.approx(102.0)
    assert sc.voltage(1, 0.6) == pytest.approx(50 + 1j)
    assert sc.voltage(1, 0.9) == pytest.approx(7.0)
    assert sc.n_steps == 10 and sc.event_steps() == [8]


def test_potsdam_preset_shape(potsdam):
    topo, layout, part, scen = potsdam
    assert topo.n_branches == 13 and topo.n_buses == 13
    assert set(topo.branch_ids) == set(POTSDAM_LENGTHS_FT)
    assert topo.branch("13-2").from_bus == 13
    assert scen.dt == 0.01 and scen.n_steps == 100
    assert scen.step_of(1.25) == 50
    assert scen.event_steps() == list(range(5, 100, 10))
    assert len(part.areas) == 4
    # voltage levels stay near nominal and currents remain physical
    v = scen.voltages(topo.bus_ids)
    assert np.abs(v).min() > 0.85 * 13.2e3 and np.abs(v).max() < 1.15 * 13.2e3
    assert np.abs(steady_state_currents(topo, v[0])).max() < 1e3


def test_potsdam_scenario_is_repeatable():
    a, b = potsdam_scenario(), potsdam_scenario()
    np.testing.assert_array_equal(a.voltages(range(1, 14)), b.voltages(range(1, 14)))


def test_csv_outputs(tmp_path, one_branch):
    topo, layout = one_branch
    m = build_discrete_model(topo, layout, 0.01)
    truth = simulate_truth(m, flat(topo, [13.2e3, 13.1e3 + 1j], duration=0.05))
    frames = generate_measurements(truth, layout, NoiseSpec(seed=1))
    p = write_truth_csv(tmp_path / "t.csv", truth)
    meta, header, rows = read_table(p)
    assert meta == {"schema": "dsie-csv/1", "table": "truth"}
    assert header[:4] == ["step", "time_s", "i_1-2_d", "i_1-2_q"] and len(rows) == 5
    assert float(rows[2][2]) == truth.x[2, 0]
    p = write_measurements_csv(tmp_path / "m.csv", frames, layout)
    meta, header, rows = read_table(p)
    assert header[-2:] == ["zv_2_d", "zv_2_q"] and float(rows[4][-1]) == frames[4].z_u[-1]
    q = write_measurements_csv(tmp_path / "m2.csv", frames, layout)
    assert p.read_bytes() == q.read_bytes()


def test_steady_state_currents(one_branch):
    topo, _ = one_branch
    v = np.array([13.2e3, 13.0e3 + 50j])
    i = steady_state_currents(topo, v)
    assert i[0] == pytest.approx((v[0] - v[1]) / topo.impedance("1-2"))
    assert stack_phasors(i).shape == (2,)
