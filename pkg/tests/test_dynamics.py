import math

import numpy as np
import pytest

from mastrack.dynamics import (DIVERGENCE_LIMIT, CommSchedule, Mode, PlantModel, ProtocolSigns, Scenario,
                               SystemState, comm_mode, control_input, control_inputs, default_initial_state,
                               integrate_fixed, make_nonlinearity, observer_derivative, plant_derivative,
                               read_trace_csv, simulate, trace_header, write_trace_csv)
from mastrack.errors import ConfigError, DivergenceError, ScheduleError
from mastrack.graph import SwitchingSchedule, build_topology
from mastrack.scenarios import EXAMPLE_B, example_plant, example_topologies


def scalar_plant(a=-1.0, b=1.0, c=1.0):
    return PlantModel(np.array([[a]]), np.array([[b]]), np.array([[c]]), make_nonlinearity("zero", 1), 0.0)


class _Gains:
    def __init__(self, K):
        self.K = np.atleast_2d(K)


# -- schedule -------------------------------------------------------------------

def test_comm_mode_examples():
    two = CommSchedule(5.0, 3.5)
    assert comm_mode(two, 2.0) is Mode.COMM
    assert comm_mode(two, 3.5) is Mode.SILENT
    assert comm_mode(two, 5.0) is Mode.COMM
    three = CommSchedule(5.0, 4.0, 4.5, mode="three-mode")
    assert comm_mode(three, 4.2) is Mode.FOLLOWERS
    assert comm_mode(three, 4.5) is Mode.SILENT
    assert comm_mode(three, 3.99) is Mode.COMM


@pytest.mark.parametrize("kwargs", [dict(w=5.0, delta=5.0), dict(w=5.0, delta=0.0),
                                    dict(w=5.0, delta=4.0, h=3.0, mode="three-mode"),
                                    dict(w=5.0, delta=4.0, mode="three-mode"),
                                    dict(w=-1.0, delta=0.5)])
def test_schedule_invariants(kwargs):
    with pytest.raises(ScheduleError):
        CommSchedule(**kwargs)


def test_mode_partition_measure():
    step = 1e-3
    for sched in (CommSchedule(5.0, 3.5), CommSchedule(5.0, 4.0, 4.5, mode="three-mode"),
                  CommSchedule(2.0, (0.5, 1.5))):
        for k in range(3):
            ts = k * sched.w + step * np.arange(int(round(sched.w / step)))
            modes = [comm_mode(sched, t) for t in ts]
            assert sum(m is Mode.COMM for m in modes) * step == pytest.approx(sched.delta_at(k), abs=1e-9)
            if sched.three_mode:
                want = sched.h_at(k) - sched.delta_at(k)
                assert sum(m is Mode.FOLLOWERS for m in modes) * step == pytest.approx(want, abs=1e-9)


# -- protocol ---------------------------------------------------------------------

def _random_state(rng, N=4, n=4):
    return SystemState(rng.normal(size=n), rng.normal(size=(N, n)), rng.normal(size=(N, n)))


def test_silent_input_zero(rng):
    top = example_topologies()[0]
    st = _random_state(rng)
    g = _Gains(rng.normal(size=(1, 4)))
    for i in range(4):
        np.testing.assert_array_equal(control_input(i, st, g, top, Mode.SILENT), np.zeros(1))


def test_consensus_point_input_zero(rng):
    x0 = rng.normal(size=4)
    st = SystemState(x0, np.tile(x0, (4, 1)) + 1.0, np.tile(x0, (4, 1)))
    g = _Gains(rng.normal(size=(1, 4)))
    for top in example_topologies():
        for mode in Mode:
            for signs in (ProtocolSigns(), ProtocolSigns(1, -1)):
                u = control_inputs(st, g.K, top, mode, signs=signs)
                np.testing.assert_allclose(u, 0.0, atol=1e-12)


def test_vector_and_agent_inputs_agree(rng):
    g = _Gains(rng.normal(size=(1, 4)))
    for top in example_topologies():
        st = _random_state(rng)
        for mode in Mode:
            for signs in (ProtocolSigns(), ProtocolSigns(-1, -1), ProtocolSigns(1, -1)):
                U = control_inputs(st, g.K, top, mode, signs=signs)
                for i in range(4):
                    np.testing.assert_allclose(control_input(i, st, g, top, mode, signs=signs), U[i],
                                               atol=1e-12)


def test_input_formula(rng):
    top = build_topology([[0, 0], [1, 0]], [1, 0])
    K = np.array([[2.0, -1.0]])
    st = SystemState([1.0, 0.0], np.zeros((2, 2)), [[3.0, 1.0], [0.5, 2.0]])
    gamma = np.linalg.inv(top.pinned)
    # agent 1: leader term only; agent 2: one neighbor
    u1 = control_input(0, st, _Gains(K), top, Mode.COMM)
    np.testing.assert_allclose(u1, K @ (gamma[0, 0] * (st.estimates[0] - st.leader)))
    u2 = control_input(1, st, _Gains(K), top, Mode.COMM)
    np.testing.assert_allclose(u2, K @ (gamma[1, 1] * (st.estimates[0] - st.estimates[1])))
    # followers-only mode drops the leader term
    np.testing.assert_allclose(control_input(0, st, _Gains(K), top, Mode.FOLLOWERS), [0.0])


# -- derivatives --------------------------------------------------------------------

def test_plant_derivative_examples():
    zero = PlantModel(np.zeros((2, 2)), np.ones((2, 1)), np.eye(2), make_nonlinearity("zero", 2), 0.0)
    st = SystemState([1.0, 2.0], [[3.0, 4.0]], [[0.0, 0.0]])
    dx0, dx = plant_derivative(st, np.zeros((1, 1)), zero)
    np.testing.assert_array_equal(dx0, 0.0)
    np.testing.assert_array_equal(dx, 0.0)
    dx0, dx = plant_derivative(SystemState([2.0], [[2.0]], [[0.0]]), np.zeros((1, 1)), scalar_plant())
    assert dx[0, 0] == -2.0 and dx0[0] == -2.0


def test_example_plant_at_origin():
    plant = example_plant()
    u = np.array([[0.7], [-0.2]])
    st = SystemState(np.zeros(4), np.zeros((2, 4)), np.zeros((2, 4)))
    _, dx = plant_derivative(st, u, plant)
    np.testing.assert_allclose(dx, u @ EXAMPLE_B.T)


def test_observer_derivative_examples(rng):
    plant = example_plant()
    x = rng.normal(size=(3, 4))
    u = rng.normal(size=(3, 1))
    st = SystemState(np.zeros(4), x, x.copy())
    G = rng.normal(size=(4, 2))
    _, dx = plant_derivative(st, u, plant)
    np.testing.assert_allclose(observer_derivative(st, u, plant, G), dx)
    st2 = SystemState(np.zeros(4), x, rng.normal(size=(3, 4)))
    _, dxh = plant_derivative(SystemState(np.zeros(4), st2.estimates, st2.estimates), u, plant)
    np.testing.assert_allclose(observer_derivative(st2, u, plant, np.zeros((4, 2))), dxh)
    one = SystemState([0.0], [[0.0]], [[1.0]])
    assert observer_derivative(one, np.zeros((1, 1)), scalar_plant(), [[-2.0]])[0, 0] == pytest.approx(-3.0)


def test_nonlinearity_lipschitz():
    f = make_nonlinearity("sin_state3", 4, amplitude=3.33)
    assert f.lipschitz == pytest.approx(3.33)
    rng = np.random.default_rng(99)
    x = rng.normal(scale=5.0, size=(10_000, 4))
    y = rng.normal(scale=5.0, size=(10_000, 4))
    lhs = np.linalg.norm(f(x) - f(y), axis=1)
    rhs = 3.33 * np.linalg.norm(x - y, axis=1)
    assert np.all(lhs <= rhs + 1e-12)
    np.testing.assert_allclose(f(np.array([0.0, 0.0, math.pi / 2, 0.0])), [0, 0, 0, -3.33])


def test_unknown_nonlinearity():
    with pytest.raises(ConfigError):
        make_nonlinearity("cubic", 3)


# -- integrator -------------------------------------------------------------------

def test_rk4_exponential():
    y = integrate_fixed(lambda t, y: -y, np.array([1.0]), 0.0, 1.0, 0.01)
    assert abs(y[0] - math.exp(-1.0)) < 1e-8


def test_rk4_order():
    steps = [0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125]
    errs = [abs(integrate_fixed(lambda t, y: -y, np.array([1.0]), 0.0, 1.0, h)[0] - math.exp(-1.0))
            for h in steps]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.9)


def test_off_grid_span():
    with pytest.raises(ConfigError):
        integrate_fixed(lambda t, y: -y, np.array([1.0]), 0.0, 1.0, 0.3)


# -- simulation -------------------------------------------------------------------

def _example_scenario(K, G, horizon=10.0, comm=None, signs=ProtocolSigns(1, -1), seed=0, record_every=1,
                      step=1e-3):
    plant = example_plant()
    tops = example_topologies()
    comm = comm or CommSchedule(5.0, 3.5)
    sw = SwitchingSchedule.cyclic(tops, 5.0, horizon)
    init = default_initial_state(4, 4, np.random.default_rng(seed), [1.0, 0.0, 1.0, 0.0])
    return Scenario(plant, comm, sw, np.atleast_2d(K), np.atleast_2d(G), init, step=step, horizon=horizon,
                    signs=signs, record_every=record_every)


def test_constant_states_without_dynamics():
    plant = PlantModel(np.zeros((2, 2)), np.ones((2, 1)), np.eye(2), make_nonlinearity("zero", 2), 0.0)
    top = build_topology([[0, 0], [1, 0]], [1, 0])
    init = SystemState([1.0, -1.0], [[0.3, 0.2], [0.1, 0.0]], [[0.0, 0.5], [1.0, 1.0]])
    sc = Scenario(plant, CommSchedule(1.0, 0.5), SwitchingSchedule.cyclic([top], 1.0, 3.0),
                  np.zeros((1, 2)), np.zeros((2, 2)), init, step=0.01, horizon=3.0)
    tr = simulate(sc)
    np.testing.assert_array_equal(tr.followers, np.broadcast_to(init.followers, tr.followers.shape))
    np.testing.assert_array_equal(tr.estimates, np.broadcast_to(init.estimates, tr.estimates.shape))
    np.testing.assert_array_equal(tr.leader, np.broadcast_to(init.leader, tr.leader.shape))


def test_scalar_simulation_matches_exponential():
    plant = scalar_plant()
    top = build_topology([[0]], [1])
    init = SystemState([1.0], [[1.0]], [[1.0]])
    sc = Scenario(plant, CommSchedule(0.5, 0.25), SwitchingSchedule.cyclic([top], 0.5, 1.0),
                  np.zeros((1, 1)), np.zeros((1, 1)), init, step=0.01, horizon=1.0)
    tr = simulate(sc)
    assert abs(tr.followers[-1, 0, 0] - math.exp(-1.0)) < 1e-8
    assert tr.t[-1] == pytest.approx(1.0)


def test_consensus_fixed_point_preserved(certified_gains):
    sc = _example_scenario(certified_gains.K, certified_gains.G_obs, horizon=10.0)
    x0 = np.array([1.0, 0.0, 1.0, 0.0])
    init = SystemState(x0, np.tile(x0, (4, 1)), np.tile(x0, (4, 1)))
    sc = Scenario(sc.plant, sc.comm, sc.switching, sc.K, sc.G_obs, init, step=sc.step, horizon=sc.horizon,
                  signs=sc.signs)
    tr = simulate(sc)
    assert np.abs(tr.errors).max() <= 1e-12
    assert np.abs(tr.psi).max() <= 1e-12


def test_trace_errors_exact(certified_gains):
    tr = simulate(_example_scenario(certified_gains.K, certified_gains.G_obs, horizon=6.0, record_every=7))
    assert np.array_equal(tr.errors, tr.followers - tr.leader[:, None, :])
    assert np.array_equal(tr.psi, tr.estimates - tr.followers)
    assert tr.t[0] == 0.0 and tr.t[-1] == pytest.approx(6.0)
    assert set(tr.topology.tolist()) == {1, 2}
    # recorded inputs vanish in the silent part of each period
    silent = np.array([m is Mode.SILENT for m in tr.modes])
    assert silent.any() and np.all(tr.inputs[silent] == 0.0)


def test_off_grid_switch_rejected(certified_gains):
    sc = _example_scenario(certified_gains.K, certified_gains.G_obs, horizon=5.0,
                           comm=CommSchedule(5.0, 3.5004), step=1e-3)
    with pytest.raises(ConfigError):
        simulate(sc)


def test_divergence_returns_partial_trace():
    plant = PlantModel(np.array([[5.0]]), np.array([[1.0]]), np.array([[1.0]]), make_nonlinearity("zero", 1), 0.0)
    top = build_topology([[0]], [1])
    init = SystemState([1.0], [[1.0]], [[1.0]])
    sc = Scenario(plant, CommSchedule(1.0, 0.5), SwitchingSchedule.cyclic([top], 1.0, 10.0),
                  np.zeros((1, 1)), np.zeros((1, 1)), init, step=0.01, horizon=10.0)
    with pytest.raises(DivergenceError) as exc:
        simulate(sc)
    tr = exc.value.trace
    assert tr is not None and 0 < len(tr) < 1001
    assert np.all(np.isfinite(tr.followers)) and np.abs(tr.followers).max() <= DIVERGENCE_LIMIT


def test_verbatim_signs_do_not_track(certified_gains):
    # the literal protocol (+1, +1) pushes followers away from the leader with these gains
    sc = _example_scenario(certified_gains.K, certified_gains.G_obs, horizon=40.0, signs=ProtocolSigns(1, 1),
                           record_every=100)
    try:
        tr = simulate(sc)
    except DivergenceError:
        return
    assert np.linalg.norm(tr.errors[-1], axis=1).max() > 1e-2


def test_corrected_signs_track(certified_gains):
    sc = _example_scenario(certified_gains.K, certified_gains.G_obs, horizon=40.0, record_every=100)
    tr = simulate(sc)
    assert np.linalg.norm(tr.errors[-1], axis=1).max() < 1e-2


def test_csv_round_trip(tmp_path, certified_gains):
    tr = simulate(_example_scenario(certified_gains.K, certified_gains.G_obs, horizon=2.0, record_every=50))
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == trace_header(4, 4, 1)
    assert header[:4] == ["t", "mode", "topology", "x0_1"] and header[-1] == "V"
    back = read_trace_csv(path, 4, 4, 1)
    for name in ("t", "leader", "followers", "estimates", "inputs", "topology"):
        assert np.array_equal(getattr(back, name), getattr(tr, name))
    assert back.modes == tr.modes
    assert back.V is None
