import numpy as np
import pytest

from romcbf.core import ClassKInf, ControlAffineSystem
from romcbf.scenarios import build
from romcbf.sim import (
    Scenario,
    Trajectory,
    hdot_check,
    integrate,
    integrate_batch,
    merge_reports,
    monitor,
    rk4_step,
    sweep,
)


def decay(rate=1.0, vectorized=True):
    sys = ControlAffineSystem(1, 1, lambda x: -rate * x, lambda x: np.zeros(np.shape(x) + (1,)), vectorized)
    return Scenario("decay", sys, lambda x, t: np.zeros(np.shape(x)[:-1] + (1,)), np.array([1.0]), 1.0,
                    h=lambda x: np.asarray(x)[..., 0], vectorized=vectorized,
                    sampler=lambda rng, n: rng.uniform(0.5, 1.5, (n, 1)))


def test_rk4_order():
    errs = [abs(integrate(decay(), dt=dt).states[-1, 0] - np.exp(-1.0)) for dt in (0.1, 0.05)]
    assert 12 <= errs[0] / errs[1] <= 20


def test_rk4_step_matches_taylor():
    sys = decay().system
    x = rk4_step(sys, np.array([1.0]), np.array([0.0]), 0.1)
    assert x[0] == pytest.approx(1 - 0.1 + 0.01 / 2 - 0.001 / 6 + 0.0001 / 24, abs=1e-15)


def test_zero_order_hold_calls_controller_once_per_step():
    calls = []
    sc = decay()
    sc.controller = lambda x, t: (calls.append(t), np.zeros(1))[1]
    traj = integrate(sc, dt=0.1, horizon=1.0)
    assert len(calls) == 10 and len(traj.inputs) == 10 and len(traj.states) == 11
    assert np.allclose(calls, 0.1 * np.arange(10))


def test_held_input_integrates_exactly_for_ramp():
    sys = ControlAffineSystem(1, 1, lambda x: np.zeros_like(x), lambda x: np.ones(np.shape(x) + (1,)))
    sc = Scenario("ramp", sys, lambda x, t: np.array([np.floor(t * 10 + 1e-9) + 1]), np.zeros(1), 0.3, dt=0.1)
    assert integrate(sc).states[-1, 0] == pytest.approx(0.1 * (1 + 2 + 3))


def test_divergence_event():
    sys = ControlAffineSystem(1, 1, lambda x: x ** 2, lambda x: np.zeros((1, 1)))
    sc = Scenario("blowup", sys, lambda x, t: np.zeros(1), np.array([1.0]), 2.0, dt=1e-2,
                  h=lambda x: -x[0])
    traj = integrate(sc)
    assert traj.diverged
    assert traj.events[-1][1] == "divergence"
    assert traj.times[-1] < 1.01
    assert monitor(traj).diverged


def test_event_tags_recorded_on_change():
    sc = decay(vectorized=False)
    sc.event_fn = lambda x, t: "low" if x[0] < 0.5 else None
    traj = integrate(sc)
    assert [tag for _, tag in traj.events] == ["low"]
    assert traj.events[0][0] == pytest.approx(np.log(2), abs=2e-3)


def test_batch_matches_single():
    sc = build("inverted_pendulum", sim={"horizon": 1.0})
    X0 = sc.sampler(np.random.default_rng(0), 5)
    batch = integrate_batch(sc, X0)
    for x0, tb in zip(X0, batch):
        ts = integrate(sc, x0)
        assert np.allclose(tb.states, ts.states, atol=1e-12)
        assert np.allclose(tb.h_values, ts.h_values, atol=1e-12)


def test_batch_flags_divergent_member():
    sys = ControlAffineSystem(1, 1, lambda x: x ** 2, lambda x: np.zeros(np.shape(x) + (1,)), True)
    sc = Scenario("mixed", sys, lambda x, t: np.zeros(np.shape(x)[:-1] + (1,)), np.zeros(1), 2.0, dt=1e-2,
                  h=lambda x: -np.asarray(x)[..., 0], vectorized=True)
    out = integrate_batch(sc, np.array([[-1.0], [1.0]]))
    assert not out[0].diverged and out[1].diverged
    assert len(out[0].states) == 201


def test_monitor_and_merge():
    sc = decay()
    a = monitor(integrate(sc))
    assert a.min_h == pytest.approx(np.exp(-1.0), abs=1e-9)
    assert a.argmin_time == pytest.approx(1.0)
    assert not a.violated
    b = monitor(integrate(sc, np.array([-0.5])))
    assert b.violated
    m = merge_reports([a, b])
    assert m.violated and m.min_h == b.min_h and len(m.per_ic) == 2


def test_sweep_deterministic():
    sc = decay()
    r1, t1 = sweep(sc, 8, seed=3)
    r2, t2 = sweep(sc, 8, seed=3)
    assert r1.min_h == r2.min_h
    assert all(np.array_equal(x.states, y.states) for x, y in zip(t1, t2))
    with pytest.raises(ValueError):
        sweep(Scenario("none", sc.system, sc.controller, sc.x0, 1.0), 3)


def test_csv_layout_and_reproducibility():
    sc = decay()
    text = integrate(sc, dt=0.25).to_csv()
    lines = text.splitlines()
    assert lines[0] == "t,x_0,u_0,h"
    assert lines[-1].split(",")[2] == ""
    assert float(lines[1].split(",")[0]) == 0.0
    assert text == integrate(sc, dt=0.25).to_csv()


def test_hdot_check_on_exact_decay():
    t = np.linspace(0, 1, 1001)
    traj = Trajectory(1e-3, t, np.exp(-t)[:, None], np.zeros((1000, 1)), np.exp(-t))
    rep = hdot_check(traj, ClassKInf.linear(1.0))
    assert abs(rep.worst) < 1e-6 and not rep.flagged
    rep = hdot_check(traj, ClassKInf.linear(0.5))
    assert rep.flagged


def test_step_validation():
    with pytest.raises(ValueError):
        integrate(decay(), dt=0.0)
