import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from romcbf.scenarios import build, wall_h0
from romcbf.sim import Trajectory
from romcbf.tracking import (
    ConditionRow,
    RomIssfSpec,
    TrackingBoundParams,
    TrackingCertificate,
    certificate_check,
    condition_rows_to_csv,
    fit_certified_bound,
    fit_error_bound,
    iss_lyapunov_barrier,
    lyapunov_barrier,
    rom_issf_margin,
    rom_issf_scan,
    safety_condition_check,
    timevarying_barrier,
    tracking_error_sq,
    young_gap,
)

pos = st.floats(0.0, 100.0, allow_nan=False)


@given(a=pos, d=pos, eps=st.floats(0.01, 50.0))
@settings(max_examples=300, deadline=None)
def test_young_gap_is_square(a, d, eps):
    gap = float(young_gap(a, d, eps))
    square = (a / np.sqrt(eps) - np.sqrt(eps) * d / 2) ** 2
    assert gap == pytest.approx(square, rel=1e-9, abs=1e-9)
    assert gap >= -1e-9 * (1 + a * a / eps + eps * d * d)


def test_young_gap_zero_at_minimizer():
    assert float(young_gap(3.0, 2 * 3.0 / 0.7, 0.7)) == pytest.approx(0.0, abs=1e-12)


def test_safety_condition_boundary():
    chk = safety_condition_check(1.0, 2.0, 2.0, 2.0)
    assert chk.satisfied and chk.margin == 0.0
    assert not safety_condition_check(1.0, 2.0, 2.0, 1.99).satisfied


def simple_spec(alpha=1.0, eps=2.0):
    h0 = wall_h0(2.0)
    k0 = lambda q: np.stack([np.minimum(1.0, alpha * (2.0 - q[..., 0]) - 1 / eps), 0 * q[..., 0]], -1)
    return RomIssfSpec(h0, k0, alpha, eps, 2)


def test_spec_validation_and_split():
    spec = simple_spec()
    q, xi = spec.split(np.arange(4.0))
    assert np.allclose(q, [0, 1]) and np.allclose(xi, [2, 3])
    with pytest.raises(ValueError):
        RomIssfSpec(spec.h0, spec.k0, 0.0, 1.0, 2)


def test_barrier_values():
    spec = simple_spec()
    cert = TrackingCertificate(lambda q, xi: float(np.sum((xi - spec.k0(q)) ** 2)), 1.0, 1.0, 3.0)
    x = np.array([1.0, 0.0, 0.2, 0.1])
    e2 = float(np.sum(spec.error(x) ** 2))
    assert lyapunov_barrier(spec, cert, 2.0)(x) == pytest.approx(1.0 - e2 / 2.0)
    iss = TrackingCertificate(cert.V, 1.0, 1.0, 3.0, delta=0.4)
    assert iss_lyapunov_barrier(spec, iss, 2.0)(x) == pytest.approx(1.0 - e2 / 2.0 + 0.4 / 2.0)
    with pytest.raises(ValueError):
        lyapunov_barrier(spec, iss, 2.0)
    with pytest.raises(ValueError):
        TrackingCertificate(cert.V, 2.0, 1.0, 1.0)


def test_timevarying_barrier_formula():
    spec = simple_spec(alpha=0.5, eps=2.0)
    bound = TrackingBoundParams(3.0, 2.0, 0.1)
    h = timevarying_barrier(spec, bound, 1.5)
    x = np.array([0.5, 0.0, 0.0, 0.0])
    t = 0.7
    assert h(x, t) == pytest.approx(1.5 - 3.0 / 1.5 * np.exp(-1.4) + 2.0 * 0.1 / 2.0)
    X = np.tile(x, (3, 1))
    assert np.allclose(h(X, np.array([0.0, t, 5.0]))[1], h(x, t))


def test_min_formula_rom_condition_holds():
    spec = simple_spec()
    rep = rom_issf_scan(spec, [[-1, 3], [-0.5, 0.5]], 5000)
    assert rep.n_violations == 0
    # with the robustness term removed the condition holds with slack 1/eps
    assert rom_issf_margin(spec, np.array([1.0, 0.0]), np.inf) >= 1 / spec.epsilon - 1e-12


def test_rom_issf_scan_detects_aggressive_controller():
    spec = simple_spec()
    bad = RomIssfSpec(spec.h0, lambda q: np.array([2.0, 0.0]), 1.0, 2.0, 2)
    rep = rom_issf_scan(bad, samples=[[1.9, 0.0], [-2.0, 0.0]])
    assert rep.n_violations == 1
    assert np.allclose(rep.violating_states, [[1.9, 0.0]])


def test_fit_error_bound_recovers_rate():
    t = np.linspace(0, 10, 2001)
    s = 4.0 * np.exp(-1.5 * t) + 1e-3 * (1 + np.sin(3 * t)) / 2
    fit = fit_error_bound(t, s)
    assert fit.holds(t, s, tol=1e-12)
    assert fit.gamma == pytest.approx(1.5, rel=0.1)
    assert fit.delta <= 1e-3 + 4.0 * np.exp(-1.5 * 8.0)


def test_fit_error_bound_fallback_and_validation():
    t = np.linspace(0, 1, 50)
    fit = fit_error_bound(t, np.full(50, 0.3))
    assert (fit.M, fit.gamma, fit.delta) == (0.0, 0.0, 0.3)
    with pytest.raises(ValueError):
        fit_error_bound(t[:5], np.ones(5))


def test_certified_fit_minimizes_barrier_offset():
    t = np.linspace(0, 5, 1001)
    s = 2.0 * np.exp(-3.0 * t) + 0.01
    bound, mu = fit_certified_bound(t, s, 1.0, 2.0)
    assert bound.holds(t, s, tol=1e-12)
    assert mu == pytest.approx(4.0 * (bound.gamma - 1.0) / 2.0)
    # for s - delta = M0 exp(-g0 t) the offset M/mu is minimized at gamma = g0
    assert bound.gamma == pytest.approx(3.0, rel=0.02)
    assert bound.M == pytest.approx(2.0, rel=0.05)
    with pytest.raises(ValueError):
        fit_certified_bound(t, s, 1.0, 2.0, gammas=[0.5])


def test_tracking_error_on_trajectory():
    spec = simple_spec()
    t = np.linspace(0, 1, 11)
    X = np.column_stack([t, 0 * t, 0.5 + 0 * t, 0 * t])
    traj = Trajectory(0.1, t, X, np.zeros((10, 1)))
    d2 = tracking_error_sq(traj, spec.k0, 2)
    assert np.allclose(d2, (0.5 - spec.k0(X[:, :2])[:, 0]) ** 2)


def test_certificate_check_on_exponential_error():
    spec = simple_spec()
    t = np.linspace(0, 2, 2001)
    q = np.zeros((len(t), 2))
    xi = spec.k0(q) + np.exp(-t)[:, None] * np.array([1.0, 0.0])
    traj = Trajectory(1e-3, t, np.hstack([q, xi]), np.zeros((2000, 1)))
    V = lambda q_, xi_: float(np.sum((xi_ - spec.k0(q_)) ** 2))
    good = certificate_check(spec, TrackingCertificate(V, 1.0, 1.0, 2.0), traj, samples=traj.states[::100])
    assert good.sandwich_ok and good.decay_ok
    bad = certificate_check(spec, TrackingCertificate(V, 1.0, 1.0, 2.5), traj)
    assert not bad.decay_ok
    loose = certificate_check(spec, TrackingCertificate(V, 1.5, 2.0, 2.0), samples=traj.states[:5])
    assert not loose.sandwich_ok


def test_condition_rows_csv():
    text = condition_rows_to_csv([ConditionRow(1.0, 5.0, 1.0, 2.5, 0.25, True, 0.08)])
    assert text.splitlines() == ["alpha,epsilon,mu,gamma_fit,margin,safe,min_h0",
                                 "1.0,5.0,1.0,2.5,0.25,1,0.08"]


def test_segway_scenarios_satisfy_rom_condition():
    for name in ("segway_smooth", "segway_min"):
        sc = build(name)
        rep = rom_issf_scan(sc.extras["spec"], sc.extras["rom_box"], 3000)
        assert rep.n_violations == 0, name
