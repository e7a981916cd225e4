from dataclasses import replace

import numpy as np
import pytest

from romcbf.backstepping import smooth_rom_controller
from romcbf.core import el_to_affine, fd_relative_error, lie_derivatives
from romcbf.filters import MultiplierFormula, SafetyFilter, filter_input
from romcbf.robotics import (
    CouplingLostError,
    EnergyCbf,
    PreconditionError,
    collocated_reduce,
    coupling_margin,
    energy_ab,
    energy_cbf_value,
    energy_filter_input,
    explicit_energy_controller,
    noncollocated_reduce,
    underactuated_cbf,
)
from romcbf.scenarios import (
    cartpole_h0,
    cartpole_model,
    double_pendulum_h0,
    double_pendulum_model,
    segway_model,
)


@pytest.fixture
def energy():
    el = double_pendulum_model()
    h0 = double_pendulum_h0(1.0, 1.0, 1.0)
    k0 = smooth_rom_controller(h0, MultiplierFormula("softplus", 0.1), n=2)
    return EnergyCbf(h0, k0, 1.0, el)


def random_state(rng):
    return rng.uniform(-np.pi, np.pi, 2), rng.uniform(-3, 3, 2)


def test_energy_value_hand_formula(energy, rng):
    for _ in range(20):
        q, qd = random_state(rng)
        e = qd - energy.k0(q)
        m1 = m2 = l1 = l2 = 1.0
        c2 = np.cos(q[1])
        D = np.array([[(m1 + m2) * l1 ** 2 + m2 * l2 ** 2 + 2 * m2 * l1 * l2 * c2, m2 * l2 ** 2 + m2 * l1 * l2 * c2],
                      [m2 * l2 ** 2 + m2 * l1 * l2 * c2, m2 * l2 ** 2]])
        px = np.sin(q[0]) + np.sin(q[0] + q[1])
        assert energy_cbf_value(energy, q, qd) == pytest.approx(1.0 - px ** 2 - 0.5 * e @ D @ e, abs=1e-12)


def test_energy_gradient_and_ab_match_affine_path(energy, rng):
    cbf = energy.as_cbf()
    sys = el_to_affine(energy.el)
    for _ in range(50):
        q, qd = random_state(rng)
        x = np.r_[q, qd]
        assert fd_relative_error(cbf, cbf.gradient, x) < 1e-5
        kd = rng.normal(size=2)
        lfh, lgh = lie_derivatives(sys, cbf, x)
        a, b = energy_ab(energy, q, qd, kd)
        assert a == pytest.approx(lfh + lgh @ kd + cbf(x), abs=1e-9)
        assert b == pytest.approx(lgh @ lgh, abs=1e-9)


@pytest.mark.parametrize("kind", ["relu", "softplus"])
def test_energy_filter_equivalence(energy, rng, kind):
    f = MultiplierFormula(kind, 0.2)
    cbf = energy.as_cbf()
    sys = el_to_affine(energy.el)
    for _ in range(50):
        q, qd = random_state(rng)
        kd = rng.normal(size=2) * 5
        u1 = energy_filter_input(energy, kd, q, qd, f)
        u2 = filter_input(SafetyFilter(cbf, None, f), sys, np.r_[q, qd], kd=kd)
        assert np.allclose(u1, u2, atol=1e-9)


def test_energy_filter_callable_nominal(energy):
    q, qd = np.array([0.1, 0.2]), np.array([0.3, -0.1])
    assert np.allclose(energy_filter_input(energy, lambda q_, qd_: -qd_, q, qd),
                       energy_filter_input(energy, -qd, q, qd))


def test_explicit_controller_enforces_condition(energy, rng):
    k = explicit_energy_controller(energy, gamma=2.0)
    cbf = energy.as_cbf()
    sys = el_to_affine(energy.el)
    for _ in range(100):
        q, qd = random_state(rng)
        x = np.r_[q, qd]
        lfh, lgh = lie_derivatives(sys, cbf, x)
        assert lfh + lgh @ k(q, qd) + cbf(x) >= -1e-8


def test_explicit_controller_preconditions(energy):
    with pytest.raises(PreconditionError):
        explicit_energy_controller(energy, gamma=0.5)
    under = replace(energy, el=cartpole_model())
    with pytest.raises(PreconditionError):
        explicit_energy_controller(under, gamma=2.0)


def test_energy_mu_positive(energy):
    with pytest.raises(ValueError):
        replace(energy, mu=0.0)


def test_collocated_reduction_consistent_with_full_dynamics(rng):
    el = cartpole_model()
    red = collocated_reduce(el)
    for _ in range(20):
        q, qd = random_state(rng)
        u = rng.normal(size=1)
        qdd = el.accel(q, qd, u)
        assert red.Dbar1(q) @ qdd[:1] + red.Hbar1(q, qd) == pytest.approx(red.B1 @ u, abs=1e-9)
        assert np.linalg.eigvalsh(red.Dbar1(q))[0] > 0


def test_noncollocated_reduction_and_coupling(rng):
    el = cartpole_model()
    red = noncollocated_reduce(el)
    for _ in range(20):
        q = np.array([rng.uniform(-1, 1), rng.uniform(2.8, 3.5)])
        qd = rng.uniform(-2, 2, 2)
        u = rng.normal(size=1)
        qdd = el.accel(q, qd, u)
        assert red.Dbar2(q) @ qdd[1:] + red.Hbar2(q, qd) == pytest.approx(red.B1 @ u, abs=1e-9)
    q_lost = np.array([0.0, np.pi / 2])
    assert coupling_margin(el, q_lost) < 1e-12
    with pytest.raises(CouplingLostError):
        red.Dbar2(q_lost)


def test_reductions_need_zero_passive_input():
    with pytest.raises(PreconditionError):
        collocated_reduce(segway_model())
    with pytest.raises(PreconditionError):
        collocated_reduce(double_pendulum_model())


def test_underactuated_cbf_gradient_and_value(rng):
    el = cartpole_model()
    h0 = cartpole_h0()
    k0 = smooth_rom_controller(h0, MultiplierFormula("softplus", 0.1), n=1)
    cbf = underactuated_cbf(el, "passive", h0, k0, 1.0)
    red = noncollocated_reduce(el)
    for _ in range(30):
        q = np.array([rng.uniform(-1, 1), rng.uniform(2.7, 3.6)])
        qd = rng.uniform(-2, 2, 2)
        x = np.r_[q, qd]
        w = qd[1:] - k0(q[1:])
        W = red.Dbar2(q).T @ red.Dbar2(q)
        assert cbf(x) == pytest.approx(float(h0(q[1:])) - 0.5 * float(w @ W @ w), abs=1e-12)
        assert fd_relative_error(cbf, cbf.gradient, x) < 1e-5
    act = underactuated_cbf(el, "actuated", h0, k0, 2.0)
    assert act.part == slice(0, 1)
    with pytest.raises(ValueError):
        underactuated_cbf(el, "both", h0, k0, 1.0)


def test_energy_filter_equivalence_with_damping(rng):
    el = segway_model()
    h0 = double_pendulum_h0(1.0, 1.0, 1.0)
    k0 = smooth_rom_controller(h0, MultiplierFormula("softplus", 0.1), n=2)
    e = EnergyCbf(h0, k0, 1.0, el)
    cbf, sys = e.as_cbf(), el_to_affine(el)
    for _ in range(30):
        q, qd = random_state(rng)
        kd = rng.normal(size=1) * 5
        u1 = energy_filter_input(e, kd, q, qd, MultiplierFormula("relu"))
        u2 = filter_input(SafetyFilter(cbf, None, MultiplierFormula("relu")), sys, np.r_[q, qd], kd=kd)
        assert np.allclose(u1, u2, atol=1e-9)
    # the damping term is what the skew-symmetric shortcut would miss
    undamped = replace(el, coriolis=None)
    q, qd = np.array([0.3, 0.2]), np.array([1.0, -2.0])
    err = qd - k0(q)
    gap = energy_ab(e, q, qd)[0] - energy_ab(EnergyCbf(h0, k0, 1.0, undamped), q, qd)[0]
    assert gap == pytest.approx(err @ (el.C(q, qd) - el.coriolis(q, qd)) @ err, rel=1e-12)
    assert gap > 0
