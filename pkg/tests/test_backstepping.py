import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from romcbf.backstepping import (
    RomController,
    SingularDecompositionError,
    backstep,
    extended_cbf,
    heading_split,
    mixed_backstep,
    mixed_condition_margin,
    recursive_backstep,
    rom_condition_margin,
    smooth_rom_controller,
    unicycle_decompose,
)
from romcbf.core import (
    CascadeTwoLayer,
    ClassKInf,
    fd_jacobian,
    fd_relative_error,
    lie_derivatives,
    lift_cascade,
    sample_box,
)
from romcbf.filters import MultiplierFormula, validity_scan
from romcbf.scenarios import (
    double_integrator_cascade,
    goal_rom_controller,
    interval_h0,
    obstacle_h0,
    triple_integrator_chain,
    unicycle_cascade,
)

GAUSS = MultiplierFormula("gaussian", 0.1)
QO, QG = np.array([1.0, 1.0]), np.array([2.0, 2.0])
plane = arrays(float, 2, elements=st.floats(-0.5, 2.5))


def obstacle_k0(formula=GAUSS):
    h0 = obstacle_h0(QO, 0.5)
    return h0, goal_rom_controller(h0, formula, QG, 1.0)


@pytest.mark.parametrize("kind", ["sontag", "half_sontag", "softplus", "gaussian"])
def test_smooth_rom_controller_strict_condition(kind):
    h0, k0 = obstacle_k0(MultiplierFormula(kind, 0.1))
    Q = sample_box([[-0.5, 2.5], [-0.5, 2.5]], 2000, 3)
    # the exact margin can sit below machine precision where the filter is far from active
    assert np.all(rom_condition_margin(h0, k0, Q) > -1e-12)


@given(q=plane)
@settings(max_examples=100, deadline=None)
def test_rom_controller_jacobian_matches_fd(q):
    _, k0 = obstacle_k0(MultiplierFormula("softplus", 0.3))
    assert np.allclose(k0.jacobian(q), fd_jacobian(k0, q), atol=1e-5, rtol=1e-5)


def test_rom_controller_with_epsilon_satisfies_issf_condition():
    h0 = interval_h0(1.0)
    k0 = smooth_rom_controller(h0, MultiplierFormula("softplus", 0.1), n=1, epsilon=0.5)
    q = np.linspace(-1.2, 1.2, 101)[:, None]
    grad = h0.gradient(q)[:, 0]
    margin = grad * k0(q)[:, 0] + h0(q) - grad ** 2 / 0.5
    assert np.all(margin > 0)


def test_rom_controller_needs_dimension():
    with pytest.raises(ValueError):
        smooth_rom_controller(interval_h0())


def test_backstep_value_identity_and_bound(rng):
    h0 = interval_h0()
    k0 = smooth_rom_controller(h0, MultiplierFormula("softplus", 0.1), n=1)
    cbf = backstep(h0, k0, 2.0, double_integrator_cascade(1))
    X = rng.uniform(-1.5, 1.5, (500, 2))
    e = X[:, 1] - k0(X[:, :1])[:, 0]
    assert np.allclose(cbf(X), h0(X[:, :1]) - e ** 2 / 4.0)
    on = np.column_stack([X[:, 0], k0(X[:, :1])[:, 0]])
    assert np.allclose(cbf(on), h0(X[:, :1]))


def test_backstep_gradient_matches_fd(rng):
    h0, k0 = obstacle_k0()
    cbf = backstep(h0, k0, 1.0, double_integrator_cascade(2))
    for x in rng.uniform(-0.5, 2.5, (50, 4)):
        assert fd_relative_error(cbf, cbf.gradient, x) < 1e-5


@pytest.mark.parametrize("mu", [0.5, 1.0, 5.0, 25.0])
def test_backstepped_obstacle_validity(mu):
    h0, k0 = obstacle_k0()
    cbf = backstep(h0, k0, mu, double_integrator_cascade(2))
    Q = sample_box([[-0.5, 2.5], [-0.5, 2.5]], 1000, 7)
    slice_ = np.column_stack([Q, k0(Q)])
    rep = validity_scan(cbf.system, cbf, samples=slice_)
    assert rep.zero_mask.all()
    assert rep.n_violations == 0


def test_backstep_rejects_bad_inputs():
    h0 = interval_h0()
    k0 = smooth_rom_controller(h0, n=1)
    with pytest.raises(ValueError):
        backstep(h0, k0, 0.0, double_integrator_cascade(1))
    bad = CascadeTwoLayer(1, 1, 1, None, None, None, None, g1_pseudo_invertible=False)
    with pytest.raises(ValueError):
        backstep(h0, k0, 1.0, bad)


def test_recursive_backstep_triple_integrator(rng):
    multi = triple_integrator_chain()
    h0 = interval_h0()
    cbf = recursive_backstep(h0, [None, None], [1.0, 2.0], multi)
    X = rng.uniform(-1.2, 1.2, (40, 3))
    for x in X:
        assert fd_relative_error(cbf, cbf.gradient, x) < 1e-5
    assert np.all(cbf(X) <= h0(X[:, :1]) + 1e-12)
    Q = sample_box([[-1.5, 1.5], [-3, 3]], 500, 2)
    slice_ = np.column_stack([Q, cbf.k0(Q)[:, 0]])
    rep = validity_scan(cbf.system, cbf, samples=slice_)
    assert rep.zero_mask.all() and rep.n_violations == 0


def test_recursive_backstep_checks_lengths():
    with pytest.raises(ValueError):
        recursive_backstep(interval_h0(), [None], [1.0, 1.0], triple_integrator_chain())


def test_recursive_backstep_accepts_controller_objects():
    h0 = interval_h0()
    k0 = smooth_rom_controller(h0, n=1)
    cbf = recursive_backstep(h0, [k0, None], [1.0, 1.0], triple_integrator_chain())
    assert cbf.k0 is not k0


def test_extended_cbf_witness_margin_exact():
    cand, member = extended_cbf(interval_h0(), double_integrator_cascade(1), 1.0, ClassKInf.linear(1.0))
    x = np.array([0.0, 1.0])
    assert member(x)
    lfh, lgh = lie_derivatives(lift_cascade(double_integrator_cascade(1)), cand, x)
    assert np.allclose(lgh, 0.0)
    assert lfh + cand.alpha(cand(x)) == pytest.approx(-1.0, abs=1e-12)


def test_extended_cbf_formula_and_gradient(rng):
    cand, _ = extended_cbf(interval_h0(), double_integrator_cascade(1), 2.0)
    X = rng.uniform(-1, 1, (30, 2))
    assert np.allclose(cand(X), -2 * X[:, 0] * X[:, 1] + 2.0 - 2.0 * X[:, 0] ** 2)
    for x in X:
        assert fd_relative_error(cand, cand.gradient, x) < 1e-5
    with pytest.raises(ValueError):
        extended_cbf(interval_h0(), double_integrator_cascade(1), 0.0)


def test_unicycle_decompose():
    heading, speed = unicycle_decompose([3.0, 4.0])
    assert speed == 5.0 and np.allclose(heading, [0.6, 0.8])
    with pytest.raises(SingularDecompositionError):
        unicycle_decompose([0.0, 1e-9])


def test_heading_split_and_mixed_backstep(rng):
    h0, k0 = obstacle_k0()
    split = heading_split(k0)
    cas = unicycle_cascade()
    cbf = mixed_backstep(h0, split, 1.0, cas)
    Q = sample_box([[-0.5, 2.5], [-0.5, 2.5]], 200, 11)
    Q = Q[np.linalg.norm(k0(Q), axis=1) > 1e-3]
    for q in Q[:30]:
        assert np.allclose(split.k0_xi.jacobian(q), fd_jacobian(split.k0_xi, q), atol=1e-5)
        assert np.linalg.norm(split.k0_xi(q)) == pytest.approx(1.0)
        assert np.allclose(split.k0_xi(q) * split.k0_u(q), k0(q))
    assert np.all(mixed_condition_margin(h0, split, cas, Q) > 0)
    for q in Q[:20]:
        psi = rng.uniform(-np.pi, np.pi)
        x = np.r_[q, np.cos(psi), np.sin(psi)]
        assert fd_relative_error(cbf, cbf.gradient, x) < 1e-5


def test_rom_controller_fd_fallback():
    k = RomController(lambda q: np.sin(q))
    q = np.array([0.2, -0.4])
    assert np.allclose(k.jacobian(q), np.diag(np.cos(q)), atol=1e-8)
