import numpy as np
import pytest

from romcbf import scenarios as S
from romcbf.filters import validity_scan
from romcbf.sim import integrate, monitor

SCANNED = ["inverted_pendulum", "double_int_1d", "double_int_obstacle", "unicycle", "double_pendulum",
           "cartpole", "triple_integrator"]


def test_registry_names():
    assert S.list_scenarios() == ["inverted_pendulum", "double_int_1d", "double_int_obstacle", "unicycle",
                                  "double_pendulum", "cartpole", "segway_smooth", "segway_min", "truck",
                                  "triple_integrator", "hocbf_counterexample"]


def test_unknown_scenario_suggests():
    with pytest.raises(S.UnknownScenarioError) as err:
        S.build("double_pendulm")
    assert "double_pendulum" in str(err.value) and "inverted_pendulum" in str(err.value)


def test_default_parameters():
    assert S.DEFAULTS["inverted_pendulum"]["theta_bar"] == np.pi / 4
    assert S.DEFAULTS["inverted_pendulum"]["alpha0"] == 1.0
    assert S.DEFAULTS["double_int_1d"]["sigma"] == 0.1
    assert S.DEFAULTS["double_int_obstacle"]["formula"] == "gaussian"
    assert S.DEFAULTS["double_int_obstacle"]["mu"] == 1.0


def test_config_parsing_and_precedence():
    text = """
    # shared file
    inverted_pendulum.alpha0 = 0.5
    sim.dt = 0.002   # coarser step
    truck.policy = plain
    """
    items = S.load_config(text) + [S.parse_assignment("inverted_pendulum.alpha0=2")]
    params, sim = S.resolve_overrides("inverted_pendulum", items)
    assert params == {"alpha0": 2.0}
    assert sim == {"dt": 0.002}


@pytest.mark.parametrize("line, match", [
    ("inverted_pendulum.alpah0 = 1", "alpha0"),
    ("invertd_pendulum.alpha0 = 1", "inverted_pendulum"),
    ("sim.horizn = 1", "horizon"),
    ("inverted_pendulum.alpha0 = fast", "expects a number"),
    ("alpha0 = 1", "section"),
    ("inverted_pendulum.alpha0", "expected"),
])
def test_config_errors(line, match):
    with pytest.raises(S.ConfigError, match=match):
        S.resolve_overrides("inverted_pendulum", [S.parse_assignment(line)])


def test_build_applies_overrides_and_sim():
    sc = S.build("inverted_pendulum", {"alpha0": 0.5}, {"dt": 0.01, "horizon": 2.0})
    assert sc.cbf.alpha(1.0) == 0.5
    assert sc.dt == 0.01 and sc.horizon == 2.0
    with pytest.raises(S.ConfigError):
        S.build("truck", {"policy": "magic"})


def test_truck_policy_examples():
    P = S.DEFAULTS["truck"]
    V, W, rho = S.truck_policies(P["D_st"] - 1.0, 0.0, 30.0, P)
    assert V == 0.0 and rho == P["D_st"] and W == P["v_max"]
    V, _, rho = S.truck_policies(1e3, 10.0, 5.0, P)
    assert V == P["v_max"] and rho == P["D_st"] + P["tau_h"] * 10.0
    with pytest.raises(ValueError):
        S.truck_policies(1.0, 1.0, 1.0, dict(P, kappa=0.0))


def test_truck_braking_dichotomy():
    mins = {}
    for policy in ("desired", "plain", "tissf"):
        traj = integrate(S.build("truck", {"policy": policy}))
        mins[policy] = monitor(traj).min_h0
    assert mins["desired"] < 0
    assert mins["tissf"] >= 0
    assert mins["plain"] < mins["tissf"]


def test_segway_min_wiring():
    sc = S.build("segway_min", {"alpha": 2.0, "epsilon": 4.0})
    k0 = sc.extras["k0"]
    assert np.allclose(k0(np.array([0.0, 0.3])), [1.0, 0.0])
    assert np.allclose(k0(np.array([1.8, 0.0])), [2.0 * 0.2 - 0.25, 0.0])


def test_segway_model_parameters_give_positive_inertia(rng):
    el = S.segway_model()
    for phi in rng.uniform(-np.pi, np.pi, 100):
        assert el.min_inertia_eig(np.array([0.0, phi])) > 0


@pytest.mark.parametrize("name", SCANNED)
def test_registered_cbf_passes_validity(name):
    sc = S.build(name)
    rep = validity_scan(sc.system, sc.cbf, samples=sc.extras["scan_samples"](42))
    if name != "unicycle":  # the mixed barrier keeps both inputs active on the slice
        assert rep.zero_mask.sum() > 0
    assert rep.n_violations == 0


@pytest.mark.parametrize("barrier", ["extended", "naive"])
def test_negative_scenarios_fail_validity(barrier):
    sc = S.build("hocbf_counterexample", {"barrier": barrier})
    rep = validity_scan(sc.system, sc.cbf, samples=sc.extras["scan_samples"](42))
    assert rep.n_violations > 0


@pytest.mark.parametrize("alpha0, ok", [(0.5, True), (1.0, True), (2.0, True), (2.5, False)])
def test_pendulum_alpha0_range(alpha0, ok):
    sc = S.build("inverted_pendulum", {"alpha0": alpha0})
    th = np.linspace(-3, 3, 601)
    rep = validity_scan(sc.system, sc.cbf, samples=np.column_stack([th, -th]))
    assert (rep.n_violations == 0) == ok
    if not ok:
        assert np.all(np.abs(rep.violating_states[:, 0]) > np.sqrt(5) * np.pi / 4 - 1e-2)


def test_samplers_draw_from_safe_set():
    for name in ("inverted_pendulum", "double_int_1d", "hocbf_counterexample"):
        sc = S.build(name)
        X = sc.sampler(np.random.default_rng(0), 50)
        assert X.shape == (50, sc.system.n)
        assert np.all(sc.h(X) >= 0)


def test_unicycle_reaches_goal_safely():
    sc = S.build("unicycle")
    traj = integrate(sc)
    rep = monitor(traj)
    assert not rep.violated and rep.min_h0 >= 0
    assert np.linalg.norm(traj.states[-1, :2] - sc.extras["goal"]) < 0.1


def test_double_pendulum_stays_safe():
    traj = integrate(S.build("double_pendulum", sim={"horizon": 8.0}))
    rep = monitor(traj)
    assert rep.min_h0 >= 0 and rep.min_h >= -1e-4


def test_triple_integrator_stays_safe():
    traj = integrate(S.build("triple_integrator", sim={"horizon": 6.0}))
    rep = monitor(traj)
    assert not rep.violated and rep.min_h0 >= 0
