"""Registry of runnable closed-loop scenarios.

Each scenario has a table of default parameters that can be overridden from a
plain-text config file (``section.key = value`` per line) or from ``--set``
flags. The section is either the scenario name or ``sim`` for the
integration settings shared by all scenarios.
"""

from __future__ import annotations

import difflib
from typing import Callable, Optional

import numpy as np

from .backstepping import (
    RomController,
    backstep,
    extended_cbf,
    heading_split,
    mixed_backstep,
    recursive_backstep,
    smooth_rom_controller,
)
from .core import (
    CascadeTwoLayer,
    ClassKInf,
    ControlAffineSystem,
    EulerLagrangeSystem,
    Layer,
    MixedCascadeTwoLayer,
    MultiLayerCascade,
    el_to_affine,
    grid_box,
    lift_cascade,
    sample_box,
)
from .filters import (
    CbfCandidate,
    IssfParams,
    MultiplierFormula,
    SafetyFilter,
    filter_input,
    issf_filter_input,
)
from .robotics import EnergyCbf, energy_ab, energy_cbf_value, energy_filter_input, underactuated_cbf
from .sim import Scenario
from .tracking import RomIssfSpec

RELU = MultiplierFormula("relu")

SIM_DEFAULTS = {"dt": 1e-3, "horizon": None, "tol_inv": 1e-4}

DEFAULTS = {
    "inverted_pendulum": {
        "m": 1.0, "l": 1.0, "g": 9.81, "theta_bar": np.pi / 4, "alpha0": 1.0,
        "theta0": 0.0, "thetadot0": 1.1, "horizon": 10.0,
    },
    "double_int_1d": {
        "mu": 1.0, "sigma": 0.1, "alpha": 1.0, "kp": 1.0, "kd": 1.0, "x_target": 2.0,
        "x0": 0.0, "v0": 0.5, "horizon": 10.0,
    },
    "double_int_obstacle": {
        "formula": "gaussian", "sigma": 0.1, "mu": 1.0, "alpha": 1.0, "kp": 1.0, "kv": 2.0,
        "qo_x": 1.0, "qo_y": 1.0, "radius": 0.5, "qg_x": 2.0, "qg_y": 2.0,
        "x0": 0.0, "y0": 0.2, "horizon": 10.0, "dt": 2e-3,
    },
    "unicycle": {
        "formula": "gaussian", "sigma": 0.1, "mu": 1.0, "alpha": 1.0, "kp": 1.0, "kpsi": 3.0,
        "qo_x": 1.0, "qo_y": 1.0, "radius": 0.5, "qg_x": 2.0, "qg_y": 2.0,
        "x0": 0.0, "y0": 0.2, "psi0": np.pi / 4, "horizon": 15.0, "dt": 2e-3,
    },
    "double_pendulum": {
        "m1": 1.0, "m2": 1.0, "l1": 1.0, "l2": 1.0, "g": 9.81, "x_bar": 1.0,
        "sigma": 0.1, "alpha": 1.0, "mu": 1.0,
        "theta1_0": np.pi - 0.05, "theta2_0": 0.05, "horizon": 20.0, "dt": 2e-3,
    },
    "cartpole": {
        "mc": 1.0, "mp": 0.2, "l": 0.5, "g": 9.81, "sigma": 0.1, "alpha": 1.0, "mu": 1.0,
        "k_theta": 20.0, "k_thetadot": 5.0, "theta_amp": np.pi / 4, "theta_freq": 0.5,
        "horizon": 20.0, "dt": 2e-3,
    },
    "segway_smooth": {
        "m0": 55.0, "m": 45.0, "J0": 4.0, "L": 0.169, "R": 0.2, "bt": 1.0, "Km": 1.5, "g": 9.81,
        "pd_des": 1.0, "p_max": 2.0, "k_pdot": 50.0, "k_phi": 150.0, "k_phidot": 40.0,
        "alpha": 1.0, "epsilon": 5.0, "formula": "softplus", "sigma": 0.1, "mu": 1.0,
        "horizon": 10.0,
    },
    "segway_min": {
        "m0": 55.0, "m": 45.0, "J0": 4.0, "L": 0.169, "R": 0.2, "bt": 1.0, "Km": 1.5, "g": 9.81,
        "pd_des": 1.0, "p_max": 2.0, "k_pdot": 50.0, "k_phi": 150.0, "k_phidot": 40.0,
        "alpha": 1.0, "epsilon": 5.0, "mu": 1.0, "horizon": 10.0,
    },
    "truck": {
        "policy": "tissf", "A": 0.4, "B": 0.5, "kappa": 0.6, "D_st": 5.0, "tau_h": 1.0,
        "v_max": 25.0, "alpha": 1.0, "epsilon0": 0.2, "eps_scale": 2.0, "epsilon": 0.5,
        "tau_act": 1.0, "v0": 20.0, "brake": 6.0, "t_brake": 2.0, "horizon": 12.0,
    },
    "triple_integrator": {
        "mu1": 1.0, "mu2": 1.0, "sigma": 0.1, "alpha": 1.0, "x_target": 2.0,
        "x0": 0.0, "v0": 0.0, "a0": 0.0, "horizon": 10.0, "dt": 2e-3,
    },
    "hocbf_counterexample": {
        "alpha0": 1.0, "alpha": 1.0, "barrier": "extended", "push": 1.0,
        "x0": 0.0, "v0": 0.5, "horizon": 5.0,
    },
}

NAMES = tuple(DEFAULTS)


class UnknownScenarioError(KeyError):
    def __init__(self, name):
        hint = difflib.get_close_matches(str(name), NAMES, n=1)
        extra = f"; did you mean {hint[0]!r}?" if hint else ""
        super().__init__(f"unknown scenario {name!r}{extra} valid names: {', '.join(NAMES)}")


class ConfigError(ValueError):
    """Unknown or malformed configuration key."""


def _parse_value(text: str):
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        return text


def _suggest(key, valid):
    hint = difflib.get_close_matches(key, list(valid), n=1)
    return f" (did you mean {hint[0]!r}?)" if hint else ""


def parse_assignment(line: str):
    """Split ``section.key = value`` into ``(section, key, value)``."""
    if "=" not in line:
        raise ConfigError(f"expected 'section.key = value', got {line!r}")
    lhs, rhs = line.split("=", 1)
    lhs = lhs.strip()
    if "." not in lhs:
        raise ConfigError(f"key {lhs!r} lacks a section prefix")
    section, key = lhs.split(".", 1)
    return section.strip(), key.strip(), _parse_value(rhs)


def load_config(text: str):
    """Parse config-file text into a list of ``(section, key, value)``; ``#`` starts a comment."""
    out = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append(parse_assignment(line))
    return out


def resolve_overrides(name: str, assignments) -> tuple:
    """Validate assignments for scenario ``name``; returns ``(params, sim)`` dicts.

    Later assignments win. Assignments for other scenarios' sections are ignored
    so one config file can serve every scenario.
    """
    if name not in DEFAULTS:
        raise UnknownScenarioError(name)
    params = {}
    sim = {}
    for section, key, value in assignments:
        if section == "sim":
            if key not in SIM_DEFAULTS:
                raise ConfigError(f"unknown key sim.{key}{_suggest(key, SIM_DEFAULTS)}")
            sim[key] = value
        elif section == name:
            if key not in DEFAULTS[name]:
                raise ConfigError(f"unknown key {name}.{key}{_suggest(key, DEFAULTS[name])}")
            default = DEFAULTS[name][key]
            if isinstance(default, float) and isinstance(value, str):
                raise ConfigError(f"{name}.{key} expects a number, got {value!r}")
            params[key] = value
        elif section not in DEFAULTS:
            raise ConfigError(f"unknown section {section!r}{_suggest(section, list(NAMES) + ['sim'])}")
    return params, sim


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _formula(P) -> MultiplierFormula:
    return MultiplierFormula(str(P["formula"]), float(P["sigma"]))


def _filtered(sys: ControlAffineSystem, cbf: CbfCandidate, nominal: Callable,
              formula: MultiplierFormula = RELU) -> Callable:
    flt = SafetyFilter(cbf, None, formula)

    def controller(x, t):
        return filter_input(flt, sys, x, kd=nominal(x, t))

    return controller


def _rejection(box, keep: Callable, rng, n: int, batch: int = 4096) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    out = []
    count = 0
    while count < n:
        X = rng.uniform(box[:, 0], box[:, 1], size=(batch, len(box)))
        X = X[np.asarray(keep(X), dtype=bool)]
        out.append(X)
        count += len(X)
    return np.concatenate(out)[:n]


def _slice_samples(k0: Callable, q_box, n: int, seed: int) -> np.ndarray:
    """States ``(q, k0(q))`` on which the barrier's control direction vanishes."""
    Q = sample_box(q_box, n, seed)
    return np.array([np.concatenate([q, np.atleast_1d(k0(q))]) for q in Q])


def _vec_cbf(h, grad, hess=None, alpha=None) -> CbfCandidate:
    return CbfCandidate(h, grad, hess, True, alpha or ClassKInf.linear(1.0))


# ---------------------------------------------------------------------------
# Euler-Lagrange models
# ---------------------------------------------------------------------------

def double_pendulum_model(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=9.81) -> EulerLagrangeSystem:
    """Point masses at the link ends, both joints actuated."""

    def D(q):
        c2 = np.cos(q[1])
        d11 = (m1 + m2) * l1 ** 2 + m2 * l2 ** 2 + 2 * m2 * l1 * l2 * c2
        d12 = m2 * l2 ** 2 + m2 * l1 * l2 * c2
        return np.array([[d11, d12], [d12, m2 * l2 ** 2]])

    def C(q, qd):
        hh = -m2 * l1 * l2 * np.sin(q[1])
        return np.array([[hh * qd[1], hh * (qd[0] + qd[1])], [-hh * qd[0], 0.0]])

    def G(q):
        s12 = np.sin(q[0] + q[1])
        return np.array([(m1 + m2) * g * l1 * np.sin(q[0]) + m2 * g * l2 * s12, m2 * g * l2 * s12])

    def dD(q):
        s2 = -m2 * l1 * l2 * np.sin(q[1])
        return np.array([np.zeros((2, 2)), [[2 * s2, s2], [s2, 0.0]]])

    return EulerLagrangeSystem(2, 2, D, C, G, np.eye(2), dD=dD)


def cartpole_model(mc=1.0, mp=0.2, l=0.5, g=9.81) -> EulerLagrangeSystem:
    """Cart position actuated, pole angle passive; ``theta = pi`` is upright."""

    def D(q):
        c = mp * l * np.cos(q[1])
        return np.array([[mc + mp, c], [c, mp * l ** 2]])

    def C(q, qd):
        return np.array([[0.0, -mp * l * qd[1] * np.sin(q[1])], [0.0, 0.0]])

    def G(q):
        return np.array([0.0, mp * g * l * np.sin(q[1])])

    def dD(q):
        s = -mp * l * np.sin(q[1])
        return np.array([np.zeros((2, 2)), [[0.0, s], [s, 0.0]]])

    return EulerLagrangeSystem(2, 1, D, C, G, np.array([[1.0], [0.0]]), partition=1, dD=dD)


def segway_model(m0=55.0, m=45.0, J0=4.0, L=0.169, R=0.2, bt=1.0, Km=1.5, g=9.81) -> EulerLagrangeSystem:
    """Planar Segway on ``q = (p, phi)`` with motor voltage input."""

    def D(q):
        c = m * L * np.cos(q[1])
        return np.array([[m0, c], [c, J0]])

    def coriolis(q, qd):
        return np.array([[0.0, -m * L * qd[1] * np.sin(q[1])], [0.0, 0.0]])

    damping = bt * np.array([[1.0 / R, -1.0], [-1.0, R]])

    def C(q, qd):
        return coriolis(q, qd) + damping

    def G(q):
        return np.array([0.0, -m * g * L * np.sin(q[1])])

    def dD(q):
        s = -m * L * np.sin(q[1])
        return np.array([np.zeros((2, 2)), [[0.0, s], [s, 0.0]]])

    return EulerLagrangeSystem(2, 1, D, C, G, np.array([[Km / R], [-Km]]), partition=1, dD=dD,
                               coriolis=coriolis)


# ---------------------------------------------------------------------------
# scenario builders
# ---------------------------------------------------------------------------

def _pendulum_cbf(theta_bar, alpha0) -> CbfCandidate:
    def h(x):
        th, om = x[..., 0], x[..., 1]
        return theta_bar ** 2 - th ** 2 - 0.5 * (om + th) ** 2

    def grad(x):
        th, om = x[..., 0], x[..., 1]
        s = om + th
        return np.stack([-2 * th - s, -s], axis=-1)

    def hess(x):
        return np.broadcast_to(np.array([[-3.0, -1.0], [-1.0, -1.0]]), x.shape + (2,))

    return _vec_cbf(h, grad, hess, ClassKInf.linear(alpha0))


def pendulum_system(m=1.0, l=1.0, g=9.81) -> ControlAffineSystem:
    def f(x):
        return np.stack([x[..., 1], g / l * np.sin(x[..., 0])], axis=-1)

    def gm(x):
        out = np.zeros(np.shape(x)[:-1] + (2, 1))
        out[..., 1, 0] = 1.0 / (m * l ** 2)
        return out

    return ControlAffineSystem(2, 1, f, gm, vectorized=True)


def _build_inverted_pendulum(P):
    sys = pendulum_system(P["m"], P["l"], P["g"])
    cbf = _pendulum_cbf(P["theta_bar"], P["alpha0"])
    zero = lambda x, t: np.zeros(np.shape(x)[:-1] + (1,))
    tb = P["theta_bar"]
    box = np.array([[-1.0, 1.0], [-1.0, 1.0]])

    def sampler(rng, n):
        return _rejection([[-tb, tb], [-3 * tb, 3 * tb]], lambda X: cbf(X) >= 0, rng, n)

    return dict(
        system=sys, controller=_filtered(sys, cbf, zero), x0=np.array([P["theta0"], P["thetadot0"]]),
        h=cbf, h0=lambda x: tb ** 2 - np.asarray(x)[..., 0] ** 2, cbf=cbf, sampler=sampler, box=box,
        vectorized=True,
        extras={"scan_samples": lambda seed: grid_box(box, 201), "levelset_box": [[-1.2, 1.2], [-2.5, 2.5]],
                "alpha": cbf.alpha},
    )


def double_integrator_cascade(dim: int = 1) -> CascadeTwoLayer:
    eye = np.eye(dim)

    def zeros(*args):
        return np.zeros(np.shape(args[0])[:-1] + (dim,))

    def ident(*args):
        return np.broadcast_to(eye, np.shape(args[0])[:-1] + (dim, dim))

    return CascadeTwoLayer(dim, dim, dim, zeros, ident, zeros, ident, True, vectorized=True)


def interval_h0(alpha: float = 1.0) -> CbfCandidate:
    """``h0(x) = 1 - x^2`` on a scalar position."""
    return _vec_cbf(lambda q: 1.0 - q[..., 0] ** 2, lambda q: -2.0 * q,
                    lambda q: np.broadcast_to(np.array([[-2.0]]), q.shape + (1,)), ClassKInf.linear(alpha))


def _build_double_int_1d(P):
    cas = double_integrator_cascade(1)
    h0 = interval_h0(P["alpha"])
    k0 = smooth_rom_controller(h0, MultiplierFormula("softplus", P["sigma"]), n=1)
    cbf = backstep(h0, k0, P["mu"], cas)
    sys = cbf.system

    def nominal(x, t):
        return -P["kp"] * (x[..., :1] - P["x_target"]) - P["kd"] * x[..., 1:]

    box = np.array([[-1.5, 1.5], [-3.0, 3.0]])

    def sampler(rng, n):
        return _rejection([[-1.0, 1.0], [-3.0, 3.0]], lambda X: cbf(X) >= 0, rng, n)

    def scan(seed):
        return np.concatenate([sample_box(box, 100_000, seed), _slice_samples(k0, box[:1], 2000, seed)])

    return dict(system=sys, controller=_filtered(sys, cbf, nominal), x0=np.array([P["x0"], P["v0"]]),
                h=cbf, h0=lambda x: 1.0 - np.asarray(x)[..., 0] ** 2, cbf=cbf, sampler=sampler, box=box,
                vectorized=True,
                extras={"scan_samples": scan, "levelset_box": [[-1.5, 1.5], [-3.0, 3.0]], "k0": k0,
                        "h0_fun": h0, "alpha": cbf.alpha})


def obstacle_h0(qo, radius, alpha: float = 1.0) -> CbfCandidate:
    qo = np.asarray(qo, dtype=float)
    return _vec_cbf(lambda q: 0.5 * (np.sum((q - qo) ** 2, axis=-1) - radius ** 2),
                    lambda q: q - qo,
                    lambda q: np.broadcast_to(np.eye(len(qo)), q.shape + (len(qo),)),
                    ClassKInf.linear(alpha))


def goal_rom_controller(h0: CbfCandidate, formula: MultiplierFormula, qg, kp: float) -> RomController:
    qg = np.asarray(qg, dtype=float)
    n = len(qg)
    return smooth_rom_controller(
        h0, formula, nominal=lambda q: kp * (qg - q),
        nominal_jac=lambda q: np.broadcast_to(-kp * np.eye(n), q.shape + (n,)), n=n)


def relu_rom_controller(h0: CbfCandidate, qg, kp: float) -> Callable:
    """Non-smooth ROM safety filter around the goal-seeking nominal, for comparison."""
    qg = np.asarray(qg, dtype=float)
    flt = SafetyFilter(h0, lambda q: kp * (qg - q), RELU)
    rom = ControlAffineSystem(len(qg), len(qg), lambda q: np.zeros_like(q),
                              lambda q: np.broadcast_to(np.eye(len(qg)), q.shape + (len(qg),)), True)
    return lambda q: filter_input(flt, rom, q)


def _build_double_int_obstacle(P):
    qo = np.array([P["qo_x"], P["qo_y"]])
    qg = np.array([P["qg_x"], P["qg_y"]])
    h0 = obstacle_h0(qo, P["radius"], P["alpha"])
    k0 = goal_rom_controller(h0, _formula(P), qg, P["kp"])
    cas = double_integrator_cascade(2)
    cbf = backstep(h0, k0, P["mu"], cas)
    sys = cbf.system

    def nominal(x, t):
        q, v = x[:2], x[2:]
        return k0.jacobian(q) @ v + P["kv"] * (k0(q) - v)

    box = np.array([[-0.5, 2.5], [-0.5, 2.5], [-2.0, 2.0], [-2.0, 2.0]])

    def scan(seed):
        return np.concatenate([sample_box(box, 20_000, seed), _slice_samples(k0, box[:2], 2000, seed)])

    def sampler(rng, n):
        return _rejection(box, lambda X: (cbf(X) >= 0), rng, n)

    return dict(system=sys, controller=_filtered(sys, cbf, nominal),
                x0=np.array([P["x0"], P["y0"], 0.0, 0.0]), h=cbf, h0=lambda x: h0(np.asarray(x)[..., :2]),
                cbf=cbf, sampler=sampler, box=box,
                extras={"scan_samples": scan, "k0": k0, "goal": qg, "h0_fun": h0,
                        "relu_k0": relu_rom_controller(h0, qg, P["kp"]), "alpha": cbf.alpha})


def unicycle_cascade() -> MixedCascadeTwoLayer:
    """Lifted unicycle on ``(q, xi)`` with ``xi = (cos psi, sin psi)``; inputs ``(v, omega)``."""

    def zeros2(*args):
        return np.zeros(np.shape(args[0])[:-1] + (2,))

    def no_xi(q):
        return np.zeros(np.shape(q)[:-1] + (2, 2))

    def g0_u(q, xi):
        return np.asarray(xi)[..., :, None]

    def g1_u(q, xi):
        xi = np.asarray(xi)
        return np.stack([-xi[..., 1], xi[..., 0]], axis=-1)[..., :, None]

    return MixedCascadeTwoLayer(2, 2, 1, 1, zeros2, no_xi, g0_u, zeros2, g1_u, True)


def _build_unicycle(P):
    qo = np.array([P["qo_x"], P["qo_y"]])
    qg = np.array([P["qg_x"], P["qg_y"]])
    h0 = obstacle_h0(qo, P["radius"], P["alpha"])
    k0 = goal_rom_controller(h0, _formula(P), qg, P["kp"])
    split = heading_split(k0)
    cas = unicycle_cascade()
    cbf = mixed_backstep(h0, split, P["mu"], cas)
    sys = cbf.system

    def nominal(x, t):
        q, xi = x[:2], x[2:]
        psi0 = split.k0_xi(q)
        return np.array([P["kp"] * np.linalg.norm(q - qg), -P["kpsi"] * (xi[1] - psi0[1])])

    def events(x, t):
        q, xi = x[:2], x[2:]
        k = k0(q)
        if np.linalg.norm(k) <= 1e-6:
            return "singular_rom_velocity"
        ang = np.arctan2(xi[1], xi[0]) - np.arctan2(k[1], k[0])
        if abs(np.angle(np.exp(1j * ang))) > np.pi / 2:
            return "heading_error_above_90deg"
        return None

    box = np.array([[-0.5, 2.5], [-0.5, 2.5]])

    def on_circle(Q, psi):
        return np.column_stack([Q, np.cos(psi), np.sin(psi)])

    def scan(seed):
        rng = np.random.default_rng(seed)
        Q = sample_box(box, 20_000, seed)
        Q = Q[np.linalg.norm(np.array([k0(q) for q in Q]), axis=1) > 1e-6]
        X = on_circle(Q, rng.uniform(-np.pi, np.pi, len(Q)))
        S = np.array([np.concatenate([q, split.k0_xi(q)]) for q in Q[:2000]])
        return np.concatenate([X, S])

    def sampler(rng, n):
        def draw(rng_, m):
            Q = rng_.uniform(box[:, 0], box[:, 1], size=(m, 2))
            return on_circle(Q, rng_.uniform(-np.pi, np.pi, m))
        out = []
        while sum(len(o) for o in out) < n:
            X = draw(rng, 512)
            out.append(X[np.array([cbf(x) >= 0 for x in X])])
        return np.concatenate(out)[:n]

    psi = P["psi0"]
    return dict(system=sys, controller=_filtered(sys, cbf, nominal),
                x0=np.array([P["x0"], P["y0"], np.cos(psi), np.sin(psi)]), h=cbf,
                h0=lambda x: h0(np.asarray(x)[..., :2]), cbf=cbf, sampler=sampler, box=None,
                event_fn=events,
                extras={"scan_samples": scan, "k0": k0, "split": split, "goal": qg, "h0_fun": h0,
                        "cascade": cas, "alpha": cbf.alpha})


def double_pendulum_h0(l1, l2, x_bar, alpha=1.0) -> CbfCandidate:
    def px_parts(q):
        s1, c1 = np.sin(q[..., 0]), np.cos(q[..., 0])
        s12, c12 = np.sin(q[..., 0] + q[..., 1]), np.cos(q[..., 0] + q[..., 1])
        return l1 * s1 + l2 * s12, l1 * c1 + l2 * c12, l2 * c12, l1 * s1 + l2 * s12, l2 * s12

    def h(q):
        px = px_parts(q)[0]
        return x_bar ** 2 - px ** 2

    def grad(q):
        px, d1, d2, _, _ = px_parts(q)
        return -2.0 * px[..., None] * np.stack([d1, d2], axis=-1)

    def hess(q):
        px, d1, d2, s_all, s12 = px_parts(q)
        dp = np.stack([d1, d2], axis=-1)
        Hp = -np.stack([np.stack([s_all, s12], -1), np.stack([s12, s12], -1)], -2)
        return -2.0 * (dp[..., :, None] * dp[..., None, :] + px[..., None, None] * Hp)

    return _vec_cbf(h, grad, hess, ClassKInf.linear(alpha))


def _build_double_pendulum(P):
    el = double_pendulum_model(P["m1"], P["m2"], P["l1"], P["l2"], P["g"])
    h0 = double_pendulum_h0(P["l1"], P["l2"], P["x_bar"], P["alpha"])
    k0 = smooth_rom_controller(h0, MultiplierFormula("softplus", P["sigma"]), n=2)
    e = EnergyCbf(h0, k0, P["mu"], el)
    sys = el_to_affine(el)

    def controller(x, t):
        return energy_filter_input(e, lambda q, qd: -qd, x[:2], x[2:], RELU)

    cbf = e.as_cbf()
    box = np.array([[-np.pi, np.pi], [-np.pi, np.pi], [-3.0, 3.0], [-3.0, 3.0]])

    def scan(seed):
        return np.concatenate([sample_box(box, 5000, seed), _slice_samples(k0, box[:2], 1000, seed)])

    def sampler(rng, n):
        out = []
        while sum(len(o) for o in out) < n:
            X = rng.uniform(box[:, 0], box[:, 1], size=(256, 4))
            out.append(X[np.array([cbf(x) >= 0 for x in X])])
        return np.concatenate(out)[:n]

    return dict(system=sys, controller=controller,
                x0=np.array([P["theta1_0"], P["theta2_0"], 0.0, 0.0]),
                h=lambda x: energy_cbf_value(e, x[:2], x[2:]), h0=lambda x: h0(np.asarray(x)[..., :2]),
                cbf=cbf, sampler=sampler, box=box,
                extras={"scan_samples": scan, "energy": e, "el": el, "k0": k0, "h0_fun": h0,
                        "alpha": cbf.alpha, "energy_ab": energy_ab})


def cartpole_h0(alpha=1.0) -> CbfCandidate:
    c = (np.pi / 6) ** 2
    return _vec_cbf(lambda th: c - (th[..., 0] - np.pi) ** 2, lambda th: -2.0 * (th - np.pi),
                    lambda th: np.broadcast_to(np.array([[-2.0]]), th.shape + (1,)), ClassKInf.linear(alpha))


def _build_cartpole(P):
    el = cartpole_model(P["mc"], P["mp"], P["l"], P["g"])
    h0 = cartpole_h0(P["alpha"])
    k02 = smooth_rom_controller(h0, MultiplierFormula("softplus", P["sigma"]), n=1)
    cbf = underactuated_cbf(el, "passive", h0, k02, P["mu"])
    sys = cbf.system

    def theta_d(t):
        return np.pi + P["theta_amp"] * np.sin(P["theta_freq"] * t)

    def nominal(x, t):
        return np.array([-P["k_theta"] * (x[1] - theta_d(t)) - P["k_thetadot"] * x[3]])

    lo, hi = 5 * np.pi / 6, 7 * np.pi / 6
    box = np.array([[-1.0, 1.0], [lo - 0.2, hi + 0.2], [-2.0, 2.0], [-2.0, 2.0]])

    def scan(seed):
        X = sample_box(box, 5000, seed)
        Q = sample_box(box[:2], 1000, seed + 1)
        V = sample_box(box[2:3], 1000, seed + 2)
        S = np.array([[q[0], q[1], v[0], float(k02(q[1:])[0])] for q, v in zip(Q, V)])
        return np.concatenate([X, S])

    def sampler(rng, n):
        out = []
        while sum(len(o) for o in out) < n:
            X = rng.uniform(box[:, 0], box[:, 1], size=(256, 4))
            out.append(X[np.array([cbf(x) >= 0 for x in X])])
        return np.concatenate(out)[:n]

    return dict(system=sys, controller=_filtered(sys, cbf, nominal), x0=np.array([0.0, np.pi, 0.0, 0.0]),
                h=cbf, h0=lambda x: h0(np.asarray(x)[..., 1:2]), cbf=cbf, sampler=sampler, box=box,
                extras={"scan_samples": scan, "el": el, "k0": k02, "h0_fun": h0, "theta_d": theta_d,
                        "alpha": cbf.alpha})


def wall_h0(p_max) -> CbfCandidate:
    return _vec_cbf(lambda q: p_max - q[..., 0],
                    lambda q: np.broadcast_to(np.array([-1.0, 0.0]), q.shape),
                    lambda q: np.zeros(q.shape + (2,)))


def _segway_common(P, k0: Callable, alpha: float, epsilon: float):
    el = segway_model(P["m0"], P["m"], P["J0"], P["L"], P["R"], P["bt"], P["Km"], P["g"])
    sys = el_to_affine(el)

    def controller(x, t):
        return np.array([P["k_pdot"] * (x[2] - float(k0(x[:2])[0])) + P["k_phi"] * x[1]
                         + P["k_phidot"] * x[3]])

    h0 = wall_h0(P["p_max"])
    spec = RomIssfSpec(h0, k0, alpha, epsilon, 2)

    def V(q, qd):
        e = qd - k0(q)
        return 0.5 * float(e @ el.D(q) @ e)

    return dict(system=sys, controller=controller, x0=np.zeros(4), h=None,
                h0=lambda x: P["p_max"] - np.asarray(x)[..., 0], cbf=None, sampler=None, box=None,
                extras={"el": el, "k0": k0, "spec": spec, "V": V, "n_q": 2, "h0_fun": h0,
                        "rom_box": [[-1.0, P["p_max"] + 1.0], [-0.5, 0.5]]})


def _build_segway_smooth(P):
    h0 = wall_h0(P["p_max"])
    h0 = CbfCandidate(h0.h, h0.grad_h, h0.hess_h, True, ClassKInf.linear(P["alpha"]))
    kd = np.array([P["pd_des"], 0.0])
    k0 = smooth_rom_controller(h0, _formula(P), nominal=lambda q: np.broadcast_to(kd, q.shape),
                               nominal_jac=lambda q: np.zeros(q.shape + (2,)), n=2, epsilon=P["epsilon"])
    return _segway_common(P, k0, P["alpha"], P["epsilon"])


def min_formula_k0(pd_des: float, p_max: float, alpha: float, epsilon: float) -> Callable:
    """``k0(q) = (min{pd_des, alpha (p_max - p) - 1/epsilon}, 0)``."""

    def k0(q):
        q = np.asarray(q, dtype=float)
        v = np.minimum(pd_des, alpha * (p_max - q[..., 0]) - 1.0 / epsilon)
        return np.stack([v, np.zeros_like(v)], axis=-1)

    return k0


def _build_segway_min(P):
    k0 = min_formula_k0(P["pd_des"], P["p_max"], P["alpha"], P["epsilon"])
    return _segway_common(P, k0, P["alpha"], P["epsilon"])


def truck_policies(D, v, vL, params):
    """Range policy ``V(D)``, speed policy ``W(vL)`` and safe distance ``rho(v, vL)``."""
    kappa, D_st, v_max, tau = params["kappa"], params["D_st"], params["v_max"], params["tau_h"]
    for name in ("kappa", "D_st", "v_max", "tau_h"):
        if not params[name] > 0:
            raise ValueError(f"truck parameter {name} must be positive")
    V = np.clip(kappa * (np.asarray(D, dtype=float) - D_st), 0.0, v_max)
    W = np.minimum(vL, v_max)
    rho = D_st + tau * np.asarray(v, dtype=float)
    return V, W, rho


def _build_truck(P):
    policy = str(P["policy"])
    if policy not in ("desired", "plain", "issf", "tissf"):
        raise ConfigError(f"truck.policy must be desired, plain, issf or tissf, got {policy!r}")
    tau_a = P["tau_act"]

    def lead_accel(vL, clock):
        return np.where(clock >= P["t_brake"], -P["brake"] * np.clip(vL / 0.05, 0.0, 1.0), 0.0)

    def f(x):
        D, v, vL, a, clock = x
        return np.array([vL - v, a, float(lead_accel(vL, clock)), -a / tau_a, 1.0])

    def g(x):
        out = np.zeros((5, 1))
        out[3, 0] = 1.0 / tau_a
        return out

    sys = ControlAffineSystem(5, 1, f, g)
    rom = ControlAffineSystem(3, 1, lambda q: np.array([q[2] - q[1], 0.0, 0.0]),
                              lambda q: np.array([[0.0], [1.0], [0.0]]))
    h0 = CbfCandidate(lambda q: float(q[0] - truck_policies(q[0], q[1], q[2], P)[2]),
                      lambda q: np.array([1.0, -P["tau_h"], 0.0]), None, False, ClassKInf.linear(P["alpha"]))

    def kd(q):
        V, W, _ = truck_policies(q[0], q[1], q[2], P)
        return np.array([P["A"] * (V - q[1]) + P["B"] * (W - q[1])])

    flt = SafetyFilter(h0, kd, RELU)
    if policy == "tissf":
        issf = IssfParams(lambda s: P["epsilon0"] * np.exp(np.asarray(s) / P["eps_scale"]))
    else:
        issf = IssfParams(P["epsilon"])

    def k0(q):
        if policy == "desired":
            return kd(q)
        if policy == "plain":
            return filter_input(flt, rom, q)
        return issf_filter_input(flt, rom, q, issf)

    def controller(x, t):
        return k0(x[:3])

    D0 = P["D_st"] + P["v0"] / P["kappa"]
    return dict(system=sys, controller=controller, x0=np.array([D0, P["v0"], P["v0"], 0.0, 0.0]),
                h=None, h0=lambda x: float(h0(np.asarray(x)[:3])), cbf=None, sampler=None, box=None,
                extras={"rom": rom, "h0_fun": h0, "k0": k0, "kd": kd, "issf": issf, "flt": flt,
                        "rom_box": [[P["D_st"], 60.0], [0.0, 25.0], [0.0, 25.0]]})


def triple_integrator_chain() -> MultiLayerCascade:
    def zero(z):
        return np.zeros(np.shape(z)[:-1] + (1,))

    def one(z):
        return np.ones(np.shape(z)[:-1] + (1, 1))

    return MultiLayerCascade((Layer(1, zero, one), Layer(1, zero, one), Layer(1, zero, one)), 1, True)


def _build_triple_integrator(P):
    multi = triple_integrator_chain()
    h0 = interval_h0(P["alpha"])
    form = MultiplierFormula("softplus", P["sigma"])
    cbf = recursive_backstep(h0, [None, None], [P["mu1"], P["mu2"]], multi, [form, form])
    sys = cbf.system

    def nominal(x, t):
        return -(x[..., :1] - P["x_target"]) - 3.0 * x[..., 1:2] - 3.0 * x[..., 2:3]

    box = np.array([[-1.5, 1.5], [-3.0, 3.0], [-6.0, 6.0]])
    k_inner = cbf.k0

    def scan(seed):
        Q = sample_box(box[:2], 2000, seed)
        S = np.column_stack([Q, k0_inner_values(k_inner, Q)])
        return np.concatenate([sample_box(box, 20_000, seed), S])

    def sampler(rng, n):
        return _rejection(box, lambda X: cbf(X) >= 0, rng, n)

    return dict(system=sys, controller=_filtered(sys, cbf, nominal),
                x0=np.array([P["x0"], P["v0"], P["a0"]]), h=cbf,
                h0=lambda x: 1.0 - np.asarray(x)[..., 0] ** 2, cbf=cbf, sampler=sampler, box=box,
                vectorized=cbf.vectorized,
                extras={"scan_samples": scan, "multi": multi, "h0_fun": h0, "alpha": cbf.alpha})


def k0_inner_values(k: RomController, Q) -> np.ndarray:
    return np.asarray(k(Q), dtype=float)[..., 0]


def _build_hocbf(P):
    cas = double_integrator_cascade(1)
    h0 = interval_h0(P["alpha"])
    barrier = str(P["barrier"])
    if barrier == "extended":
        cbf, member = extended_cbf(h0, cas, P["alpha0"], ClassKInf.linear(P["alpha"]))
    elif barrier == "naive":
        cbf = CbfCandidate(lambda x: h0(x[..., :1]),
                           lambda x: np.concatenate([h0.gradient(x[..., :1]), np.zeros_like(x[..., 1:])], -1),
                           None, True, ClassKInf.linear(P["alpha"]))
        member = lambda x: np.asarray(cbf(x)) >= 0
    else:
        raise ConfigError(f"hocbf_counterexample.barrier must be extended or naive, got {barrier!r}")
    sys = lift_cascade(cas)

    def nominal(x, t):
        return np.full(np.shape(x)[:-1] + (1,), P["push"])

    box = np.array([[-1.0, 1.0], [-3.0, 3.0]])

    def scan(seed):
        X = grid_box(box, (201, 301))
        return X[np.asarray(member(X), dtype=bool)]

    def sampler(rng, n):
        return _rejection(box, member, rng, n)

    return dict(system=sys, controller=_filtered(sys, cbf, nominal), x0=np.array([P["x0"], P["v0"]]),
                h=cbf, h0=lambda x: 1.0 - np.asarray(x)[..., 0] ** 2, cbf=cbf, sampler=sampler, box=box,
                vectorized=True,
                extras={"scan_samples": scan, "member": member, "levelset_box": [[-1.5, 1.5], [-3.0, 3.0]],
                        "expect_violation": True, "alpha": cbf.alpha})


_BUILDERS = {
    "inverted_pendulum": _build_inverted_pendulum,
    "double_int_1d": _build_double_int_1d,
    "double_int_obstacle": _build_double_int_obstacle,
    "unicycle": _build_unicycle,
    "double_pendulum": _build_double_pendulum,
    "cartpole": _build_cartpole,
    "segway_smooth": _build_segway_smooth,
    "segway_min": _build_segway_min,
    "truck": _build_truck,
    "triple_integrator": _build_triple_integrator,
    "hocbf_counterexample": _build_hocbf,
}
assert set(_BUILDERS) == set(DEFAULTS)


def list_scenarios():
    return list(NAMES)


def params_for(name: str, overrides: Optional[dict] = None) -> dict:
    if name not in DEFAULTS:
        raise UnknownScenarioError(name)
    P = dict(DEFAULTS[name])
    for key, value in (overrides or {}).items():
        if key not in P:
            raise ConfigError(f"unknown key {name}.{key}{_suggest(key, P)}")
        P[key] = value
    return P


def build(name: str, overrides: Optional[dict] = None, sim: Optional[dict] = None) -> Scenario:
    """Build a registered scenario with optional parameter and ``sim`` overrides."""
    P = params_for(name, overrides)
    parts = _BUILDERS[name](P)
    sim = dict(sim or {})
    dt = float(sim.get("dt") or P.get("dt", SIM_DEFAULTS["dt"]))
    horizon = float(sim.get("horizon") or P["horizon"])
    tol_inv = float(sim.get("tol_inv") or SIM_DEFAULTS["tol_inv"])
    return Scenario(name=name, horizon=horizon, dt=dt, tol_inv=tol_inv, params=P,
                    vectorized=parts.pop("vectorized", False), **parts)
