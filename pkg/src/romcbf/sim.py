"""Fixed-step RK4 closed-loop simulation and forward-invariance monitoring.

The controller is evaluated once per step at the step's initial state and
held constant over the four RK4 stages (zero-order hold).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DEFAULT_SEED, ClassKInf, ControlAffineSystem

DEFAULT_DT = 1e-3
DEFAULT_TOL_INV = 1e-4
DIVERGENCE_NORM = 1e12


@dataclass
class Scenario:
    """A closed loop ready to simulate.

    ``controller(x, t)`` returns the input; ``h`` and ``h0`` map full states
    to the barrier and constraint values. ``sampler(rng, n)`` draws initial
    states for sweeps.
    """

    name: str
    system: ControlAffineSystem
    controller: Callable
    x0: np.ndarray
    horizon: float
    dt: float = DEFAULT_DT
    h: Optional[Callable] = None
    h0: Optional[Callable] = None
    cbf: Optional[object] = None
    sampler: Optional[Callable] = None
    box: Optional[np.ndarray] = None
    tol_inv: float = DEFAULT_TOL_INV
    vectorized: bool = False
    event_fn: Optional[Callable] = None
    params: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    dt: float
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    h_values: Optional[np.ndarray] = None
    h0_values: Optional[np.ndarray] = None
    events: list = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return any(tag == "divergence" for _, tag in self.events)

    def to_csv(self) -> str:
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.ndim == 2 else 0
        header = ["t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)]
        if self.h_values is not None:
            header.append("h")
        if self.h0_values is not None:
            header.append("h0")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        fmt = "{:.17g}".format
        for k in range(len(self.times)):
            row = [fmt(self.times[k])] + [fmt(v) for v in self.states[k]]
            row += [fmt(v) for v in self.inputs[k]] if k < len(self.inputs) else [""] * m
            if self.h_values is not None:
                row.append(fmt(self.h_values[k]))
            if self.h0_values is not None:
                row.append(fmt(self.h0_values[k]))
            w.writerow(row)
        return buf.getvalue()


def rk4_step(sys: ControlAffineSystem, x, u, dt: float):
    k1 = sys.dynamics(x, u)
    k2 = sys.dynamics(x + 0.5 * dt * k1, u)
    k3 = sys.dynamics(x + 0.5 * dt * k2, u)
    k4 = sys.dynamics(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _n_steps(horizon: float, dt: float) -> int:
    if not dt > 0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    return int(round(horizon / dt))


def _evaluate(fun, states, vectorized):
    if fun is None:
        return None
    if vectorized:
        return np.asarray(fun(states), dtype=float)
    return np.array([float(fun(x)) for x in states])


def integrate(scenario: Scenario, x0=None, dt: Optional[float] = None,
              horizon: Optional[float] = None) -> Trajectory:
    """Simulate one initial condition.

    Non-finite states, or states beyond ``DIVERGENCE_NORM``, stop the run with a
    divergence event.
    """
    sys = scenario.system
    dt = scenario.dt if dt is None else dt
    horizon = scenario.horizon if horizon is None else horizon
    steps = _n_steps(horizon, dt)
    x = sys.check_state(scenario.x0 if x0 is None else x0).astype(float).copy()
    states = np.empty((steps + 1, sys.n))
    inputs = np.empty((steps, sys.m))
    states[0] = x
    events = []
    last_tag = None
    k_end = steps
    for k in range(steps):
        t = k * dt
        if scenario.event_fn is not None:
            tag = scenario.event_fn(x, t)
            if tag is not None and tag != last_tag:
                events.append((t, tag))
            last_tag = tag
        u = np.asarray(scenario.controller(x, t), dtype=float).reshape(sys.m)
        inputs[k] = u
        try:
            with np.errstate(all="ignore"):
                x = rk4_step(sys, x, u, dt)
        except (np.linalg.LinAlgError, FloatingPointError):
            x = np.full(sys.n, np.nan)
        if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) < DIVERGENCE_NORM):
            events.append(((k + 1) * dt, "divergence"))
            k_end = k
            break
        states[k + 1] = x
    states = states[: k_end + 1]
    inputs = inputs[: k_end]
    times = dt * np.arange(len(states))
    return Trajectory(dt, times, states, inputs,
                      _evaluate(scenario.h, states, scenario.vectorized),
                      _evaluate(scenario.h0, states, scenario.vectorized), events)


def integrate_batch(scenario: Scenario, X0, dt: Optional[float] = None,
                    horizon: Optional[float] = None) -> list:
    """Simulate many initial conditions at once; needs a vectorized scenario."""
    if not scenario.vectorized:
        return [integrate(scenario, x0, dt, horizon) for x0 in np.atleast_2d(X0)]
    sys = scenario.system
    dt = scenario.dt if dt is None else dt
    horizon = scenario.horizon if horizon is None else horizon
    steps = _n_steps(horizon, dt)
    X = np.array(np.atleast_2d(X0), dtype=float)
    N = len(X)
    states = np.empty((steps + 1, N, sys.n))
    inputs = np.empty((steps, N, sys.m))
    states[0] = X
    alive = np.ones(N, dtype=bool)
    stop = np.full(N, steps)
    for k in range(steps):
        U = np.asarray(scenario.controller(X, k * dt), dtype=float).reshape(N, sys.m)
        inputs[k] = U
        with np.errstate(all="ignore"):
            X = rk4_step(sys, X, U, dt)
        with np.errstate(invalid="ignore"):
            ok = np.all(np.isfinite(X), axis=1) & (np.max(np.abs(X), axis=1) < DIVERGENCE_NORM)
        bad = alive & ~ok
        if np.any(bad):
            stop[bad] = k
            alive &= ~bad
            X[bad] = states[k][bad]
        states[k + 1] = X
    out = []
    for i in range(N):
        s = states[: stop[i] + 1, i]
        ev = [] if stop[i] == steps else [((stop[i] + 1) * dt, "divergence")]
        out.append(Trajectory(dt, dt * np.arange(len(s)), s, inputs[: stop[i], i],
                              None if scenario.h is None else np.asarray(scenario.h(s), dtype=float),
                              None if scenario.h0 is None else np.asarray(scenario.h0(s), dtype=float),
                              ev))
    return out


@dataclass
class InvarianceReport:
    min_h: float
    argmin_time: float
    argmin_state: np.ndarray
    min_h0: float
    violated: bool
    diverged: bool = False
    per_ic: list = field(default_factory=list)


def monitor(traj: Trajectory, tol_inv: float = DEFAULT_TOL_INV) -> InvarianceReport:
    """Minima of ``h`` (or ``h0`` if no ``h`` was recorded) along a trajectory."""
    vals = traj.h_values if traj.h_values is not None else traj.h0_values
    if vals is None:
        raise ValueError("trajectory has neither h nor h0 recorded")
    k = int(np.argmin(vals))
    min_h0 = float(np.min(traj.h0_values)) if traj.h0_values is not None else float("nan")
    row = {"min_h": float(vals[k]), "min_h0": min_h0, "violated": bool(vals[k] < -tol_inv),
           "diverged": traj.diverged}
    return InvarianceReport(float(vals[k]), float(traj.times[k]), traj.states[k].copy(), min_h0,
                            bool(vals[k] < -tol_inv), traj.diverged, [row])


def merge_reports(reports) -> InvarianceReport:
    reports = list(reports)
    best = min(reports, key=lambda r: r.min_h)
    per_ic = [row for r in reports for row in r.per_ic]
    min_h0 = min((r.min_h0 for r in reports), default=float("nan"))
    return InvarianceReport(best.min_h, best.argmin_time, best.argmin_state, min_h0,
                            any(r.violated for r in reports), any(r.diverged for r in reports), per_ic)


def sweep(scenario: Scenario, n: int, ic_sampler: Optional[Callable] = None,
          seed: int = DEFAULT_SEED, tol_inv: Optional[float] = None,
          dt: Optional[float] = None, horizon: Optional[float] = None):
    """Integrate ``n`` sampled initial conditions and merge their invariance reports.

    Returns ``(report, trajectories)``. Deterministic for a fixed seed.
    """
    sampler = ic_sampler or scenario.sampler
    if sampler is None:
        raise ValueError(f"scenario {scenario.name!r} has no initial-condition sampler")
    tol = scenario.tol_inv if tol_inv is None else tol_inv
    X0 = np.atleast_2d(sampler(np.random.default_rng(seed), n))
    trajs = integrate_batch(scenario, X0, dt, horizon)
    return merge_reports(monitor(t, tol) for t in trajs), trajs


@dataclass
class HdotReport:
    worst: float
    index: int
    flagged: bool
    residuals: np.ndarray


def hdot_check(traj: Trajectory, alpha: ClassKInf, tol: float = 1e-3,
               values: Optional[np.ndarray] = None) -> HdotReport:
    """Worst central-difference residual of ``hdot + alpha(h)`` over interior nodes."""
    h = traj.h_values if values is None else np.asarray(values, dtype=float)
    if h is None or len(h) < 3:
        raise ValueError("need at least three barrier samples")
    res = (h[2:] - h[:-2]) / (2.0 * traj.dt) + alpha(h[1:-1])
    k = int(np.argmin(res))
    return HdotReport(float(res[k]), k + 1, bool(res[k] < -tol), res)
