"""Safety through tracking a safe reduced-order model.

The ROM controller ``k0`` need not be smooth here. Safety of the full-order
system follows from how well the tracking error ``d = xi - k0(q)`` decays,
captured either by a Lyapunov certificate or by an explicit bound
``|d(t)|^2 <= M exp(-gamma t) + delta``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DEFAULT_SEED, ClassKInf, ControlAffineSystem, lie_derivatives, sample_box
from .filters import CbfCandidate


@dataclass(frozen=True)
class RomIssfSpec:
    """ROM barrier ``h0`` on ``q`` (dimension ``n``) with feedback ``k0`` and scalar rates.

    ``rom=None`` means the single integrator ``qdot = xi``.
    """

    h0: CbfCandidate
    k0: Callable
    alpha: float
    epsilon: float
    n: int
    rom: Optional[ControlAffineSystem] = None

    def __post_init__(self):
        if not (self.alpha > 0 and self.epsilon > 0):
            raise ValueError("alpha and epsilon must be positive")

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.n], x[..., self.n:]

    def error(self, x):
        q, xi = self.split(x)
        return xi - np.asarray(self.k0(q), dtype=float)


@dataclass(frozen=True)
class TrackingCertificate:
    """Lyapunov function ``V(q, xi)`` with sandwich constants and decay rate."""

    V: Callable
    gamma1: float
    gamma2: float
    gamma: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.gamma1 > 0 and self.gamma2 >= self.gamma1 and self.gamma > 0):
            raise ValueError("need 0 < gamma1 <= gamma2 and gamma > 0")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


@dataclass(frozen=True)
class TrackingBoundParams:
    """Constants of ``|d(t)|^2 <= M exp(-gamma t) + delta``."""

    M: float
    gamma: float
    delta: float

    def bound(self, t):
        return self.M * np.exp(-self.gamma * np.asarray(t, dtype=float)) + self.delta

    def holds(self, t, d_sq, tol: float = 1e-6) -> bool:
        return bool(np.all(np.asarray(d_sq) <= self.bound(t) + tol))


def _barrier(spec: RomIssfSpec, V: Callable, mu: float, offset: float) -> CbfCandidate:
    if not mu > 0:
        raise ValueError("mu must be positive")

    def h(x):
        q, xi = spec.split(x)
        return float(spec.h0(q)) - float(V(q, xi)) / mu + offset

    return CbfCandidate(h, None, None, False, ClassKInf.linear(spec.alpha))


def lyapunov_barrier(spec: RomIssfSpec, cert: TrackingCertificate, mu: float) -> CbfCandidate:
    """``h = h0 - V / (mu gamma1)`` on ``x = (q, xi)``."""
    if cert.delta != 0:
        raise ValueError("exact-tracking barrier needs delta = 0; use iss_lyapunov_barrier")
    return _barrier(spec, cert.V, mu * cert.gamma1, 0.0)


def iss_lyapunov_barrier(spec: RomIssfSpec, cert: TrackingCertificate, mu: float) -> CbfCandidate:
    """``h = h0 - (V - delta / alpha) / (mu gamma1)``: the safe set inflated by the tracking offset."""
    return _barrier(spec, cert.V, mu * cert.gamma1, cert.delta / (spec.alpha * mu * cert.gamma1))


def timevarying_barrier(spec: RomIssfSpec, bound: TrackingBoundParams, mu: float) -> Callable:
    """``h(q, xi, t) = h0(q) - (M / mu) exp(-gamma t) + epsilon delta / (4 alpha)``.

    Returns a callable of ``(x, t)`` with ``x = (q, xi)``; it accepts a batch
    of states with matching times.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    offset = spec.epsilon * bound.delta / (4.0 * spec.alpha)

    def h(x, t):
        q, _ = spec.split(x)
        return (np.asarray(spec.h0(q), dtype=float)
                - bound.M / mu * np.exp(-bound.gamma * np.asarray(t, dtype=float)) + offset)

    return h


@dataclass(frozen=True)
class ConditionCheck:
    satisfied: bool
    margin: float


def safety_condition_check(alpha: float, epsilon: float, mu: float, gamma: float) -> ConditionCheck:
    """Check ``gamma >= alpha + epsilon mu / 4``."""
    margin = gamma - alpha - epsilon * mu / 4.0
    return ConditionCheck(bool(margin >= 0), float(margin))


@dataclass
class ConditionRow:
    alpha: float
    epsilon: float
    mu: float
    gamma_fit: float
    margin: float
    safe: bool
    min_h0: float


def condition_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "epsilon", "mu", "gamma_fit", "margin", "safe", "min_h0"])
    for r in rows:
        w.writerow([repr(float(r.alpha)), repr(float(r.epsilon)), repr(float(r.mu)),
                    repr(float(r.gamma_fit)), repr(float(r.margin)), int(r.safe), repr(float(r.min_h0))])
    return buf.getvalue()


@dataclass
class RomIssfReport:
    states: np.ndarray
    margin: np.ndarray
    tol: float = 1e-9

    @property
    def violation_mask(self):
        return self.margin < -self.tol

    @property
    def n_violations(self) -> int:
        return int(np.count_nonzero(self.violation_mask))

    @property
    def min_margin(self) -> float:
        return float(self.margin.min()) if self.margin.size else float("inf")

    @property
    def violating_states(self):
        return self.states[self.violation_mask]


def rom_issf_margin(spec: RomIssfSpec, q, epsilon: Optional[float] = None) -> float:
    """``Lf0 h0 + Lg0 h0 k0 + alpha h0 - |Lg0 h0|^2 / epsilon``; ``epsilon=inf`` drops the last term."""
    q = np.asarray(q, dtype=float)
    eps = spec.epsilon if epsilon is None else epsilon
    if spec.rom is None:
        lfh, lgh = 0.0, spec.h0.gradient(q)
    else:
        lfh, lgh = lie_derivatives(spec.rom, spec.h0, q)
    k = np.atleast_1d(np.asarray(spec.k0(q), dtype=float))
    return float(lfh + lgh @ k + spec.alpha * float(spec.h0(q)) - (lgh @ lgh) / eps)


def rom_issf_scan(spec: RomIssfSpec, domain_box=None, n_samples: int = 10_000, samples=None,
                  seed: int = DEFAULT_SEED, epsilon: Optional[float] = None,
                  tol: float = 1e-9) -> RomIssfReport:
    """Sample the ROM ISSf condition; nonstrict, with ``tol`` for roundoff."""
    Q = np.atleast_2d(np.asarray(samples, dtype=float)) if samples is not None \
        else sample_box(domain_box, n_samples, seed)
    margin = np.array([rom_issf_margin(spec, q, epsilon) for q in Q])
    return RomIssfReport(Q, margin, tol)


def young_gap(a_norm, d_norm, epsilon):
    """``|a|^2 / eps + eps |d|^2 / 4 - |a| |d|``, nonnegative by completing the square."""
    a_norm = np.asarray(a_norm, dtype=float)
    d_norm = np.asarray(d_norm, dtype=float)
    return a_norm ** 2 / epsilon + epsilon * d_norm ** 2 / 4.0 - a_norm * d_norm


def tracking_error_sq(traj, k0: Callable, n_q: int) -> np.ndarray:
    q = traj.states[:, :n_q]
    xi = traj.states[:, n_q:]
    return np.array([float(np.sum((xi[k] - np.atleast_1d(k0(q[k]))) ** 2)) for k in range(len(q))])


def fit_error_bound(t, d_sq, tail_frac: float = 0.2, tol: float = 1e-6) -> TrackingBoundParams:
    """Fit ``(M, gamma, delta)`` to samples of ``|d|^2``.

    ``delta`` is the largest value over the trailing ``tail_frac`` of the
    horizon, ``gamma`` comes from a log-linear fit of the running-max
    envelope above ``delta``, and ``M`` is raised until the bound covers
    every sample.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(d_sq, dtype=float)
    if len(s) < 10:
        raise ValueError("need at least 10 samples to fit a tracking bound")
    tail = t >= t[0] + (1.0 - tail_frac) * (t[-1] - t[0])
    delta = float(s[tail].max())
    env = np.maximum.accumulate(s[::-1])[::-1] - delta
    keep = env > max(1e-3 * env.max(), tol)
    fallback = TrackingBoundParams(0.0, 0.0, float(s.max()))
    if np.count_nonzero(keep) < 2:
        return fallback
    slope = np.polyfit(t[keep], np.log(env[keep]), 1)[0]
    gamma = float(-slope)
    if not gamma > 0:
        return fallback
    return TrackingBoundParams(_covering_M(t, s, delta, gamma), gamma, delta)


def _covering_M(t, s, delta, gamma) -> float:
    """Smallest ``M`` with ``s <= M exp(-gamma t) + delta``, computed in log space."""
    excess = s - delta
    pos = excess > 0
    if not np.any(pos):
        return 0.0
    with np.errstate(over="ignore"):
        return float(np.exp(np.max(np.log(excess[pos]) + gamma * t[pos])))


def tracking_bound_fit(traj, k0: Callable, n_q: int, tail_frac: float = 0.2,
                       tol: float = 1e-6) -> TrackingBoundParams:
    """Fit the tracking-error bound constants along a simulated trajectory."""
    return fit_error_bound(traj.times, tracking_error_sq(traj, k0, n_q), tail_frac, tol)



def fit_certified_bound(t, d_sq, alpha: float, epsilon: float, tail_frac: float = 0.2,
                        gammas=None) -> tuple:
    """Tracking bound chosen to make the time-varying barrier least conservative.

    ``delta`` is the largest value over the trailing ``tail_frac`` of the
    horizon. Every ``gamma`` on the grid (default: geometric above ``alpha``)
    gets the smallest covering ``M`` and the largest admissible
    ``mu = 4 (gamma - alpha) / epsilon``; the pair with the smallest barrier
    offset ``M / mu`` wins. Returns ``(bound, mu)``.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(d_sq, dtype=float)
    if len(s) < 10:
        raise ValueError("need at least 10 samples to fit a tracking bound")
    if not (alpha > 0 and epsilon > 0):
        raise ValueError("alpha and epsilon must be positive")
    tail = t >= t[0] + (1.0 - tail_frac) * (t[-1] - t[0])
    delta = float(s[tail].max())
    if gammas is None:
        gammas = alpha * np.geomspace(1.01, 1e3, 400)
    gammas = np.asarray(gammas, dtype=float)
    gammas = gammas[gammas > alpha]
    if gammas.size == 0:
        raise ValueError("need at least one gamma above alpha")
    best = None
    for g in gammas:
        M = _covering_M(t, s, delta, g)
        mu = 4.0 * (g - alpha) / epsilon
        if best is None or M / mu < best[0]:
            best = (M / mu, TrackingBoundParams(M, float(g), delta), mu)
    return best[1], best[2]


@dataclass
class CertificateReport:
    sandwich_ok: bool
    worst_decay_residual: float
    decay_ok: bool
    details: dict = field(default_factory=dict)


def certificate_check(spec: RomIssfSpec, cert: TrackingCertificate, traj=None, samples=None,
                      tol: float = 1e-6) -> CertificateReport:
    """Check the sandwich bounds on samples and ``Vdot <= -gamma V + delta`` along ``traj``."""
    sandwich_ok = True
    if samples is not None:
        for x in np.atleast_2d(samples):
            q, xi = spec.split(x)
            e2 = float(np.sum(spec.error(x) ** 2))
            v = float(cert.V(q, xi))
            if v < cert.gamma1 * e2 - tol or v > cert.gamma2 * e2 + tol:
                sandwich_ok = False
                break
    worst = float("inf")
    if traj is not None:
        V = np.array([float(cert.V(*spec.split(x))) for x in traj.states])
        vdot = (V[2:] - V[:-2]) / (2.0 * traj.dt)
        res = -cert.gamma * V[1:-1] + cert.delta - vdot
        worst = float(res.min())
    return CertificateReport(sandwich_ok, worst, worst >= -tol)
