"""Closed-form safety filters.

All filters share the form ``u = k_d + lambda(a, b) * Lgh^T`` with
``a = Lfh + Lgh k_d + alpha(h)`` and ``b = |Lgh|^2``. The ReLU multiplier
solves the single-constraint QP exactly; the smooth multipliers over-approximate
it and satisfy the barrier inequality strictly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import erfcx, expit

from .core import (
    DEFAULT_SEED,
    ClassKInf,
    ConstraintFunction,
    ControlAffineSystem,
    lie_derivatives,
    sample_box,
)

KINDS = ("relu", "sontag", "half_sontag", "softplus", "gaussian")
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class MultiplierFormula:
    kind: str = "relu"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown multiplier kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "relu" and not self.sigma > 0:
            raise ValueError("smooth multipliers need sigma > 0")

    @property
    def smooth(self) -> bool:
        return self.kind != "relu"


def _safe_div(num, den):
    return num / np.where(den == 0, 1.0, den)


def _sontag_core(a, b, sigma):
    # -a + sqrt(a^2 + sigma b^2), rewritten for a > 0 to avoid cancellation
    r = np.sqrt(a * a + sigma * b * b)
    num = np.where(a > 0, _safe_div(sigma * b * b, a + r), r - a)
    return num, r


def mills_ratio(z):
    """``pdf(z) / cdf(z)`` of the standard normal, stable for all ``z``."""
    return _SQRT_2_OVER_PI / erfcx(-np.asarray(z, dtype=float) / np.sqrt(2.0))


def multiplier(formula: MultiplierFormula, a, b):
    """Lagrange multiplier ``lambda(a, b) >= 0`` for the chosen formula."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    kind, sigma = formula.kind, formula.sigma
    pos = b > 0
    if kind == "relu":
        return np.where(pos, np.maximum(0.0, -_safe_div(a, b)) + 0.0, 0.0)  # + 0.0 drops the sign of -0.0
    if kind in ("sontag", "half_sontag"):
        num, _ = _sontag_core(a, b, sigma)
        lam = np.where(b != 0, _safe_div(num, b), 0.0)
        return lam if kind == "sontag" else 0.5 * lam
    z = _safe_div(a, sigma * b)
    if kind == "softplus":
        return np.where(pos, sigma * np.logaddexp(0.0, -z), 0.0)
    return np.where(pos, sigma * mills_ratio(z), 0.0)


def multiplier_partials(formula: MultiplierFormula, a, b):
    """Partial derivatives ``(d lambda / d a, d lambda / d b)`` for ``b > 0``.

    Returns zeros where ``b <= 0`` (the multiplier is identically zero there
    for the CBF-relevant half plane).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    kind, sigma = formula.kind, formula.sigma
    pos = b > 0
    if kind == "relu":
        active = pos & (a < 0)
        return (np.where(active, -_safe_div(1.0, b), 0.0),
                np.where(active, _safe_div(a, b * b), 0.0))
    if kind in ("sontag", "half_sontag"):
        num, r = _sontag_core(a, b, sigma)
        lam = _safe_div(num, b)
        la = -_safe_div(lam, r)
        lb = _safe_div(sigma * b, r * b) - _safe_div(lam, b)
        scale = 1.0 if kind == "sontag" else 0.5
        return np.where(pos, scale * la, 0.0), np.where(pos, scale * lb, 0.0)
    z = _safe_div(a, sigma * b)
    if kind == "softplus":
        s = expit(-z)
        return np.where(pos, -_safe_div(s, b), 0.0), np.where(pos, s * _safe_div(a, b * b), 0.0)
    R = mills_ratio(z)
    dR = -R * (z + R)
    return np.where(pos, _safe_div(dR, b), 0.0), np.where(pos, -dR * _safe_div(a, b * b), 0.0)


@dataclass(frozen=True)
class CbfCandidate(ConstraintFunction):
    """Scalar barrier candidate ``h`` with its extended class-K function."""

    alpha: ClassKInf = field(default_factory=ClassKInf.linear)


@dataclass(frozen=True)
class SafetyFilter:
    cbf: CbfCandidate
    nominal: Callable
    formula: MultiplierFormula = field(default_factory=MultiplierFormula)


@dataclass(frozen=True)
class IssfParams:
    """Robustness parameter: constant ``epsilon`` or a function ``epsilon(h0)``."""

    epsilon: Union[float, Callable] = 1.0
    delta_bound: float = 0.0

    def eps_at(self, h0):
        if callable(self.epsilon):
            eps = np.asarray(self.epsilon(h0), dtype=float)
        else:
            eps = np.asarray(self.epsilon, dtype=float)
        if np.any(eps <= 0):
            raise ValueError("epsilon must be strictly positive")
        return eps


def ab_terms(sys: ControlAffineSystem, cbf: CbfCandidate, nominal, x):
    """Return ``(a, b)``; ``nominal`` is a callable or a precomputed ``k_d(x)``."""
    kd = nominal(x) if callable(nominal) else np.asarray(nominal, dtype=float)
    lfh, lgh = lie_derivatives(sys, cbf, x)
    a = lfh + np.einsum("...j,...j->...", lgh, kd) + cbf.alpha(cbf(x))
    b = np.einsum("...j,...j->...", lgh, lgh)
    return a, b


def _apply(flt: SafetyFilter, sys, x, kd, shift):
    x = np.asarray(x, dtype=float)
    kd = flt.nominal(x) if kd is None else np.asarray(kd, dtype=float)
    lfh, lgh = lie_derivatives(sys, flt.cbf, x)
    a = lfh + np.einsum("...j,...j->...", lgh, kd) + flt.cbf.alpha(flt.cbf(x))
    b = np.einsum("...j,...j->...", lgh, lgh)
    if shift is not None:
        a = a - shift(b)
    lam = multiplier(flt.formula, a, b)
    return kd + lam[..., None] * lgh


def filter_input(flt: SafetyFilter, sys: ControlAffineSystem, x, kd=None):
    """Filtered input ``k_d + lambda(a, b) Lgh^T``; ``kd`` overrides the nominal."""
    return _apply(flt, sys, x, kd, None)


def issf_filter_input(flt: SafetyFilter, sys: ControlAffineSystem, x, issf: IssfParams,
                      kd=None, h0: Optional[Callable] = None):
    """Input-to-state safe filter: ``a`` replaced by ``a - b / epsilon``.

    For a tunable ``epsilon(h0)`` the argument is ``h0(x)`` when given,
    otherwise the filter's own barrier value.
    """
    x = np.asarray(x, dtype=float)
    hval = h0(x) if h0 is not None else flt.cbf(x)
    eps = issf.eps_at(hval)
    return _apply(flt, sys, x, kd, lambda b: b / eps)


def issf_inflation(alpha: ClassKInf, epsilon: float, delta: float) -> float:
    """Safe-set inflation ``gamma(delta) = -alpha^{-1}(-epsilon delta^2 / 4)``."""
    try:
        return float(-alpha.inverse(-epsilon * delta ** 2 / 4.0))
    except NotImplementedError as exc:
        raise NotImplementedError("ISSf inflation needs an invertible class-K function") from exc


@dataclass
class ValidityReport:
    """Outcome of checking ``Lgh = 0 => Lfh + alpha(h) > 0`` on samples.

    Margins within ``tol_margin`` below zero are treated as roundoff: smooth
    multipliers give exact margins far below machine precision where they are
    strongly active.
    """

    states: np.ndarray
    h: np.ndarray
    norm_lgh: np.ndarray
    margin: np.ndarray
    tol_lgh: float
    band: float
    tol_margin: float = 1e-12

    @property
    def zero_mask(self) -> np.ndarray:
        return self.norm_lgh < self.tol_lgh

    @property
    def band_mask(self) -> np.ndarray:
        return self.norm_lgh < self.band

    @property
    def violation_mask(self) -> np.ndarray:
        return self.zero_mask & (self.margin < -self.tol_margin)

    @property
    def n_violations(self) -> int:
        return int(np.count_nonzero(self.violation_mask))

    @property
    def n_nonpositive(self) -> int:
        """Samples with ``margin <= 0`` exactly, ignoring ``tol_margin``."""
        return int(np.count_nonzero(self.zero_mask & (self.margin <= 0)))

    @property
    def violating_states(self) -> np.ndarray:
        return self.states[self.violation_mask]

    @property
    def min_margin(self) -> float:
        m = self.margin[self.zero_mask]
        return float(m.min()) if m.size else float("inf")

    @property
    def min_band_margin(self) -> float:
        m = self.margin[self.band_mask]
        return float(m.min()) if m.size else float("inf")

    def restrict(self, mask) -> "ValidityReport":
        mask = np.asarray(mask, dtype=bool)
        return ValidityReport(self.states[mask], self.h[mask], self.norm_lgh[mask],
                              self.margin[mask], self.tol_lgh, self.band, self.tol_margin)

    def to_csv(self) -> str:
        n = self.states.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{i}" for i in range(n)] + ["h", "norm_lgh", "margin", "violation"])
        viol = self.violation_mask
        for k in range(len(self.states)):
            w.writerow([repr(float(v)) for v in self.states[k]]
                       + [repr(float(self.h[k])), repr(float(self.norm_lgh[k])),
                          repr(float(self.margin[k])), int(viol[k])])
        return buf.getvalue()


def validity_scan(sys: ControlAffineSystem, cbf: CbfCandidate, domain_box=None,
                  n_samples: int = 10_000, tol_lgh: float = 1e-8, band: float = 1e-4,
                  samples=None, seed: int = DEFAULT_SEED, tol_margin: float = 1e-12) -> ValidityReport:
    """Evaluate the ``Lgh = 0`` validity condition on sampled states.

    Pass explicit ``samples`` (e.g. a grid) or a ``domain_box`` to sample
    uniformly at random with ``seed``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float)) if samples is not None \
        else sample_box(domain_box, n_samples, seed)
    if sys.vectorized and cbf.vectorized:
        lfh, lgh = lie_derivatives(sys, cbf, X)
        h = np.asarray(cbf(X), dtype=float)
    else:
        lfh = np.empty(len(X))
        lgh = np.empty((len(X), sys.m))
        h = np.empty(len(X))
        for k, x in enumerate(X):
            lfh[k], lgh[k] = lie_derivatives(sys, cbf, x)
            h[k] = float(cbf(x))
    margin = lfh + cbf.alpha(h)
    return ValidityReport(X, h, np.linalg.norm(lgh, axis=-1), margin, tol_lgh, band, tol_margin)
