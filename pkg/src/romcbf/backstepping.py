"""Full-order barrier functions built from reduced-order-model barriers.

A reduced-order model (ROM) ``qdot = f0(q) + g0(q) xi`` with barrier ``h0``
and a smooth controller ``k0`` satisfying the strict ROM condition yields

    h(q, xi) = h0(q) - |xi - k0(q)|^2 / (2 mu)

as a barrier for the cascade. The construction folds recursively for
strict-feedback chains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .core import (
    ClassKInf,
    ConstraintFunction,
    ControlAffineSystem,
    CascadeTwoLayer,
    MixedCascadeTwoLayer,
    MultiLayerCascade,
    fd_jacobian,
    lie_derivatives,
    lift_cascade,
    lift_mixed,
)
from .filters import CbfCandidate, MultiplierFormula, multiplier, multiplier_partials

DEFAULT_ROM_FORMULA = MultiplierFormula("softplus", 0.1)


class SingularDecompositionError(ValueError):
    """Raised when a ROM velocity is too small to define a heading."""


@dataclass(frozen=True)
class RomController:
    """ROM feedback ``k0(q)`` with its Jacobian (finite differences if absent)."""

    k0: Callable
    jac_k0: Optional[Callable] = None
    provenance: str = "user_supplied"
    vectorized: bool = False

    def __call__(self, q):
        return np.asarray(self.k0(np.asarray(q, dtype=float)), dtype=float)

    def jacobian(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.jac_k0 is not None:
            return np.asarray(self.jac_k0(q), dtype=float)
        return fd_jacobian(self.k0, q)


def _zero_nominal(p):
    return lambda q: np.zeros(np.shape(q)[:-1] + (p,))


def smooth_rom_controller(h0: CbfCandidate, formula: MultiplierFormula = DEFAULT_ROM_FORMULA,
                          nominal: Optional[Callable] = None,
                          nominal_jac: Optional[Callable] = None,
                          rom: Optional[ControlAffineSystem] = None, n: Optional[int] = None,
                          epsilon: Optional[float] = None) -> RomController:
    """Smooth safety filter for the ROM, returned as a :class:`RomController`.

    With ``rom=None`` the ROM is the single integrator ``qdot = xi`` of
    dimension ``n`` and the Jacobian is analytic (it uses the Hessian of
    ``h0`` and ``nominal_jac``). For a general ROM the Jacobian falls back to
    finite differences. ``epsilon`` adds the ISSf robustness term.
    """
    if rom is None and n is None:
        raise ValueError("give either a ROM system or the single-integrator dimension n")
    p = n if rom is None else rom.m
    kd_fun = nominal if nominal is not None else _zero_nominal(p)
    vectorized = h0.vectorized if rom is None else (h0.vectorized and rom.vectorized)

    def ab(q):
        kd = np.asarray(kd_fun(q), dtype=float)
        if rom is None:
            lfh = 0.0
            lgh = h0.gradient(q)
        else:
            lfh, lgh = lie_derivatives(rom, h0, q)
        a = lfh + np.einsum("...j,...j->...", lgh, kd) + h0.alpha(h0(q))
        b = np.einsum("...j,...j->...", lgh, lgh)
        if epsilon is not None:
            a = a - b / epsilon
        return kd, lgh, a, b

    def k0(q):
        q = np.asarray(q, dtype=float)
        kd, lgh, a, b = ab(q)
        return kd + multiplier(formula, a, b)[..., None] * lgh

    def jac(q):
        q = np.asarray(q, dtype=float)
        kd, gh, a, b = ab(q)
        H = h0.hessian(q)
        Jkd = np.zeros(q.shape + (n,)) if nominal is None else np.asarray(nominal_jac(q), dtype=float)
        da = (np.einsum("...ji,...j->...i", Jkd, gh) + np.einsum("...ij,...j->...i", H, kd)
              + h0.alpha.derivative(h0(q))[..., None] * gh)
        db = 2.0 * np.einsum("...ij,...j->...i", H, gh)
        if epsilon is not None:
            da = da - db / epsilon
        lam = multiplier(formula, a, b)
        la, lb = multiplier_partials(formula, a, b)
        dlam = la[..., None] * da + lb[..., None] * db
        return Jkd + gh[..., :, None] * dlam[..., None, :] + lam[..., None, None] * H

    analytic = rom is None and (nominal is None or nominal_jac is not None)
    return RomController(k0, jac if analytic else None, "smooth_filter", vectorized)


def rom_condition_margin(h0: CbfCandidate, k0: Callable, q, rom: Optional[ControlAffineSystem] = None):
    """``Lf0 h0 + Lg0 h0 k0 + alpha(h0)``; positive where the strict ROM condition holds."""
    q = np.asarray(q, dtype=float)
    if rom is None:
        lfh, lgh = 0.0, h0.gradient(q)
    else:
        lfh, lgh = lie_derivatives(rom, h0, q)
    return lfh + np.einsum("...j,...j->...", lgh, np.asarray(k0(q))) + h0.alpha(h0(q))


@dataclass(frozen=True)
class BacksteppedCbf(CbfCandidate):
    """Barrier on ``x = (q, xi)`` built from a ROM barrier and controller."""

    h0: Any = None
    k0: Any = None
    mu: float = 1.0
    n_top: int = 0
    system: Optional[ControlAffineSystem] = None

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.n_top], x[..., self.n_top:]


def _backstep_candidate(h0: ConstraintFunction, k0: RomController, mu: float, n_top: int,
                        alpha: ClassKInf, system=None, vectorized=False) -> BacksteppedCbf:
    if not mu > 0:
        raise ValueError("mu must be positive")

    def h(x):
        x = np.asarray(x, dtype=float)
        q, xi = x[..., :n_top], x[..., n_top:]
        e = xi - k0(q)
        return h0(q) - np.einsum("...i,...i->...", e, e) / (2.0 * mu)

    def grad(x):
        x = np.asarray(x, dtype=float)
        q, xi = x[..., :n_top], x[..., n_top:]
        e = xi - k0(q)
        gq = h0.gradient(q) + np.einsum("...pn,...p->...n", k0.jacobian(q), e) / mu
        return np.concatenate([gq, -e / mu], axis=-1)

    return BacksteppedCbf(h, grad, None, vectorized, alpha, h0, k0, float(mu), n_top, system)


def backstep(h0: CbfCandidate, k0: RomController, mu: float, cascade: CascadeTwoLayer) -> BacksteppedCbf:
    """Two-layer backstepping; the returned candidate inherits ``h0.alpha``."""
    if not cascade.g1_pseudo_invertible:
        raise ValueError("backstepping requires a pseudo-invertible g1")
    if not mu > 0:
        raise ValueError("mu must be positive")
    vec = cascade.vectorized and h0.vectorized and k0.vectorized
    return _backstep_candidate(h0, k0, mu, cascade.n, h0.alpha, lift_cascade(cascade), vec)


@dataclass(frozen=True)
class MixedRomController:
    """ROM controller split into a virtual state command and a direct input."""

    k0_xi: RomController
    k0_u: Callable


def mixed_condition_margin(h0: CbfCandidate, ctrl: MixedRomController, cascade: MixedCascadeTwoLayer, q):
    """Strict condition for mixed cascades evaluated at ``q``."""
    q = np.asarray(q, dtype=float)
    xi = ctrl.k0_xi(q)
    drift = (np.asarray(cascade.f0(q), dtype=float)
             + np.einsum("...ij,...j->...i", np.asarray(cascade.g0_xi(q), dtype=float), xi)
             + np.einsum("...ij,...j->...i", np.asarray(cascade.g0_u(q, xi), dtype=float),
                         np.atleast_1d(ctrl.k0_u(q))))
    return np.einsum("...i,...i->...", h0.gradient(q), drift) + h0.alpha(h0(q))


def mixed_backstep(h0: CbfCandidate, ctrl: MixedRomController, mu: float,
                   cascade: MixedCascadeTwoLayer) -> BacksteppedCbf:
    """Backstepping for mixed relative degree; only ``k0_xi`` enters the penalty."""
    if not cascade.g1_pseudo_invertible:
        raise ValueError("backstepping requires a pseudo-invertible g1_u")
    vec = cascade.vectorized and h0.vectorized and ctrl.k0_xi.vectorized
    return _backstep_candidate(h0, ctrl.k0_xi, mu, cascade.n, h0.alpha, lift_mixed(cascade), vec)


def recursive_backstep(h0: CbfCandidate, controllers: Sequence, mus: Sequence[float],
                       multi: MultiLayerCascade, formulas: Optional[Sequence] = None) -> BacksteppedCbf:
    """Fold backstepping through a strict-feedback chain.

    ``controllers[i]`` is either a :class:`RomController` used as is, a
    nominal callable for a regenerated smooth filter, or ``None`` (zero
    nominal). Formulas default to Softplus with ``sigma = 0.1``.
    """
    r = len(multi.layers) - 1
    if len(controllers) != r or len(mus) != r:
        raise ValueError(f"expected {r} controllers and {r} mu values")
    formulas = list(formulas) if formulas is not None else [DEFAULT_ROM_FORMULA] * r
    current: CbfCandidate = h0
    n_top = multi.layers[0].dim
    for i in range(r):
        rom = multi.truncated(i + 1)
        try:
            spec = controllers[i]
            if isinstance(spec, RomController):
                ctrl = spec
            elif spec is None and _is_single_integrator(rom):
                ctrl = smooth_rom_controller(current, formulas[i], n=n_top)
            else:
                ctrl = smooth_rom_controller(current, formulas[i], spec, rom=rom)
            current = _backstep_candidate(current, ctrl, mus[i], n_top, h0.alpha,
                                          multi.truncated(i + 2),
                                          multi.vectorized and current.vectorized and ctrl.vectorized)
        except Exception as exc:
            raise type(exc)(f"layer {i}: {exc}") from exc
        n_top += multi.layers[i + 1].dim
    return current


def _is_single_integrator(rom: ControlAffineSystem) -> bool:
    probe = np.linspace(-0.7, 0.9, rom.n)
    f = np.asarray(rom.f(probe), dtype=float)
    g = np.asarray(rom.g(probe), dtype=float)
    return rom.n == rom.m and np.allclose(f, 0.0) and np.allclose(g, np.eye(rom.n))


def extended_cbf(h0: CbfCandidate, cascade: CascadeTwoLayer, alpha0: float,
                 alpha: Optional[ClassKInf] = None):
    """High-order barrier ``Lf0 h0 + Lg0 h0 xi + alpha0 h0`` and its set-membership test.

    Returns ``(candidate, member)`` where ``member(x)`` is ``h0 >= 0 and h >= 0``.
    """
    if not alpha0 > 0:
        raise ValueError("alpha0 must be positive")
    alpha = alpha if alpha is not None else ClassKInf.linear(1.0)
    n = cascade.n

    def drift(q, xi):
        return (np.asarray(cascade.f0(q), dtype=float)
                + np.einsum("...ij,...j->...i", np.asarray(cascade.g0(q), dtype=float), xi))

    def h(x):
        x = np.asarray(x, dtype=float)
        q, xi = x[..., :n], x[..., n:]
        return np.einsum("...i,...i->...", h0.gradient(q), drift(q, xi)) + alpha0 * h0(q)

    def grad(x):
        x = np.asarray(x, dtype=float)
        q, xi = x[..., :n], x[..., n:]
        gh = h0.gradient(q)
        J = fd_jacobian(lambda qq: drift(qq, xi), q)
        gq = (np.einsum("...ij,...j->...i", h0.hessian(q), drift(q, xi))
              + np.einsum("...ji,...j->...i", J, gh) + alpha0 * gh)
        gxi = np.einsum("...ij,...i->...j", np.asarray(cascade.g0(q), dtype=float), gh)
        return np.concatenate([gq, gxi], axis=-1)

    vec = cascade.vectorized and h0.vectorized
    cand = CbfCandidate(h, grad, None, vec, alpha)

    def member(x):
        x = np.asarray(x, dtype=float)
        return (np.asarray(h0(x[..., :n])) >= 0) & (np.asarray(h(x)) >= 0)

    return cand, member


def unicycle_decompose(k0_value, tol_singular: float = 1e-6):
    """Split a planar velocity into a unit heading vector and a speed."""
    k = np.asarray(k0_value, dtype=float)
    speed = float(np.linalg.norm(k))
    if speed <= tol_singular:
        raise SingularDecompositionError(f"velocity norm {speed:.3g} is below {tol_singular:g}")
    return k / speed, speed


def heading_split(k0: RomController, tol_singular: float = 1e-6) -> MixedRomController:
    """Heading/speed split of a planar ROM controller with an analytic heading Jacobian.

    Inside the singular locus the norm is clamped at ``tol_singular`` so the
    functions stay finite; callers are expected to avoid that locus.
    """

    def k_xi(q):
        k = k0(q)
        nrm = np.maximum(np.linalg.norm(k, axis=-1), tol_singular)
        return k / nrm[..., None]

    def jac_xi(q):
        k = k0(q)
        nrm = np.maximum(np.linalg.norm(k, axis=-1), tol_singular)
        khat = k / nrm[..., None]
        P = np.eye(k.shape[-1]) - khat[..., :, None] * khat[..., None, :]
        return np.einsum("...ij,...jk->...ik", P, k0.jacobian(q)) / nrm[..., None, None]

    def k_u(q):
        return np.linalg.norm(k0(q), axis=-1)[..., None]

    return MixedRomController(RomController(k_xi, jac_xi, "smooth_filter", k0.vectorized), k_u)
