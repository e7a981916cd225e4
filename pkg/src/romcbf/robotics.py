"""Energy-based barriers and underactuated reductions for Euler-Lagrange systems."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .backstepping import RomController
from .core import (
    RANK_RTOL,
    ControlAffineSystem,
    EulerLagrangeSystem,
    el_to_affine,
    fd_jacobian,
    full_row_rank,
    pinv_svd,
    solve_checked,
)
from .filters import CbfCandidate, MultiplierFormula, multiplier


class CouplingLostError(ValueError):
    """Raised when the passive/actuated inertia coupling block loses rank."""

    def __init__(self, q):
        super().__init__(f"strong inertial coupling lost at q = {np.array2string(np.asarray(q))}")
        self.q = np.asarray(q)


class PreconditionError(ValueError):
    """Raised when a construction's structural assumptions fail."""


@dataclass(frozen=True)
class EnergyCbf:
    """``h(q, qdot) = h0(q) - (qdot - k0)^T D(q) (qdot - k0) / (2 mu)``.

    With ``rom`` given, the target velocity is the ROM closed loop
    ``f0(q) + g0(q) k0(q)`` instead of ``k0(q)``.
    """

    h0: CbfCandidate
    k0: RomController
    mu: float
    el: EulerLagrangeSystem
    rom: Optional[ControlAffineSystem] = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")

    @property
    def alpha(self):
        return self.h0.alpha

    def target(self, q) -> np.ndarray:
        k = self.k0(q)
        if self.rom is None:
            return k
        return np.asarray(self.rom.f(q), dtype=float) + np.asarray(self.rom.g(q), dtype=float) @ k

    def target_jac(self, q) -> np.ndarray:
        if self.rom is None:
            return self.k0.jacobian(q)
        return fd_jacobian(self.target, q)

    def V(self, q, qd) -> float:
        e = np.asarray(qd, dtype=float) - self.target(q)
        return 0.5 * float(e @ self.el.D(q) @ e)

    def as_cbf(self) -> CbfCandidate:
        """The same barrier as a :class:`CbfCandidate` on ``x = (q, qdot)``."""
        n = self.el.n

        def h(x):
            return energy_cbf_value(self, x[:n], x[n:])

        def grad(x):
            q, qd = x[:n], x[n:]
            e = qd - self.target(q)
            D = self.el.D(q)
            dD = self.el.D_partials(q)
            gq = (self.h0.gradient(q) + self.target_jac(q).T @ D @ e / self.mu
                  - 0.5 * np.einsum("i,kij,j->k", e, dD, e) / self.mu)
            return np.concatenate([gq, -D @ e / self.mu])

        return CbfCandidate(h, grad, None, False, self.alpha)


def energy_cbf_value(e: EnergyCbf, q, qd) -> float:
    q = np.asarray(q, dtype=float)
    return float(e.h0(q)) - e.V(q, qd) / e.mu


def energy_ab(e: EnergyCbf, q, qd, kd=None):
    """``(a, b)`` for the energy barrier, computed without inverting ``D``.

    If the model separates its Coriolis matrix from extra terms in ``C``
    (damping), ``a`` adds ``(qdot - k0)^T (C - C_coriolis) (qdot - k0) / mu``.
    When ``kd`` is given, ``a`` also includes the nominal input's contribution
    ``-(qdot - k0)^T B kd / mu`` so that ``lambda(a, b)`` solves the QP around ``kd``.
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    el = e.el
    k = e.target(q)
    err = qd - k
    inner = el.D(q) @ e.target_jac(q) @ qd + el.C(q, qd) @ k + el.G(q)
    hval = float(e.h0(q)) - 0.5 * float(err @ el.D(q) @ err) / e.mu
    a = float(e.h0.gradient(q) @ qd + err @ inner / e.mu + e.alpha(hval))
    if el.coriolis is not None:
        # non-skew part of C (e.g. damping) no longer cancels against Ddot / 2
        a += float(err @ (el.C(q, qd) - el.coriolis(q, qd)) @ err) / e.mu
    row = err @ el.B / e.mu
    if kd is not None:
        a -= float(row @ np.atleast_1d(kd))
    return a, float(row @ row)


def energy_filter_input(e: EnergyCbf, nominal, q, qd, formula: MultiplierFormula = MultiplierFormula()):
    """``u = k_d - lambda(a, b) B^T (qdot - k0) / mu``; ``nominal`` may be a callable or a value."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    kd = np.atleast_1d(nominal(q, qd) if callable(nominal) else nominal).astype(float)
    a, b = energy_ab(e, q, qd, kd)
    lam = float(multiplier(formula, a, b))
    return kd - lam * e.el.B.T @ (qd - e.target(q)) / e.mu


def explicit_energy_controller(e: EnergyCbf, gamma: float) -> Callable:
    """Feedback ``B^{-1}[D J qdot + C k0 + G + mu grad h0 - gamma D (qdot - k0) / 2]``."""
    el = e.el
    if not el.fully_actuated:
        raise PreconditionError("explicit energy controller needs a fully actuated system")
    ell = e.alpha.lipschitz
    if ell is None:
        raise PreconditionError("explicit energy controller needs a Lipschitz class-K function")
    if gamma < ell:
        raise PreconditionError(f"gamma = {gamma} is below the Lipschitz constant {ell}")

    def k(q, qd):
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        t = e.target(q)
        D = el.D(q)
        rhs = (D @ e.target_jac(q) @ qd + el.C(q, qd) @ t + el.G(q)
               + e.mu * e.h0.gradient(q) - 0.5 * gamma * D @ (qd - t))
        return solve_checked(el.B, rhs, "input matrix")

    return k


def _blocks(el: EulerLagrangeSystem, q, qd=None):
    if el.partition is None:
        raise PreconditionError("system has no actuated/passive partition")
    n1 = el.partition
    D = el.D(q)
    out = (D[:n1, :n1], D[:n1, n1:], D[n1:, :n1], D[n1:, n1:])
    if qd is None:
        return out
    H = el.H(q, qd)
    return out + (H[:n1], H[n1:])


@dataclass(frozen=True)
class CollocatedReduction:
    """Actuated-coordinate dynamics ``Dbar1 q1ddot + Hbar1 = B1 u``."""

    Dbar1: Callable
    Hbar1: Callable
    B1: np.ndarray


@dataclass(frozen=True)
class NonCollocatedReduction:
    """Passive-coordinate dynamics ``Dbar2 q2ddot + Hbar2 = B1 u`` on the coupling domain."""

    Dbar2: Callable
    Hbar2: Callable
    B1: np.ndarray
    coupled: Callable


def _check_unactuated(el: EulerLagrangeSystem):
    n1 = el.partition
    if n1 is None:
        raise PreconditionError("system has no actuated/passive partition")
    if np.any(np.abs(el.B[n1:]) > 0):
        raise PreconditionError("passive rows of B must be zero")


def collocated_reduce(el: EulerLagrangeSystem) -> CollocatedReduction:
    _check_unactuated(el)

    def Dbar1(q):
        D11, D12, D21, D22 = _blocks(el, q)
        return D11 - D12 @ solve_checked(D22, D21, "passive inertia block")

    def Hbar1(q, qd):
        D11, D12, D21, D22, H1, H2 = _blocks(el, q, qd)
        return H1 - D12 @ solve_checked(D22, H2, "passive inertia block")

    return CollocatedReduction(Dbar1, Hbar1, el.B[: el.partition])


def coupling_margin(el: EulerLagrangeSystem, q) -> float:
    """Smallest singular value of ``D21`` relative to the scale of ``D``."""
    _, _, D21, _ = _blocks(el, q)
    s = np.linalg.svd(D21, compute_uv=False)
    if D21.shape[0] < D21.shape[1]:
        return 0.0
    return float(s[-1] / max(1.0, np.linalg.norm(el.D(q), 2)))


def noncollocated_reduce(el: EulerLagrangeSystem) -> NonCollocatedReduction:
    _check_unactuated(el)

    def coupled(q) -> bool:
        return coupling_margin(el, q) > RANK_RTOL

    def Dbar2(q):
        if not coupled(q):
            raise CouplingLostError(q)
        D11, D12, D21, D22 = _blocks(el, q)
        return D12 - D11 @ pinv_svd(D21) @ D22

    def Hbar2(q, qd):
        if not coupled(q):
            raise CouplingLostError(q)
        D11, D12, D21, D22, H1, H2 = _blocks(el, q, qd)
        return H1 - D11 @ pinv_svd(D21) @ H2

    return NonCollocatedReduction(Dbar2, Hbar2, el.B[: el.partition], coupled)


@dataclass(frozen=True)
class UnderactuatedCbf(CbfCandidate):
    """Barrier ``h0_part - w^T W(q) w / (2 mu)`` with ``w = qdot_part - k0_part``."""

    weight: Optional[Callable] = None
    part: Optional[slice] = None
    mu: float = 1.0
    system: Optional[ControlAffineSystem] = None


def underactuated_cbf(el: EulerLagrangeSystem, which: str, h0_part: CbfCandidate,
                      k0_part: RomController, mu: float) -> UnderactuatedCbf:
    """Barrier on the control-affine lift for an actuated or passive constraint.

    ``which='actuated'`` weights the tracking error with the Schur complement
    ``Dbar1``; ``which='passive'`` uses ``Dbar2^T Dbar2``.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    _check_unactuated(el)
    n, n1 = el.n, el.partition
    B1 = el.B[:n1]
    if not full_row_rank(B1):
        raise PreconditionError("B1 must be pseudo-invertible (full row rank)")
    if which == "actuated":
        red = collocated_reduce(el)
        part = slice(0, n1)
        weight = red.Dbar1
    elif which == "passive":
        red = noncollocated_reduce(el)
        part = slice(n1, n)

        def weight(q):
            Db = red.Dbar2(q)
            return Db.T @ Db
    else:
        raise ValueError("which must be 'actuated' or 'passive'")

    def h(x):
        q, qd = x[:n], x[n:]
        w = qd[part] - k0_part(q[part])
        return float(h0_part(q[part])) - 0.5 * float(w @ weight(q) @ w) / mu

    def grad(x):
        q, qd = x[:n], x[n:]
        qp = q[part]
        w = qd[part] - k0_part(qp)
        W = weight(q)
        dW = fd_jacobian(lambda qq: weight(qq), q)  # (k, k, n)
        gq = -0.5 * np.einsum("i,ijn,j->n", w, dW, w) / mu
        gq[part] += h0_part.gradient(qp) + k0_part.jacobian(qp).T @ W @ w / mu
        gqd = np.zeros(n)
        gqd[part] = -W @ w / mu
        return np.concatenate([gq, gqd])

    return UnderactuatedCbf(h, grad, None, False, h0_part.alpha, weight, part, float(mu), el_to_affine(el))
