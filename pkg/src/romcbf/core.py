"""Dynamics representations, Lie derivatives, class-K functions and structural probes.

Array conventions: states are the last axis. Callables that are flagged
``vectorized`` accept leading batch axes, e.g. ``f(x)`` with ``x.shape == (N, n)``
returns ``(N, n)`` and ``g(x)`` returns ``(N, n, m)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

FD_REL_STEP = 1e-6
RANK_RTOL = 1e-8
PINV_RTOL = 1e-10
COND_MAX = 1e12
DEFAULT_SEED = 42


class DimensionError(ValueError):
    """Raised when an array does not match a declared dimension."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix that must be inverted is numerically singular."""


# ---------------------------------------------------------------------------
# finite differences and linear algebra helpers
# ---------------------------------------------------------------------------

def fd_steps(x: np.ndarray, rel: float = FD_REL_STEP) -> np.ndarray:
    """Per-coordinate central-difference step ``rel * max(1, |x_i|)``."""
    return rel * np.maximum(1.0, np.abs(x))


def fd_gradient(fun: Callable, x, rel: float = FD_REL_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function, batch aware."""
    x = np.asarray(x, dtype=float)
    steps = fd_steps(x, rel)
    grad = np.empty_like(x)
    for i in range(x.shape[-1]):
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += steps[..., i]
        xm[..., i] -= steps[..., i]
        grad[..., i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (xp[..., i] - xm[..., i])
    return grad


def fd_jacobian(fun: Callable, x, rel: float = FD_REL_STEP) -> np.ndarray:
    """Central-difference Jacobian ``d fun / d x`` with shape ``(..., p, n)``."""
    x = np.asarray(x, dtype=float)
    steps = fd_steps(x, rel)
    cols = []
    for i in range(x.shape[-1]):
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += steps[..., i]
        xm[..., i] -= steps[..., i]
        width = (xp[..., i] - xm[..., i])[..., None]
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / width)
    return np.stack(cols, axis=-1)


def fd_relative_error(fun: Callable, grad: Callable, x) -> float:
    """Relative error between an analytic gradient and central differences at ``x``."""
    x = np.asarray(x, dtype=float)
    g_an = np.asarray(grad(x), dtype=float)
    g_fd = fd_gradient(fun, x)
    return float(np.linalg.norm(g_an - g_fd) / max(1.0, np.linalg.norm(g_fd)))


def solve_checked(A: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Solve ``A y = b`` by factorization, refusing ill-conditioned ``A``."""
    A = np.asarray(A, dtype=float)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise SingularMatrixError(f"{what} is singular (condition number {cond:.3g})")
    return np.linalg.solve(A, b)


def pinv_svd(A: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD with relative cutoff."""
    return np.linalg.pinv(np.atleast_2d(np.asarray(A, dtype=float)), rcond=rtol)


def full_row_rank(A: np.ndarray, rtol: float = RANK_RTOL) -> bool:
    """True when the smallest singular value exceeds ``rtol`` times the largest."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] > A.shape[1]:
        return False
    s = np.linalg.svd(A, compute_uv=False)
    return bool(s.size and s[0] > 0 and s[-1] > rtol * s[0])


def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", M, v)


# ---------------------------------------------------------------------------
# extended class-K-infinity functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassKInf:
    """Extended class-K-infinity function alpha: R -> R.

    Use the constructors :meth:`linear`, :meth:`cubic` and :meth:`custom`.
    """

    kind: str
    c: float = 1.0
    fun: Optional[Callable] = None
    inverse_fun: Optional[Callable] = None
    derivative_fun: Optional[Callable] = None
    lipschitz: Optional[float] = None

    @classmethod
    def linear(cls, c: float = 1.0) -> "ClassKInf":
        if not c > 0:
            raise ValueError("linear class-K coefficient must be positive")
        return cls("linear", float(c), lipschitz=float(c))

    @classmethod
    def cubic(cls, c: float = 1.0) -> "ClassKInf":
        if not c > 0:
            raise ValueError("cubic class-K coefficient must be positive")
        return cls("cubic", float(c))

    @classmethod
    def custom(cls, fun: Callable, inverse: Optional[Callable] = None,
               derivative: Optional[Callable] = None,
               lipschitz: Optional[float] = None) -> "ClassKInf":
        return cls("custom", 1.0, fun, inverse, derivative, lipschitz)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "linear":
            return self.c * s
        if self.kind == "cubic":
            return self.c * s ** 3
        return np.asarray(self.fun(s), dtype=float)

    def inverse(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "linear":
            return s / self.c
        if self.kind == "cubic":
            return np.cbrt(s / self.c)
        if self.inverse_fun is None:
            raise NotImplementedError("this class-K function has no inverse")
        return np.asarray(self.inverse_fun(s), dtype=float)

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "linear":
            return np.full_like(s, self.c)
        if self.kind == "cubic":
            return 3.0 * self.c * s ** 2
        if self.derivative_fun is not None:
            return np.asarray(self.derivative_fun(s), dtype=float)
        step = fd_steps(s)
        return (np.asarray(self.fun(s + step)) - np.asarray(self.fun(s - step))) / (2 * step)

    def scaled(self, factor: float) -> "ClassKInf":
        """Return ``factor * alpha`` (factor > 0)."""
        if self.kind in ("linear", "cubic"):
            return ClassKInf(self.kind, self.c * factor,
                             lipschitz=None if self.lipschitz is None else self.lipschitz * factor)
        inv = None if self.inverse_fun is None else (lambda s, f=self.inverse_fun: f(s / factor))
        der = None if self.derivative_fun is None else (lambda s, f=self.derivative_fun: factor * f(s))
        lip = None if self.lipschitz is None else self.lipschitz * factor
        return ClassKInf.custom(lambda s, f=self.fun: factor * f(s), inv, der, lip)


# ---------------------------------------------------------------------------
# scalar constraint functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintFunction:
    """Scalar function with optional analytic gradient and Hessian.

    Missing derivatives fall back to central finite differences.
    """

    h: Callable
    grad_h: Optional[Callable] = None
    hess_h: Optional[Callable] = None
    vectorized: bool = False

    def __call__(self, x):
        return self.h(np.asarray(x, dtype=float))

    def value(self, x):
        return self.h(np.asarray(x, dtype=float))

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.grad_h is not None:
            return np.asarray(self.grad_h(x), dtype=float)
        return fd_gradient(self.h, x)

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.hess_h is not None:
            return np.asarray(self.hess_h(x), dtype=float)
        return fd_jacobian(self.gradient, x)


# ---------------------------------------------------------------------------
# control-affine systems and cascades
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlAffineSystem:
    """``xdot = f(x) + g(x) u`` with ``x`` in R^n and ``u`` in R^m."""

    n: int
    m: int
    f: Callable
    g: Callable
    vectorized: bool = False

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise DimensionError("control-affine system needs n >= 1 and m >= 1")

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n,):
            raise DimensionError(f"state has shape {x.shape}, expected (..., {self.n})")
        return x

    def dynamics(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.asarray(self.f(x), dtype=float) + _mv(np.asarray(self.g(x), dtype=float), u)


def lie_derivatives(sys: ControlAffineSystem, h, x):
    """Return ``(L_f h(x), L_g h(x))``; ``h`` needs a ``gradient`` method."""
    x = sys.check_state(x)
    grad = h.gradient(x)
    f = np.asarray(sys.f(x), dtype=float)
    g = np.asarray(sys.g(x), dtype=float)
    if f.shape[-1] != sys.n or g.shape[-2:] != (sys.n, sys.m):
        raise DimensionError(f"f or g returned shapes {f.shape}, {g.shape}")
    lfh = np.einsum("...i,...i->...", grad, f)
    lgh = np.einsum("...i,...ij->...j", grad, g)
    return lfh, lgh


@dataclass(frozen=True)
class CascadeTwoLayer:
    """``qdot = f0(q) + g0(q) xi``, ``xidot = f1(q, xi) + g1(q, xi) u``."""

    n: int
    p: int
    m: int
    f0: Callable
    g0: Callable
    f1: Callable
    g1: Callable
    g1_pseudo_invertible: bool = True
    vectorized: bool = False

    def __post_init__(self):
        if min(self.n, self.p, self.m) < 1:
            raise DimensionError("cascade dimensions must all be positive")

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.n], x[..., self.n:]

    def rom(self) -> ControlAffineSystem:
        """The top layer as a control-affine system with input ``xi``."""
        return ControlAffineSystem(self.n, self.p, self.f0, self.g0, self.vectorized)

    def check_pseudo_invertible(self, samples) -> bool:
        """Rank test of ``g1`` on sampled lifted states."""
        for x in np.atleast_2d(samples):
            q, xi = self.split(x)
            if not full_row_rank(self.g1(q, xi)):
                return False
        return True


def lift_cascade(c: CascadeTwoLayer) -> ControlAffineSystem:
    """Stack a two-layer cascade into control-affine form on ``x = (q, xi)``."""
    n, p, m = c.n, c.p, c.m

    def f(x):
        q, xi = c.split(x)
        top = np.asarray(c.f0(q), dtype=float) + _mv(np.asarray(c.g0(q), dtype=float), xi)
        return np.concatenate([top, np.broadcast_to(c.f1(q, xi), xi.shape)], axis=-1)

    def g(x):
        q, xi = c.split(x)
        g1 = np.asarray(c.g1(q, xi), dtype=float)
        out = np.zeros(x.shape[:-1] + (n + p, m))
        out[..., n:, :] = g1
        return out

    return ControlAffineSystem(n + p, m, f, g, c.vectorized)


@dataclass(frozen=True)
class MixedCascadeTwoLayer:
    """Cascade where the physical input enters both layers.

    ``qdot = f0(q) + g0_xi(q) xi + g0_u(q, xi) u0`` and
    ``xidot = f1(q, xi) + g1_u(q, xi) u1``.  ``g0_u`` may depend on ``xi``,
    which covers unicycle-type kinematics.
    """

    n: int
    p: int
    m0: int
    m1: int
    f0: Callable
    g0_xi: Callable
    g0_u: Callable
    f1: Callable
    g1_u: Callable
    g1_pseudo_invertible: bool = True
    vectorized: bool = False

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.n], x[..., self.n:]


def lift_mixed(c: MixedCascadeTwoLayer) -> ControlAffineSystem:
    """Lift with block-diagonal input matrix ``blockdiag(g0_u, g1_u)``."""
    n, p, m0, m1 = c.n, c.p, c.m0, c.m1

    def f(x):
        q, xi = c.split(x)
        top = np.asarray(c.f0(q), dtype=float) + _mv(np.asarray(c.g0_xi(q), dtype=float), xi)
        return np.concatenate([top, np.broadcast_to(c.f1(q, xi), xi.shape)], axis=-1)

    def g(x):
        q, xi = c.split(x)
        out = np.zeros(x.shape[:-1] + (n + p, m0 + m1))
        out[..., :n, :m0] = c.g0_u(q, xi)
        out[..., n:, m0:] = c.g1_u(q, xi)
        return out

    return ControlAffineSystem(n + p, m0 + m1, f, g, c.vectorized)


@dataclass(frozen=True)
class Layer:
    """One layer ``xi_i dot = f(z_i) + g(z_i) xi_{i+1}`` of a strict-feedback chain.

    ``z_i`` is the stacked state of this layer and every layer above it.
    """

    dim: int
    f: Callable
    g: Callable


@dataclass(frozen=True)
class MultiLayerCascade:
    """Strict-feedback chain; the last layer's input is the physical input."""

    layers: tuple
    m: int
    vectorized: bool = False

    def __post_init__(self):
        if len(self.layers) < 2:
            raise DimensionError("a multi-layer cascade needs at least two layers")

    @property
    def dims(self):
        return [layer.dim for layer in self.layers]

    def input_dim(self, i: int) -> int:
        return self.layers[i + 1].dim if i + 1 < len(self.layers) else self.m

    def check_chain(self, sample) -> bool:
        """Check that each ``g_i`` has as many columns as the next layer's dimension."""
        sample = np.asarray(sample, dtype=float)
        offset = 0
        for i, layer in enumerate(self.layers):
            offset += layer.dim
            g = np.atleast_2d(layer.g(sample[:offset]))
            if g.shape != (layer.dim, self.input_dim(i)):
                return False
        return True

    def truncated(self, r: int) -> ControlAffineSystem:
        """Control-affine system of the top ``r`` layers driven by layer ``r``'s state."""
        layers = self.layers[:r]
        n = sum(layer.dim for layer in layers)
        m = self.input_dim(r - 1)

        def f(z):
            parts = []
            offset = 0
            for i, layer in enumerate(layers):
                offset += layer.dim
                fi = np.asarray(layer.f(z[..., :offset]), dtype=float)
                if i + 1 < len(layers):
                    nxt = z[..., offset: offset + layers[i + 1].dim]
                    fi = fi + _mv(np.asarray(layer.g(z[..., :offset]), dtype=float), nxt)
                parts.append(np.broadcast_to(fi, z.shape[:-1] + (layer.dim,)))
            return np.concatenate(parts, axis=-1)

        def g(z):
            out = np.zeros(z.shape[:-1] + (n, m))
            out[..., n - layers[-1].dim:, :] = layers[-1].g(z)
            return out

        return ControlAffineSystem(n, m, f, g, self.vectorized)


def lift_multi(c: MultiLayerCascade) -> ControlAffineSystem:
    return c.truncated(len(c.layers))


# ---------------------------------------------------------------------------
# Euler-Lagrange systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EulerLagrangeSystem:
    """``D(q) qddot + C(q, qdot) qdot + G(q) = B u``.

    ``partition`` is the size ``n1`` of the actuated block (first ``n1``
    coordinates); the remaining ``n - n1`` coordinates are passive. ``dD(q)``
    optionally returns the partials ``dD/dq_i`` stacked on the first axis;
    without it they are taken by central differences. When ``C`` also holds
    dissipative terms, ``coriolis(q, qdot)`` gives its Coriolis part alone.
    """

    n: int
    m: int
    D: Callable
    C: Callable
    G: Callable
    B: np.ndarray
    partition: Optional[int] = None
    dD: Optional[Callable] = None
    coriolis: Optional[Callable] = None

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float).reshape(self.n, self.m)
        object.__setattr__(self, "B", B)
        if self.partition is not None and not 0 < self.partition < self.n:
            raise DimensionError("partition must split q into two nonempty blocks")

    @property
    def fully_actuated(self) -> bool:
        return self.m == self.n and np.linalg.cond(self.B) < COND_MAX

    def H(self, q, qd) -> np.ndarray:
        return self.C(q, qd) @ qd + self.G(q)

    def accel(self, q, qd, u) -> np.ndarray:
        rhs = self.B @ np.atleast_1d(u) - self.H(q, qd)
        return solve_checked(self.D(q), rhs, "inertia matrix")

    def D_dot(self, q, qd) -> np.ndarray:
        """Time derivative of ``D`` along ``qdot``."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        if self.dD is not None:
            return np.einsum("kij,k->ij", np.asarray(self.dD(q), dtype=float), qd)
        eps = FD_REL_STEP * max(1.0, float(np.max(np.abs(q))))
        return (self.D(q + eps * qd) - self.D(q - eps * qd)) / (2 * eps)

    def D_partials(self, q) -> np.ndarray:
        """``dD/dq_i`` stacked on the first axis."""
        q = np.asarray(q, dtype=float)
        if self.dD is not None:
            return np.asarray(self.dD(q), dtype=float)
        steps = fd_steps(q)
        out = []
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = steps[i]
            out.append((self.D(q + e) - self.D(q - e)) / (2 * steps[i]))
        return np.array(out)

    def skew_residual(self, q, qd, v) -> float:
        """Scaled residual ``|v^T (Ddot - 2C) v| / |v|^2`` on the Coriolis part of ``C``."""
        C = self.coriolis if self.coriolis is not None else self.C
        M = self.D_dot(q, qd) - 2.0 * C(q, qd)
        v = np.asarray(v, dtype=float)
        return float(abs(v @ M @ v) / max(v @ v, 1e-300))

    def min_inertia_eig(self, q) -> float:
        D = self.D(q)
        return float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])


def el_to_affine(el: EulerLagrangeSystem) -> ControlAffineSystem:
    """Control-affine form on ``x = (q, qdot)``; solves with ``D`` instead of inverting."""
    n, m = el.n, el.m

    def f(x):
        q, qd = x[:n], x[n:]
        acc = solve_checked(el.D(q), -el.H(q, qd), "inertia matrix")
        return np.concatenate([qd, acc])

    def g(x):
        q = x[:n]
        out = np.zeros((2 * n, m))
        out[n:, :] = solve_checked(el.D(q), el.B, "inertia matrix")
        return out

    return ControlAffineSystem(2 * n, m, f, g)


# ---------------------------------------------------------------------------
# structural probes
# ---------------------------------------------------------------------------

@dataclass
class RelativeDegreeReport:
    degrees: np.ndarray
    uniform: bool
    r_max: int

    @property
    def exceeded(self) -> np.ndarray:
        return self.degrees < 0


def relative_degree_probe(sys: ControlAffineSystem, h, samples, r_max: int = 3,
                          tol: float = 1e-6, rel_step: float = 1e-4) -> RelativeDegreeReport:
    """Estimate the relative degree of ``h`` at each sample.

    Nested Lie derivatives ``L_f^k h`` are built by finite differences with a
    coarser step than the first-order checks so that the nesting stays
    well-conditioned. ``-1`` marks samples where no ``r <= r_max`` was found.
    """
    levels = [lambda x: float(np.asarray(h(x)))]
    grads = [lambda x: np.asarray(h.gradient(x), dtype=float)]
    for _ in range(1, r_max):
        prev_grad = grads[-1]
        lf = (lambda pg: (lambda x: float(pg(x) @ np.asarray(sys.f(x), dtype=float))))(prev_grad)
        levels.append(lf)
        grads.append((lambda fun: (lambda x: fd_gradient(fun, x, rel_step)))(lf))

    degrees = []
    for x in np.atleast_2d(np.asarray(samples, dtype=float)):
        r = -1
        for k in range(r_max):
            lg = grads[k](x) @ np.asarray(sys.g(x), dtype=float)
            if np.linalg.norm(lg) > tol:
                r = k + 1
                break
        degrees.append(r)
    degrees = np.array(degrees, dtype=int)
    uniform = bool(degrees.size and np.all(degrees == degrees[0]) and degrees[0] > 0)
    return RelativeDegreeReport(degrees, uniform, r_max)


@dataclass
class RegularValueReport:
    flagged: np.ndarray
    grad_norms: np.ndarray
    skipped: int

    @property
    def passed(self) -> bool:
        return len(self.flagged) == 0


def regular_value_scan(h, boundary_samples, tol: float = 1e-8,
                       boundary_tol: float = 1e-6) -> RegularValueReport:
    """Flag boundary samples where the gradient of ``h`` (nearly) vanishes.

    Samples with ``|h| > boundary_tol`` are not on the zero level set and are skipped.
    """
    X = np.atleast_2d(np.asarray(boundary_samples, dtype=float))
    keep = []
    norms = []
    for x in X:
        if abs(float(h(x))) <= boundary_tol:
            keep.append(x)
            norms.append(float(np.linalg.norm(h.gradient(x))))
    keep = np.array(keep).reshape(-1, X.shape[1])
    norms = np.array(norms)
    return RegularValueReport(keep[norms < tol] if len(norms) else keep, norms, len(X) - len(keep))


def sample_box(box: Sequence, n_samples: int, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Uniform random samples in an axis-aligned box ``[(lo, hi), ...]``."""
    box = np.asarray(box, dtype=float)
    rng = np.random.default_rng(seed)
    return rng.uniform(box[:, 0], box[:, 1], size=(n_samples, len(box)))


def grid_box(box: Sequence, n_per_dim) -> np.ndarray:
    """Tensor grid over a box, flattened to ``(N, dim)``."""
    box = np.asarray(box, dtype=float)
    counts = np.broadcast_to(np.asarray(n_per_dim), (len(box),))
    axes = [np.linspace(lo, hi, int(k)) for (lo, hi), k in zip(box, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)
