"""Nested fourth-order finite differences on closed-form fields.

A *field* is any callable mapping chart points ``(P, 4)`` to arrays of shape
``(P, ...)``.  :class:`Calc` turns fields into their partial and covariant
derivatives, again as fields, so derivatives of derivatives nest naturally.

Two step policies are supported:

``sampler``
    relative step ``eps ** (1 / (4 + depth))`` times the background's
    per-axis length scale, balancing the fourth-order truncation error
    against round-off amplified by ``depth`` nested differences.
``lattice``
    the lattice spacing itself, so stencils land on lattice neighbours.
    Axes where that is impossible (analytic boundaries) fall back to the
    sampler step.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from . import kernels
from .lattice import ChartLattice
from .models import Background, DegenerateMetricError, check_finite

Field = Callable[[np.ndarray], np.ndarray]

_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_COEFFS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
EPS = np.finfo(float).eps
#: element budget for one batched stencil evaluation
BUDGET = 2_000_000


class Calc:
    """Derivative context bound to a background.

    ``depth`` is the deepest derivative nesting the caller intends to use;
    it only affects the sampler step.  ``factor`` scales every step and is
    used for Richardson error estimates.
    """

    def __init__(self, bg: Background, mode: str = "sampler", depth: int = 2,
                 lattice: Optional[ChartLattice] = None, factor: float = 1.0):
        if mode not in ("sampler", "lattice"):
            raise ValueError(f"unknown step mode {mode!r}")
        if mode == "lattice" and lattice is None:
            raise ValueError("lattice mode needs a lattice")
        self.bg = bg
        self.mode = mode
        self.depth = int(depth)
        self.lattice = lattice
        self.factor = float(factor)
        self.rel_step = EPS ** (1.0 / (4 + self.depth))

    def coarser(self, ratio: float = 2.0) -> "Calc":
        return Calc(self.bg, self.mode, self.depth, self.lattice, self.factor * ratio)

    def with_depth(self, depth: int) -> "Calc":
        return Calc(self.bg, self.mode, depth, self.lattice, self.factor)

    # ------------------------------------------------------------------ steps
    def step(self, x: np.ndarray) -> np.ndarray:
        h = self.rel_step * self.bg.scale(x)
        if self.mode == "lattice":
            hl = self.bg.lattice_step(x, self.lattice)
            ok = np.isfinite(hl)
            h = np.where(ok, hl, h)
        return h * self.factor

    # ------------------------------------------------------- partial derivative
    def d(self, f: Field) -> Field:
        """Partial derivatives: ``d(f)(x)[p, a, ...] = d_a f(x)[p, ...]``."""

        def df(x):
            x = np.asarray(x, dtype=float)
            P = len(x)
            h = self.step(x)
            out = None
            start, n = 0, min(P, 8)
            while start < P:
                stop = min(P, start + n)
                xs, hs = x[start:stop], h[start:stop]
                m = stop - start
                shift = np.zeros((4, 4, m, 4))
                for a in range(4):
                    shift[a, :, :, a] = _OFFSETS[:, None] * hs[None, :, a]
                pts = (xs[None, None] + shift).reshape(-1, 4)
                vals = f(pts)
                vals = vals.reshape((4, 4, m) + vals.shape[1:])
                der = np.tensordot(_COEFFS, vals, axes=(0, 1))  # (4, m, ...)
                der = der / hs.T.reshape((4, m) + (1,) * (der.ndim - 2))
                der = np.moveaxis(der, 0, 1)
                if out is None:
                    out = np.empty((P,) + der.shape[1:])
                    size = int(np.prod(der.shape[2:], dtype=np.int64)) or 1
                    n = max(1, BUDGET // (16 * size))
                out[start:stop] = der
                start = stop
            return out

        return df

    # ------------------------------------------------------------- metric data
    def metric(self, x):
        g = self.bg.metric(x)
        check_finite(g, "metric", x)
        return g

    def inverse_metric(self, x):
        g = self.metric(x)
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            bad = [i for i in range(len(g)) if np.any(np.linalg.eigvalsh(g[i]) <= 0)]
            raise DegenerateMetricError(f"degenerate metric at site {bad[0] if bad else '?'}")
        return np.linalg.inv(g)

    def volume(self, x):
        return np.sqrt(np.linalg.det(self.metric(x)))

    def christoffel(self, x):
        """Gamma^c_ab at ``x``."""
        return kernels.christoffel(self.inverse_metric(x), self.d(self.metric)(x))

    def riemann_up(self, x):
        """R_ab^c_d with [nabla_a, nabla_b] v^c = R_ab^c_d v^d."""
        return kernels.riemann(self.christoffel(x), self.d(self.christoffel)(x))

    def riemann(self, x):
        """Fully lowered R_abcd = g_ce R_ab^e_d, projected onto curvature symmetries."""
        from .algebra import curvature_projection
        r = np.einsum("pce,pabed->pabcd", self.metric(x), self.riemann_up(x))
        return curvature_projection(r)

    def ricci(self, x):
        # evaluated at an isometric image away from chart singularities
        y, jac = self.bg.recenter(x)
        return pull_back(np.einsum("pabad->pbd", self.riemann_up(y)), jac)

    def schouten(self, x):
        g = self.metric(x)
        ric = self.ricci(x)
        ric = 0.5 * (ric + np.swapaxes(ric, 1, 2))
        R = np.einsum("pab,pab->p", np.linalg.inv(g), ric)
        return 0.5 * (ric - (R / 6.0)[:, None, None] * g)

    def J(self, x):
        return np.einsum("pab,pab->p", self.inverse_metric(x), self.schouten(x))

    def scalar(self, x):
        return 6.0 * self.J(x)

    # ------------------------------------------------------ covariant calculus
    def nabla(self, T: Field, kinds: str) -> Field:
        """Covariant derivative of a tensor field.

        ``kinds`` lists the index positions of ``T`` ('u' upper, 'd' lower,
        'n' inert); the new derivative index is inserted first.
        """

        def nT(x):
            dT = self.d(T)(x)
            return dT + connection_terms(self.christoffel(x), T(x), kinds)

        return nT

    def laplacian(self, T: Field, kinds: str) -> Field:
        """Rough Laplacian g^ab nabla_a nabla_b T."""
        nn = self.nabla(self.nabla(T, kinds), "d" + kinds)

        def lap(x):
            return np.einsum("pab,pab...->p...", self.inverse_metric(x), nn(x))

        return lap


def pull_back(T: np.ndarray, jac: Optional[np.ndarray]) -> np.ndarray:
    """Transform a lowered tensor by ``T_a.. = jac[a', a] ... T'_a'..``."""
    if jac is None:
        return T
    P, shape = len(T), T.shape
    jt = np.swapaxes(jac, 1, 2)
    out = T
    for _ in range(T.ndim - 1):
        # contract the leading index, then rotate it to the back
        out = np.matmul(jt, out.reshape(P, 4, -1)).reshape(shape)
        out = np.moveaxis(out, 1, -1)
    return np.ascontiguousarray(out)



def connection_terms(G: np.ndarray, T: np.ndarray, kinds: str) -> np.ndarray:
    """Christoffel part of nabla_m T for a tensor with index kinds ``kinds``."""
    P = len(T)
    out = np.zeros((P, 4) + T.shape[1:])
    for pos, kind in enumerate(kinds):
        if kind == "n":  # inert slot
            continue
        Tm = np.moveaxis(T, pos + 1, -1)
        if kind == "u":
            K = np.transpose(G, (0, 3, 2, 1))      # [p, e, m, a] = G^a_me
        elif kind == "d":
            K = -np.transpose(G, (0, 1, 2, 3))     # [p, e, m, b] = -G^e_mb
        else:
            raise ValueError(f"bad index kind {kind!r}")
        rest = Tm.shape[1:-1]
        term = np.matmul(Tm.reshape(P, -1, 4), K.reshape(P, 4, 16)).reshape((P,) + rest + (4, 4))
        term = np.moveaxis(term, -2, 1)            # (P, m, *rest, slot)
        out += np.moveaxis(term, -1, pos + 2)
    return out


def richardson_error(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Fourth-order Richardson estimate of the fine-step truncation error."""
    return np.abs(fine - coarse) / 15.0


def pointwise_norm(T: np.ndarray, ginv: np.ndarray, kinds: str) -> np.ndarray:
    """Metric norm |T|_g of a tensor per site, for index kinds ``kinds``."""
    g = np.linalg.inv(ginv)
    raised = T
    for pos, kind in enumerate(kinds):
        M = ginv if kind == "d" else g
        raised = np.moveaxis(np.einsum("pab,p...b->p...a", M, np.moveaxis(raised, pos + 1, -1)), -1, pos + 1)
    val = np.einsum("p...,p...->p", T.reshape(len(T), -1), raised.reshape(len(T), -1))
    return np.sqrt(np.maximum(val, 0.0))


def constant_field(value: np.ndarray) -> Field:
    value = np.asarray(value, dtype=float)

    def c(x):
        return np.broadcast_to(value, (len(x),) + value.shape).copy()

    return c


def finite_check(name: str):
    """Decorator aborting on non-finite outputs of a field."""

    def wrap(f):
        def g(x):
            out = f(x)
            check_finite(out, name, x)
            return out
        return g

    return wrap


def sup(x: np.ndarray) -> float:
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def log_mean_exp(values: np.ndarray, weights: np.ndarray) -> float:
    """log of the weighted mean of exp(values), overflow safe."""
    m = float(np.max(values))
    s = math.fsum((weights * np.exp(values - m)).tolist())
    return m + math.log(s / math.fsum(weights.tolist()))
