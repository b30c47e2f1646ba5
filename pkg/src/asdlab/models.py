"""Model backgrounds: closed-form metric samplers on four-dimensional charts.

Every background exposes ``metric(x)`` for chart points ``x`` of shape
``(P, 4)``, a per-axis length ``scale(x)`` used to size finite-difference
steps, a quadrature ``lattice(sites)``, a smooth orthonormal ``coframe(x)``
and a generator of smooth random test functions.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .lattice import ANALYTIC, PERIODIC, Axis, ChartLattice, fejer_weights

Field = Callable[[np.ndarray], np.ndarray]

GEOMETRIES = ("flat_t4", "perturbed_flat", "round_s4", "s3xs1")


class DegenerateMetricError(ValueError):
    """Raised when a metric sample fails to be positive definite."""


class NonFiniteFieldError(FloatingPointError):
    """Raised when a field evaluates to NaN or infinity."""


def check_finite(values: np.ndarray, what: str, points: Optional[np.ndarray] = None):
    bad = ~np.isfinite(values)
    if bad.any():
        site = int(np.argwhere(bad.reshape(len(values), -1).any(axis=1))[0, 0])
        where = f" at point {points[site].tolist()}" if points is not None else ""
        raise NonFiniteFieldError(f"non-finite {what} at site {site}{where}")


def cholesky_coframe(g: np.ndarray) -> np.ndarray:
    """Orthonormal coframe ``theta[a, mu]`` with ``g = theta^T theta``."""
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise DegenerateMetricError("metric is not positive definite") from exc
    return np.swapaxes(L, -1, -2)


class Background:
    name = "background"
    #: chart period per axis, ``None`` for non-periodic chart directions
    periods: tuple = (None, None, None, None)
    conformally_flat = False
    euler_characteristic: Optional[int] = None
    signature = 0

    def metric(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def scale(self, x: np.ndarray) -> np.ndarray:
        return np.ones((len(x), 4))

    def lattice(self, sites) -> ChartLattice:
        raise NotImplementedError

    def lattice_step(self, x: np.ndarray, lat: ChartLattice) -> np.ndarray:
        """Chart-coordinate stencil step per axis for lattice-mode stencils.

        Entries are NaN where the lattice spacing cannot be used (too close
        to an analytic boundary); callers fall back to the sampler step.
        """
        return np.broadcast_to(lat.spacing, (len(x), 4)).copy()

    def coframe(self, x: np.ndarray) -> np.ndarray:
        return cholesky_coframe(self.metric(x))

    def recenter(self, x: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Better-conditioned chart points for metric invariants.

        Returns ``(y, jac)`` where ``y`` describes the same points of the
        manifold through an isometry of the chart metric and
        ``jac[p, a', a] = d y^a' / d x^a``; ``jac`` is None when ``y = x``.
        """
        return x, None

    def random_function(self, rng: np.random.Generator, amplitude: float = 1.0) -> Field:
        raise NotImplementedError

    def galerkin_basis(self) -> list:
        """Smooth trial functions spanning the low modes (constants first)."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"geometry": self.name}


def _sites4(sites) -> tuple:
    if np.isscalar(sites):
        return (int(sites),) * 4
    sites = tuple(int(s) for s in sites)
    if len(sites) != 4:
        raise ValueError("sites must be an integer or four integers")
    return sites


class FlatTorus(Background):
    """Flat metric on the cube ``[0, L)^4`` with periodic identifications."""

    name = "flat_t4"
    conformally_flat = True
    euler_characteristic = 0

    def __init__(self, extent: float = 1.0):
        self.extent = float(extent)
        self.periods = (self.extent,) * 4

    def metric(self, x):
        return np.broadcast_to(np.eye(4), (len(x), 4, 4)).copy()

    def scale(self, x):
        # radius of the fundamental circle: the length over which modes vary
        return np.full((len(x), 4), self.extent / (2 * math.pi))

    def lattice(self, sites):
        return ChartLattice([Axis(self.extent, n) for n in _sites4(sites)], name=self.name)

    def _modes(self, rng, count, kmax=2):
        k = rng.integers(-kmax, kmax + 1, size=(count, 4))
        k[np.all(k == 0, axis=1), 0] = 1
        return k

    def galerkin_basis(self):
        k = 2.0 * math.pi / self.extent
        out = [lambda x: np.ones(len(x))]
        for i in range(4):
            out.append(lambda x, i=i: np.cos(k * x[:, i]))
            out.append(lambda x, i=i: np.sin(k * x[:, i]))
        return out

    def random_function(self, rng, amplitude=1.0, modes=4):
        k = self._modes(rng, modes) * (2.0 * math.pi / self.extent)
        c = rng.normal(size=modes) * amplitude / math.sqrt(modes)
        ph = rng.uniform(0, 2 * math.pi, size=modes)
        c0 = rng.normal() * amplitude

        def f(x):
            return c0 + np.cos(x @ k.T + ph) @ c
        return f

    def describe(self):
        return {"geometry": self.name, "extent": self.extent}


class PerturbedFlat(FlatTorus):
    """``g = I + epsilon * h`` with ``h`` a seeded sum of low Fourier modes."""

    name = "perturbed_flat"
    conformally_flat = False

    def __init__(self, extent: float = 1.0, epsilon: float = 0.05, seed: int = 0, modes: int = 3):
        super().__init__(extent)
        self.epsilon = float(epsilon)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self._k = self._modes(rng, modes, kmax=1) * (2.0 * math.pi / self.extent)
        a = rng.normal(size=(modes, 4, 4))
        self._amp = 0.5 * (a + np.swapaxes(a, 1, 2)) / math.sqrt(modes)
        self._phase = rng.uniform(0, 2 * math.pi, size=modes)

    def metric(self, x):
        c = np.cos(x @ self._k.T + self._phase)
        return np.eye(4) + self.epsilon * np.einsum("pj,jab->pab", c, self._amp)

    def describe(self):
        return {"geometry": self.name, "extent": self.extent, "epsilon": self.epsilon,
                "seed": self.seed}


def _hopf(eta, xi1, xi2):
    s, c = np.sin(eta), np.cos(eta)
    return np.stack([s * np.cos(xi1), s * np.sin(xi1), c * np.cos(xi2), c * np.sin(xi2)], axis=-1)


def _quat_mul(p, q):
    a1, b1, c1, d1 = np.moveaxis(p, -1, 0)
    a2, b2, c2, d2 = np.moveaxis(q, -1, 0)
    return np.stack([a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
                     a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
                     a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
                     a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2], axis=-1)


def _left_matrix(q):
    """Matrix of y -> q y on R^4 = H."""
    return np.stack([_quat_mul(q, np.broadcast_to(e, q.shape)) for e in np.eye(4)], axis=-1)


class RoundSphere(Background):
    """Unit round metric on S^4 in the stereographic chart from the north pole.

    Quadrature nodes come from a polar/Hopf product rule on the sphere (Fejér
    rules in ``cos psi`` and ``cos 2 eta``, trapezoid in the two azimuths),
    mapped into the chart; coordinate weights divide out the chart density.
    """

    name = "round_s4"
    conformally_flat = True
    euler_characteristic = 2

    def conformal_factor(self, x):
        return 4.0 / (1.0 + np.einsum("pi,pi->p", x, x)) ** 2

    def metric(self, x):
        return self.conformal_factor(x)[:, None, None] * np.eye(4)

    def scale(self, x):
        r = np.sqrt(1.0 + np.einsum("pi,pi->p", x, x))
        return np.repeat(r[:, None], 4, axis=1)

    @staticmethod
    def from_polar(p):
        psi, eta, xi1, xi2 = p.T
        u = _hopf(eta, xi1, xi2)
        return u * (np.sin(psi) / (1.0 - np.cos(psi)))[:, None]

    @staticmethod
    def embed(x):
        """Inverse stereographic map to the unit sphere in R^5."""
        r2 = np.einsum("pi,pi->p", x, x)
        y0 = (r2 - 1.0) / (r2 + 1.0)
        return np.concatenate([y0[:, None], 2.0 * x / (1.0 + r2)[:, None]], axis=1)

    def recenter(self, x):
        # inversion x -> x/|x|^2 is an isometry of the chart metric; using it
        # outside the unit ball avoids the cancellation near the pole
        r2 = np.einsum("pi,pi->p", x, x)
        far = r2 > 1.0
        if not far.any():
            return x, None
        y = x.copy()
        y[far] = x[far] / r2[far, None]
        jac = np.broadcast_to(np.eye(4), (len(x), 4, 4)).copy()
        xf, rf = x[far], r2[far]
        jac[far] = (np.eye(4) - 2.0 * np.einsum("pa,pb->pab", xf, xf) / rf[:, None, None]) / rf[:, None, None]
        return y, jac

    def lattice(self, sites):
        n = _sites4(sites)
        th, wf = fejer_weights(n[0])
        psi = Axis(math.pi, n[0], ANALYTIC, nodes=th, weights=wf * np.sin(th) ** 2)
        th, wf = fejer_weights(n[1])
        eta = Axis(math.pi / 2, n[1], ANALYTIC, nodes=th / 2, weights=wf / 4)
        xi1 = Axis(2 * math.pi, n[2])
        xi2 = Axis(2 * math.pi, n[3])

        def inv_density(x):
            return 1.0 / self.conformal_factor(x) ** 2

        return ChartLattice([psi, eta, xi1, xi2], to_chart=self.from_polar,
                            weight_factor=inv_density, name=self.name)

    def lattice_step(self, x, lat):
        # the mapped lattice has no chart neighbours: always use the sampler
        return np.full((len(x), 4), np.nan)

    def galerkin_basis(self):
        out = [lambda x: np.ones(len(x))]
        out += [lambda x, i=i: self.embed(x)[:, i] for i in range(5)]
        # the last diagonal square is dependent on the others through |y| = 1
        out += [lambda x, i=i, j=j: self.embed(x)[:, i] * self.embed(x)[:, j]
                for i in range(5) for j in range(i, 5) if (i, j) != (4, 4)]
        return out

    def random_function(self, rng, amplitude=1.0, degree=2):
        c1 = rng.normal(size=5) * amplitude
        c2 = rng.normal(size=(5, 5)) * amplitude / 2
        c0 = rng.normal() * amplitude

        def f(x):
            y = self.embed(x)
            out = c0 + y @ c1
            if degree >= 2:
                out = out + np.einsum("pi,ij,pj->p", y, c2, y, optimize=True)
            return out
        return f


class SphereTimesCircle(Background):
    """Product S^3(1) x S^1(L) in Hopf coordinates ``(eta, xi1, xi2, t)``.

    ``g = d eta^2 + sin^2 eta d xi1^2 + cos^2 eta d xi2^2 + dt^2``.  The eta
    axis is analytic-interior; the quadrature uses Fejér nodes in ``cos 2 eta``
    so smooth functions on S^3 integrate spectrally.
    """

    name = "s3xs1"
    conformally_flat = True
    euler_characteristic = 0

    def __init__(self, extent: float = 2 * math.pi):
        self.extent = float(extent)
        self.periods = (None, 2 * math.pi, 2 * math.pi, self.extent)

    def metric(self, x):
        g = np.zeros((len(x), 4, 4))
        s, c = np.sin(x[:, 0]), np.cos(x[:, 0])
        g[:, 0, 0] = 1.0
        g[:, 1, 1] = s * s
        g[:, 2, 2] = c * c
        g[:, 3, 3] = 1.0
        return g

    def scale(self, x):
        out = np.ones((len(x), 4))
        out[:, 0] = np.abs(np.sin(2.0 * x[:, 0]))
        return out

    def lattice(self, sites):
        n = _sites4(sites)
        th, wf = fejer_weights(n[0])
        eta = th / 2
        eta_ax = Axis(math.pi / 2, n[0], ANALYTIC, nodes=eta,
                      weights=wf / (4 * np.sin(eta) * np.cos(eta)))
        return ChartLattice([eta_ax, Axis(2 * math.pi, n[1]), Axis(2 * math.pi, n[2]),
                             Axis(self.extent, n[3])], name=self.name)

    def lattice_step(self, x, lat):
        h = np.broadcast_to(lat.spacing, (len(x), 4)).copy()
        eta = x[:, 0]
        near = (eta - 2 * h[:, 0] <= 0.0) | (eta + 2 * h[:, 0] >= math.pi / 2)
        h[near, 0] = np.nan
        return h

    @staticmethod
    def embed(x):
        return _hopf(x[:, 0], x[:, 1], x[:, 2])

    @staticmethod
    def _hopf_tangent(x):
        """Rows d y / d(eta, xi1, xi2) of the embedding, shape (P, 3, 4)."""
        eta, xi1, xi2 = x[:, 0], x[:, 1], x[:, 2]
        s, c = np.sin(eta), np.cos(eta)
        z = np.zeros_like(s)
        return np.stack([
            np.stack([c * np.cos(xi1), c * np.sin(xi1), -s * np.cos(xi2), -s * np.sin(xi2)], -1),
            np.stack([-s * np.sin(xi1), s * np.cos(xi1), z, z], -1),
            np.stack([z, z, -c * np.sin(xi2), c * np.cos(xi2)], -1),
        ], axis=1)

    def recenter(self, x):
        # left multiplication by a unit quaternion is an isometry of S^3; it
        # moves every site to eta = pi/4, far from both Hopf axes
        y = self.embed(x)
        target = np.array([1.0, 0.0, 1.0, 0.0]) / math.sqrt(2.0)
        q = _quat_mul(np.broadcast_to(target, y.shape), y * np.array([1.0, -1.0, -1.0, -1.0]))
        xc = np.zeros_like(x)
        xc[:, 0] = math.pi / 4
        xc[:, 3] = x[:, 3]
        Ec = self._hopf_tangent(xc)
        inv_norm = np.array([1.0, 2.0, 2.0])  # 1 / (1, sin^2, cos^2) at eta = pi/4
        jac = np.zeros((len(x), 4, 4))
        jac[:, :3, :3] = inv_norm[None, :, None] * np.einsum(
            "pai,pij,pbj->pab", Ec, _left_matrix(q), self._hopf_tangent(x))
        jac[:, 3, 3] = 1.0
        return xc, jac

    def coframe(self, x):
        """Left-invariant orthonormal coframe on S^3 plus ``dt``.

        Smooth across the coordinate singularities of the Hopf chart, unlike
        the Cholesky coframe.
        """
        eta, xi1, xi2 = x[:, 0], x[:, 1], x[:, 2]
        y = _hopf(eta, xi1, xi2)
        s, c = np.sin(eta), np.cos(eta)
        dy = np.zeros((len(x), 3, 4))
        dy[:, 0] = np.stack([c * np.cos(xi1), c * np.sin(xi1), -s * np.cos(xi2), -s * np.sin(xi2)], -1)
        dy[:, 1] = np.stack([-s * np.sin(xi1), s * np.cos(xi1), 0 * s, 0 * s], -1)
        dy[:, 2] = np.stack([0 * s, 0 * s, -c * np.sin(xi2), c * np.cos(xi2)], -1)
        a, b, cc, d = y.T
        frames = np.stack([
            np.stack([-b, a, d, -cc], -1),
            np.stack([-cc, -d, a, b], -1),
            np.stack([-d, cc, -b, a], -1),
        ], axis=1)  # (P, 3, 4): left translates of i, j, k
        theta = np.zeros((len(x), 4, 4))
        theta[:, :3, :3] = np.einsum("pai,pmi->pam", frames, dy)
        theta[:, 3, 3] = 1.0
        return theta

    def galerkin_basis(self):
        k = 2 * math.pi / self.extent
        sphere = [lambda x: np.ones(len(x))] + [lambda x, i=i: self.embed(x)[:, i] for i in range(4)]
        circle = [lambda x: np.ones(len(x)), lambda x: np.cos(k * x[:, 3]), lambda x: np.sin(k * x[:, 3])]
        return [lambda x, a=a, b=b: a(x) * b(x) for b in circle for a in sphere]

    def random_function(self, rng, amplitude=1.0, degree=2):
        k = 2 * math.pi / self.extent
        c1 = rng.normal(size=(3, 4)) * amplitude
        c2 = rng.normal(size=(3, 4, 4)) * amplitude / 2
        c0 = rng.normal(size=3) * amplitude

        def f(x):
            y = self.embed(x)
            t = x[:, 3] * k
            tb = np.stack([np.ones_like(t), np.cos(t), np.sin(t)], axis=1)
            coeff = c0[None, :] + y @ c1.T
            if degree >= 2:
                coeff = coeff + np.einsum("pi,kij,pj->pk", y, c2, y, optimize=True)
            return np.einsum("pk,pk->p", coeff, tb)
        return f

    def describe(self):
        return {"geometry": self.name, "extent": self.extent}


def make_background(name: str, extent: Optional[float] = None, epsilon: float = 0.05,
                    seed: int = 0) -> Background:
    if name == "flat_t4":
        return FlatTorus(1.0 if extent is None else extent)
    if name == "perturbed_flat":
        return PerturbedFlat(1.0 if extent is None else extent, epsilon=epsilon, seed=seed)
    if name == "round_s4":
        return RoundSphere()
    if name == "s3xs1":
        return SphereTimesCircle(2 * math.pi if extent is None else extent)
    raise KeyError(f"unknown geometry {name!r}; expected one of {', '.join(GEOMETRIES)}")
