"""Standard tractors in a fixed scale.

A tractor ``V`` is stored by its components ``(sigma, mu_a, rho)`` relative to
the running metric, i.e. ``V = sigma Y + mu_a Z^a + rho X``.  Component
vectors are laid out as ``[sigma, mu_0, mu_1, mu_2, mu_3, rho]`` with ``mu``
lowered.  Tractor-valued tensors carry extra form indices between the site
axis and the tractor slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .calculus import Calc, connection_terms, sup

SIGMA, RHO = 0, 5
MU = slice(1, 5)


class WeightError(ValueError):
    """Raised when a density of the wrong conformal weight is supplied."""


@dataclass
class TractorField:
    """Tractor components per site; ``mu`` is lowered."""

    sigma: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    weight: int = 0

    def stack(self) -> np.ndarray:
        return np.concatenate([self.sigma[..., None], self.mu, self.rho[..., None]], axis=-1)

    @classmethod
    def unstack(cls, v: np.ndarray, weight: int = 0) -> "TractorField":
        return cls(v[..., SIGMA], v[..., MU], v[..., RHO], weight)

    def __sub__(self, other: "TractorField") -> "TractorField":
        return TractorField(self.sigma - other.sigma, self.mu - other.mu, self.rho - other.rho, self.weight)


TractorFn = Callable[[np.ndarray], np.ndarray]


def tractor_metric(ginv: np.ndarray) -> np.ndarray:
    """Matrix of h on component vectors: h(V, W) = mu.nu + sigma_V rho_W + sigma_W rho_V."""
    H = np.zeros((len(ginv), 6, 6))
    H[:, SIGMA, RHO] = H[:, RHO, SIGMA] = 1.0
    H[:, MU, MU] = ginv
    return H


def tractor_pair(V: TractorField, W: TractorField, ginv: np.ndarray) -> np.ndarray:
    extra = V.mu.ndim - 2
    G = ginv.reshape((len(ginv),) + (1,) * extra + (4, 4))
    return (np.einsum("...a,...ab,...b->...", V.mu, G, W.mu, optimize=True)
            + V.sigma * W.rho + W.sigma * V.rho)


def lower_tractor(V: TractorField, g: np.ndarray) -> TractorField:
    """Index-lowering involution: h(V, .) expressed in the same slot layout.

    The lowered components of ``V`` pair with a tractor by plain dot product
    when laid out as ``(rho, mu^a, sigma)``; this returns that layout.
    """
    ginv = np.linalg.inv(g)
    return TractorField(V.rho, np.einsum("pab,pb->pa", ginv, V.mu), V.sigma, V.weight)


def connection_matrix(P: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Algebraic part A_m of the tractor connection: nabla_m V = (LC) + A_m V."""
    n = len(g)
    A = np.zeros((n, 4, 6, 6))
    ginv = np.linalg.inv(g)
    Pmix = np.einsum("pmc,pce->pme", P, ginv)  # P_m^e
    for m in range(4):
        A[:, m, SIGMA, 1 + m] = -1.0
        A[:, m, MU, SIGMA] = P[:, m, :]
        A[:, m, MU, RHO] = g[:, m, :]
        A[:, m, RHO, MU] = -Pmix[:, m, :]
    return A


def tractor_nabla(calc: Calc, V: TractorFn, kinds: str = "") -> TractorFn:
    """Tractor connection on tractor-valued tensors.

    ``V`` maps points to arrays ``(P, *form, 6)``; ``kinds`` lists the form
    index types.  The derivative index is inserted first.
    """

    def nV(x):
        v = V(x)
        dv = calc.d(V)(x)
        G = calc.christoffel(x)
        out = dv + connection_terms(G, v, kinds + "n")
        # Levi-Civita on the lowered mu slot
        out[..., MU] -= np.einsum("pemb,p...e->pm...b", G, v[..., MU])
        A = connection_matrix(calc.schouten(x), calc.metric(x))
        extra = v.ndim - 2
        Ab = A.reshape((len(x), 4) + (1,) * extra + (6, 6))
        return out + np.einsum("pm...ij,p...j->pm...i", Ab, v)

    return nV


def thomas_D(calc: Calc, sigma: Callable, x: np.ndarray, weight: int = 1) -> TractorField:
    """(sigma, nabla sigma, -(Delta + J) sigma / n) for a weight-one density."""
    if weight != 1:
        raise WeightError(f"thomas_D needs a weight 1 density, got weight {weight}")
    s = sigma(x)
    lap = calc.laplacian(sigma, "")(x)
    return TractorField(s, calc.d(sigma)(x), -(lap + calc.J(x) * s) / 4.0, weight=0)


def tractor_connection(calc: Calc, V: Callable[[np.ndarray], TractorField], x: np.ndarray) -> TractorField:
    """nabla_a V for a tractor field; components carry the one-form index first."""
    nV = tractor_nabla(calc, lambda y: V(y).stack())(x)
    return TractorField.unstack(nV)


def projector_derivative_residual(calc: Calc, x: np.ndarray) -> float:
    """Frozen-coefficient connection on Y, Z^b, X against the projector table."""
    P, g = calc.schouten(x), calc.metric(x)
    A = connection_matrix(P, g)
    n = len(x)
    eY = np.zeros(6); eY[SIGMA] = 1.0
    eX = np.zeros(6); eX[RHO] = 1.0
    res = 0.0
    # nabla_k X = Z_k: mu_a = g_ka
    got = A @ eX
    want = np.zeros((n, 4, 6)); want[..., MU] = g
    res = max(res, sup(got - want))
    # nabla_k Y = P_kl Z^l: mu_a = P_ka
    got = A @ eY
    want = np.zeros((n, 4, 6)); want[..., MU] = P
    res = max(res, sup(got - want))
    # nabla_k Z_l = -P_kl X - g_kl Y, with Z_l carrying mu_a = g_la
    for l in range(4):
        eZ = np.zeros((n, 6)); eZ[:, MU] = g[:, l, :]
        got = np.einsum("pkij,pj->pki", A, eZ)
        want = np.zeros((n, 4, 6))
        want[..., SIGMA] = -g[:, :, l]
        want[..., RHO] = -P[:, :, l]
        res = max(res, sup(got - want))
    return res


def conformal_transform_tractor(V: TractorField, ups: np.ndarray, ginv: np.ndarray) -> TractorField:
    """Components in the scale e^{2w} g, with ``ups = dw`` (lowered)."""
    um = np.einsum("pab,pa,pb->p", ginv, ups, V.mu, optimize=True)
    uu = np.einsum("pab,pa,pb->p", ginv, ups, ups, optimize=True)
    return TractorField(V.sigma, V.mu + V.sigma[:, None] * ups,
                        V.rho - um - 0.5 * uu * V.sigma, V.weight)


def scale_change_matrix(ups: np.ndarray, ginv: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Matrix taking g-scale components to e^{2w} g-scale components.

    The component change above followed by the trivialisation factors
    ``(omega, omega, 1/omega)`` for ``(sigma, mu, rho)``, ``omega = e^w``; with it
    the tractor metric read in each scale's own inverse metric agrees.
    """
    n = len(ups)
    E = np.broadcast_to(np.eye(6), (n, 6, 6)).copy()
    E[:, MU, SIGMA] = ups
    E[:, RHO, MU] = -np.einsum("pab,pa->pb", ginv, ups)
    E[:, RHO, SIGMA] = -0.5 * np.einsum("pab,pa,pb->p", ginv, ups, ups, optimize=True)
    scale = np.concatenate([omega[:, None], np.repeat(omega[:, None], 4, axis=1), 1.0 / omega[:, None]], axis=1)
    return scale[:, :, None] * E


# --------------------------------------------------------------------------
# adjoint tractors (tractor two-forms) in the projector-pair basis
# --------------------------------------------------------------------------

@dataclass
class AdjointTractorTwoForm:
    """F = a (XY - YX) + b^l (XZ_l - Z_l X) + c^k (YZ_k - Z_k Y) + d^kl (Z_k Z_l - Z_l Z_k).

    ``d`` is antisymmetric and summed over all ordered pairs.  Every block
    carries the same leading form indices after the site axis.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def matrix(self, g: np.ndarray) -> np.ndarray:
        """Action on component vectors: (F V) = M v."""
        shape = self.a.shape
        extra = len(shape) - 1
        gb = g.reshape((len(g),) + (1,) * extra + (4, 4))
        b_low = np.einsum("...kl,...l->...k", gb, self.b)
        c_low = np.einsum("...kl,...l->...k", gb, self.c)
        d_mix = np.einsum("...km,...ml->...kl", gb, self.d)
        M = np.zeros(shape + (6, 6))
        M[..., SIGMA, SIGMA] = -self.a
        M[..., RHO, RHO] = self.a
        M[..., SIGMA, MU] = self.c
        M[..., MU, RHO] = -c_low
        M[..., MU, SIGMA] = -b_low
        M[..., RHO, MU] = self.b
        M[..., MU, MU] = 2.0 * d_mix
        return M

    @classmethod
    def from_matrix(cls, M: np.ndarray, ginv: np.ndarray) -> "AdjointTractorTwoForm":
        extra = M.ndim - 3
        gb = ginv.reshape((len(ginv),) + (1,) * extra + (4, 4))
        d = 0.5 * np.einsum("...km,...ml->...kl", gb, M[..., MU, MU])
        return cls(M[..., RHO, RHO], M[..., RHO, MU], M[..., SIGMA, MU], d)

    def blocks(self) -> dict:
        return {"XY": self.a, "XZ": self.b, "YZ": self.c, "ZZ": self.d}

    def __sub__(self, other: "AdjointTractorTwoForm") -> "AdjointTractorTwoForm":
        return AdjointTractorTwoForm(self.a - other.a, self.b - other.b, self.c - other.c, self.d - other.d)

    def sup_blocks(self) -> dict:
        return {k: sup(v) for k, v in self.blocks().items()}

    def sup(self) -> float:
        return max(self.sup_blocks().values())

    def is_antisymmetric(self, tol: float = 0.0) -> bool:
        """Antisymmetry in the first two form indices and of the d block."""
        ok = sup(self.d + np.swapaxes(self.d, -1, -2)) <= tol
        if self.a.ndim >= 3:
            for blk in self.blocks().values():
                ok &= sup(blk + np.swapaxes(blk, 1, 2)) <= tol
        return bool(ok)


def tractor_curvature(W: np.ndarray, C: np.ndarray, ginv: np.ndarray) -> AdjointTractorTwoForm:
    """kappa_ab as an adjoint two-form: ZZ-block W/2, XZ-block -C^l_ab."""
    P = len(W)
    Wup = np.einsum("pkc,pld,pabcd->pabkl", ginv, ginv, W, optimize=True)
    Cup = np.einsum("plc,pcab->pabl", ginv, C)
    zero = np.zeros((P, 4, 4))
    return AdjointTractorTwoForm(zero, -Cup, np.zeros((P, 4, 4, 4)), 0.5 * Wup)


def curvature_commutator(calc: Calc, V: TractorFn, x: np.ndarray) -> np.ndarray:
    """[nabla_a, nabla_b] V as component vectors (P, 4, 4, 6)."""
    nn = tractor_nabla(calc, tractor_nabla(calc, V), "d")(x)
    return nn - np.swapaxes(nn, 1, 2)


def metric_compatibility_residual(calc: Calc, V: TractorFn, W: TractorFn, x: np.ndarray) -> np.ndarray:
    """d_a h(V, W) - h(nabla_a V, W) - h(V, nabla_a W)."""

    def h(y):
        return np.einsum("pi,pij,pj->p", V(y), tractor_metric(calc.inverse_metric(y)), W(y), optimize=True)

    H = tractor_metric(calc.inverse_metric(x))
    nV = tractor_nabla(calc, V)(x)
    nW = tractor_nabla(calc, W)(x)
    return (calc.d(h)(x) - np.einsum("pai,pij,pj->pa", nV, H, W(x), optimize=True)
            - np.einsum("pi,pij,paj->pa", V(x), H, nW, optimize=True))


def almost_einstein_residual(calc: Calc, sigma: Callable, x: np.ndarray) -> np.ndarray:
    """Trace-free part of nabla_a nabla_b sigma + P_ab sigma."""
    hess = calc.nabla(calc.d(sigma), "d")(x)
    T = 0.5 * (hess + np.swapaxes(hess, 1, 2)) + calc.schouten(x) * sigma(x)[:, None, None]
    g = calc.metric(x)
    tr = np.einsum("pab,pab->p", np.linalg.inv(g), T)
    return T - 0.25 * tr[:, None, None] * g


def random_tractor(bg, rng: np.random.Generator, amplitude: float = 1.0) -> TractorFn:
    fs = [bg.random_function(rng, amplitude) for _ in range(6)]

    def V(x):
        return np.stack([f(x) for f in fs], axis=-1)

    return V
