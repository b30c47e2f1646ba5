"""Metric fields, curvature decomposition and classical operators.

Conventions: ``[nabla_a, nabla_b] v^c = R_ab^c_d v^d``, so the unit sphere
has ``R_abcd = g_ac g_bd - g_ad g_bc``; ``Ric_bd = R_ab^a_d``; the Laplacian
is ``g^ab nabla_a nabla_b`` (non-positive); the divergence of a form
contracts the first index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import algebra
from .calculus import Calc, Field, connection_terms, pull_back, sup
from .models import Background, DegenerateMetricError, check_finite

CHUNK = 8192
_threads = 1


def set_threads(n: int) -> None:
    """Worker threads for :func:`map_sites`; chunk boundaries do not depend on it."""
    global _threads
    if n < 1:
        raise ValueError("threads must be >= 1")
    _threads = int(n)


class MalformedCurvatureError(ValueError):
    """Raised when a curvature tensor misses its symmetries."""


def map_sites(fn: Callable[[np.ndarray], object], x: np.ndarray, chunk: int = CHUNK):
    """Evaluate ``fn`` on chunks of ``x`` and concatenate array results."""
    blocks = [x[s:s + chunk] for s in range(0, len(x), chunk)]
    if _threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(_threads) as pool:
            parts = list(pool.map(fn, blocks))
    else:
        parts = [fn(b) for b in blocks]
    if isinstance(parts[0], dict):
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(len(parts[0])))
    return np.concatenate(parts)


@dataclass
class MetricField:
    """Metric samples at chart points, with inverse and volume density."""

    points: np.ndarray
    g: np.ndarray
    ginv: np.ndarray
    vol: np.ndarray
    sampler: Optional[Callable[[np.ndarray], np.ndarray]] = None
    weight: int = 0

    @classmethod
    def sample(cls, bg: Background, points: np.ndarray, weight: int = 0) -> "MetricField":
        g = bg.metric(points)
        check_finite(g, "metric", points)
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            eig = np.linalg.eigvalsh(g).min(axis=1)
            raise DegenerateMetricError(f"degenerate metric at site {int(np.argmin(eig))}")
        ginv = np.linalg.inv(g)
        return cls(points, g, ginv, np.sqrt(np.linalg.det(g)), bg.metric, weight)

    def identity_defect(self) -> float:
        return sup(np.einsum("pab,pbc->pac", self.g, self.ginv) - np.eye(4))


@dataclass
class CurvaturePack:
    points: np.ndarray
    g: np.ndarray
    ginv: np.ndarray
    vol: np.ndarray
    Gamma: np.ndarray
    Rm: np.ndarray
    Ric: np.ndarray
    Rscal: np.ndarray
    W: np.ndarray
    Wplus: np.ndarray
    Wminus: np.ndarray
    P: np.ndarray
    J: np.ndarray
    P0: np.ndarray
    C: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def norm2(self, T: np.ndarray) -> np.ndarray:
        return algebra.inner(T, T, self.ginv)

    def reassembly_residual(self) -> np.ndarray:
        return self.Rm - self.W - algebra.kulkarni_nomizu(self.g, self.P)


@dataclass
class TwoFormField:
    omega: np.ndarray
    dual: np.ndarray
    sd_part: np.ndarray
    asd_part: np.ndarray

    @classmethod
    def from_values(cls, omega: np.ndarray, g: np.ndarray) -> "TwoFormField":
        omega = 0.5 * (omega - np.swapaxes(omega, 1, 2))
        dual = algebra.hodge(omega, g)
        return cls(omega, dual, 0.5 * (omega + dual), 0.5 * (omega - dual))


# --------------------------------------------------------------------------
# curvature
# --------------------------------------------------------------------------

def christoffel(calc: Calc, x: np.ndarray) -> np.ndarray:
    """Levi-Civita symbols Gamma^c_ab at chart points ``x``."""
    return calc.christoffel(x)


def riemann(calc: Calc, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(R_ab^c_d, R_abcd) at ``x``; the lowered tensor is symmetry-projected."""
    up = calc.riemann_up(x)
    low = np.einsum("pce,pabed->pabcd", calc.metric(x), up)
    return up, algebra.curvature_projection(low)


def decompose(Rm: np.ndarray, g: np.ndarray, tol: float = 1e-6, **extra) -> CurvaturePack:
    """Split a lowered curvature tensor into Weyl and Schouten parts."""
    scale = max(sup(Rm), 1.0)
    defect = sup(Rm - algebra.curvature_projection(Rm))
    if defect > tol * scale:
        raise MalformedCurvatureError(f"curvature symmetry defect {defect:.3e}")
    ginv = np.linalg.inv(g)
    Ric = np.einsum("pac,pabcd->pbd", ginv, Rm)
    R = np.einsum("pbd,pbd->p", ginv, Ric)
    P = 0.5 * (Ric - (R / 6.0)[:, None, None] * g)
    J = np.einsum("pab,pab->p", ginv, P)
    W = Rm - algebra.kulkarni_nomizu(g, P)
    Wstar = algebra.hodge_second_pair(W, g)
    return CurvaturePack(
        points=extra.pop("points", None), g=g, ginv=ginv, vol=np.sqrt(np.linalg.det(g)),
        Gamma=extra.pop("Gamma", None), Rm=Rm, Ric=Ric, Rscal=R, W=W,
        Wplus=0.5 * (W + Wstar), Wminus=0.5 * (W - Wstar), P=P, J=J,
        P0=P - (J / 4.0)[:, None, None] * g, extras=extra)


def invariant_points(calc: Calc, x: np.ndarray) -> np.ndarray:
    """Chart points at which metric scalar invariants are best evaluated."""
    return calc.bg.recenter(x)[0]


def curvature_pack(calc: Calc, x: np.ndarray, cotton: bool = False) -> CurvaturePack:
    def one(xs):
        G = calc.christoffel(xs)
        g = calc.metric(xs)
        y, jac = calc.bg.recenter(xs)
        low = np.einsum("pce,pabed->pabcd", calc.metric(y), calc.riemann_up(y))
        low = algebra.curvature_projection(pull_back(low, jac))
        return {"G": G, "Rm": low, "g": g}

    parts = map_sites(one, x)
    pack = decompose(parts["Rm"], parts["g"], points=x, Gamma=parts["G"])
    if cotton:
        pack.C, pack.B = cotton_bach(calc, x)
    return pack


def weyl_field(calc: Calc) -> Field:
    """W_abcd as a field (two derivative levels)."""

    def W(x):
        g = calc.metric(x)
        _, Rm = riemann(calc, x)
        return decompose(Rm, g).W

    return W


def cotton_field(calc: Calc) -> Field:
    nP = calc.nabla(calc.schouten, "dd")

    def C(x):
        d = nP(x)  # d[p, m, a, b] = nabla_m P_ab
        return np.einsum("pbca->pabc", d) - np.einsum("pcba->pabc", d)

    return C


def cotton_bach(calc: Calc, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cotton C_abc = nabla_b P_ca - nabla_c P_ba and Bach B_ab.

    B_ab = -nabla^c C_abc + P^dc W_dacb.
    """
    C = cotton_field(calc)
    nC = calc.nabla(C, "ddd")

    def one(xs):
        ginv = calc.inverse_metric(xs)
        Cx = C(xs)
        div = np.einsum("pmc,pmabc->pab", ginv, nC(xs))
        pack = curvature_pack(calc, xs)
        Pup = np.einsum("pda,pcb,pab->pdc", ginv, ginv, pack.P, optimize=True)
        return Cx, -div + np.einsum("pdc,pdacb->pab", Pup, pack.W)

    return map_sites(one, x, 512)


def bianchi_residual(calc: Calc, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(n-3) C_abc - nabla^d W_dabc, together with |nabla Rm| for scaling."""
    C = cotton_field(calc)
    nW = calc.nabla(weyl_field(calc), "dddd")
    nR = calc.nabla(lambda y: riemann(calc, y)[1], "dddd")
    ginv = calc.inverse_metric(x)
    res = C(x) - np.einsum("pmd,pmdabc->pabc", ginv, nW(x))
    scale = np.sqrt(algebra.inner(nR(x), nR(x), ginv))
    return res, scale


def contracted_bianchi_residual(calc: Calc, x: np.ndarray) -> np.ndarray:
    """nabla^m P_mk - nabla_k J."""
    nP = calc.nabla(calc.schouten, "dd")(x)
    dJ = calc.d(calc.J)(x)
    return np.einsum("pam,pamk->pk", calc.inverse_metric(x), nP) - dJ


def commutator_residual(calc: Calc, omega: Field, x: np.ndarray) -> np.ndarray:
    """[nabla_a, nabla_b] w_c - R_abc^d w_d for a one-form field."""
    nn = calc.nabla(calc.nabla(omega, "d"), "dd")(x)
    comm = nn - np.swapaxes(nn, 1, 2)
    up, _ = riemann(calc, x)
    g = calc.metric(x)
    # R_abc^d = g_ce R_ab^e_f g^fd
    R_abc_d = np.einsum("pce,pabef,pfd->pabcd", g, up, np.linalg.inv(g), optimize=True)
    return comm - np.einsum("pabcd,pd->pabc", R_abc_d, omega(x))


# --------------------------------------------------------------------------
# forms and classical operators
# --------------------------------------------------------------------------

def divergence(calc: Calc, T: Field, kinds: str) -> Field:
    """Contract the derivative with the first index of ``T`` (lowered)."""
    nT = calc.nabla(T, kinds)

    def div(x):
        return np.einsum("pma,pma...->p...", calc.inverse_metric(x), nT(x))

    return div


def exterior_d1(calc: Calc, alpha: Field) -> Field:
    nA = calc.nabla(alpha, "d")

    def d1(x):
        n = nA(x)
        return n - np.swapaxes(n, 1, 2)

    return d1


def exterior_d2(calc: Calc, omega: Field) -> Field:
    nW = calc.nabla(omega, "dd")

    def d2(x):
        n = nW(x)
        return n + np.transpose(n, (0, 2, 3, 1)) + np.transpose(n, (0, 3, 1, 2))

    return d2


def hodge_laplacian(calc: Calc, omega: Field) -> Field:
    """d delta + delta d on two-forms, with delta the divergence.

    With the divergence convention this is minus the positive Hodge
    Laplacian, matching the sign of the rough Laplacian.
    """
    dd = exterior_d1(calc, divergence(calc, omega, "dd"))
    ddelta = divergence(calc, exterior_d2(calc, omega), "ddd")

    def lap(x):
        return dd(x) + ddelta(x)

    return lap


def weyl_action(W: np.ndarray, omega: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """W(w)_ab = 1/2 W_abcd w^cd."""
    wup = np.einsum("pac,pbd,pcd->pab", ginv, ginv, omega, optimize=True)
    return 0.5 * np.einsum("pabcd,pcd->pab", W, wup)


def hodge_weitzenboeck_residual(calc: Calc, omega: Field, x: np.ndarray) -> dict:
    """Residual of the two-form Weitzenboeck identity.

    Returns the residual field of ``Delta_2 w - (Delta w + 2 W(w) - R/3 w)``;
    for self-dual ``w`` the curvature term is ``2 W+(w)``.  Also reports
    whether ``w`` is a self-dual harmonic form on a positive-scalar ASD
    background, where the identity forces it to vanish.
    """
    lap2 = hodge_laplacian(calc, omega)
    rough = calc.laplacian(omega, "dd")
    pack = curvature_pack(calc, x)
    w = omega(x)
    h = lap2(x)
    rhs = rough(x) + 2.0 * weyl_action(pack.W, w, pack.ginv) - (pack.Rscal / 3.0)[:, None, None] * w
    res = h - rhs
    sd = algebra.sd_part(w, pack.g)
    return {
        "residual": res,
        "residual_sup": sup(res),
        "hodge_laplacian_sup": sup(h),
        "self_dual": sup(w - sd) <= 1e-12 * max(1.0, sup(w)),
        "harmonic_sup": sup(h),
        "wplus_sup": sup(pack.Wplus),
        "R_min": float(pack.Rscal.min()),
    }


def killing_operator(calc: Calc, omega: Field, x: np.ndarray) -> np.ndarray:
    """K(w)_ij = nabla_i w_j + nabla_j w_i - 1/2 (div w) g_ij."""
    n = calc.nabla(omega, "d")(x)
    ginv = calc.inverse_metric(x)
    div = np.einsum("pab,pab->p", ginv, n)
    return n + np.swapaxes(n, 1, 2) - 0.5 * div[:, None, None] * calc.metric(x)


# --------------------------------------------------------------------------
# conformal change
# --------------------------------------------------------------------------

class ConformalBackground(Background):
    """The metric e^{2w} g over a base background."""

    def __init__(self, base: Background, w: Field):
        self.base = base
        self.w = w
        self.name = f"{base.name}*e^(2w)"
        self.periods = base.periods
        self.conformally_flat = base.conformally_flat
        self.euler_characteristic = base.euler_characteristic

    def metric(self, x):
        return np.exp(2.0 * self.w(x))[:, None, None] * self.base.metric(x)

    def scale(self, x):
        return self.base.scale(x)

    def lattice(self, sites):
        return self.base.lattice(sites)

    def lattice_step(self, x, lat):
        return self.base.lattice_step(x, lat)

    def coframe(self, x):
        return np.exp(self.w(x))[:, None, None] * self.base.coframe(x)

    def random_function(self, rng, amplitude=1.0, **kw):
        return self.base.random_function(rng, amplitude, **kw)

    def galerkin_basis(self):
        return self.base.galerkin_basis()


def conformal_rescale(calc: Calc, w: Field, x: np.ndarray) -> tuple[ConformalBackground, np.ndarray]:
    """Return the background e^{2w} g and the Schouten transformation residual."""
    hat = ConformalBackground(calc.bg, w)
    hcalc = Calc(hat, calc.mode, calc.depth, calc.lattice, calc.factor)
    g = calc.metric(x)
    ginv = np.linalg.inv(g)
    ups = calc.d(w)(x)
    hess = calc.nabla(calc.d(w), "d")(x)
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    norm2 = np.einsum("pab,pa,pb->p", ginv, ups, ups, optimize=True)
    predicted = (calc.schouten(x) - hess + np.einsum("pa,pb->pab", ups, ups)
                 - 0.5 * norm2[:, None, None] * g)
    return hat, hcalc.schouten(x) - predicted
