"""Q-curvature, the conformal functionals and the global invariants.

Lattice functionals are evaluated in integrated-by-parts form so that at
most two derivatives of ``w`` and of the metric curvature are needed; the
pointwise operators (Q, Paneitz) keep their full fourth-order form for
site-level checks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from . import algebra
from .calculus import Calc, Field, log_mean_exp, sup
from .geometry import ConformalBackground, curvature_pack, map_sites
from .lattice import ChartLattice

EIGHT_PI2 = 8.0 * math.pi ** 2


class HypothesisError(ValueError):
    """A theorem hypothesis (sign, positivity, bound) does not hold."""


class IterationLimitError(RuntimeError):
    """An iteration did not converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


# --------------------------------------------------------------------------
# pointwise operators
# --------------------------------------------------------------------------

def q_curvature(calc: Calc, x: np.ndarray) -> dict:
    """Q from scalar curvature and Ricci, cross-checked against the Schouten form."""
    R = calc.scalar(x)
    lapR = calc.laplacian(calc.scalar, "")(x)
    g = calc.metric(x)
    ginv = np.linalg.inv(g)
    ric = calc.ricci(x)
    ric2 = algebra.inner(ric, ric, ginv)
    Q = (-lapR + R ** 2 - 3.0 * ric2) / 12.0
    J = calc.J(x)
    lapJ = calc.laplacian(calc.J, "")(x)
    P = calc.schouten(x)
    Q_alt = -0.5 * lapJ + J ** 2 - algebra.inner(P, P, ginv)
    return {"Q": Q, "Q_schouten": Q_alt, "residual": sup(Q - Q_alt)}


def paneitz_apply(calc: Calc, phi: Field, x: np.ndarray) -> np.ndarray:
    """Delta^2 phi - div((2/3) R grad phi - 2 Ric(grad phi, .)).

    With the analyst's Laplacian ``Delta = g^ab nabla_a nabla_b`` this is the
    conformally covariant fourth-order operator; on the round sphere it is
    ``Delta^2 - 2 Delta``.
    """
    lap = calc.laplacian(phi, "")

    def flux(y):
        ginv = calc.inverse_metric(y)
        dphi = calc.d(phi)(y)
        up = np.einsum("pab,pb->pa", ginv, dphi)
        ric_up = np.einsum("pac,pcd,pdb->pab", ginv, calc.ricci(y), ginv, optimize=True)
        return (2.0 / 3.0) * calc.scalar(y)[:, None] * up - 2.0 * np.einsum("pab,pb->pa", ric_up, dphi)

    div = np.einsum("paa->p", calc.nabla(flux, "u")(x))
    return calc.laplacian(lap, "")(x) - div


def hat_calc(calc: Calc, w: Field) -> Calc:
    return Calc(ConformalBackground(calc.bg, w), calc.mode, calc.depth, calc.lattice, calc.factor)


def paneitz_covariance_residual(calc: Calc, w: Field, phi: Field, x: np.ndarray) -> dict:
    """e^{4w} P_hat phi - P phi for the metric e^{2w} g."""
    lhs = np.exp(4.0 * w(x)) * paneitz_apply(hat_calc(calc, w), phi, x)
    rhs = paneitz_apply(calc, phi, x)
    return {"residual": lhs - rhs, "residual_sup": sup(lhs - rhs), "scale": sup(rhs)}


def q_transformation_residual(calc: Calc, w: Field, x: np.ndarray) -> dict:
    """e^{4w} Q_hat - Q - P w / 2."""
    Qh = q_curvature(hat_calc(calc, w), x)["Q"]
    Q = q_curvature(calc, x)["Q"]
    Pw = paneitz_apply(calc, w, x)
    res = np.exp(4.0 * w(x)) * Qh - Q - 0.5 * Pw
    return {"residual": res, "residual_sup": sup(res), "scale": max(sup(Q), sup(0.5 * Pw))}


# --------------------------------------------------------------------------
# lattice data
# --------------------------------------------------------------------------

@dataclass
class LatticeGeometry:
    """Background curvature fields sampled once on a quadrature lattice."""

    calc: Calc
    lat: ChartLattice
    x: np.ndarray
    vol: np.ndarray
    ginv: np.ndarray
    R: np.ndarray
    ric: np.ndarray
    J: np.ndarray
    P2: np.ndarray
    P02: np.ndarray
    Wp2: np.ndarray
    Wm2: np.ndarray

    @classmethod
    def build(cls, calc: Calc, lat: ChartLattice) -> "LatticeGeometry":
        x = lat.points
        pack = curvature_pack(calc, x)
        return cls(calc, lat, x, pack.vol, pack.ginv, pack.Rscal, pack.Ric, pack.J,
                   pack.norm2(pack.P), pack.norm2(pack.P0), pack.norm2(pack.Wplus), pack.norm2(pack.Wminus))

    def integrate(self, values: np.ndarray) -> float:
        return self.lat.integrate(values, self.vol)

    @property
    def volume(self) -> float:
        return self.integrate(np.ones(len(self.x)))

    @property
    def total_Q(self) -> float:
        # the Laplacian term integrates to zero on a closed manifold
        return self.integrate(self.J ** 2 - self.P2)

    def describe(self) -> dict:
        return {"geometry": self.calc.bg.name, "sites": list(self.lat.shape), "volume": self.volume}


class ConformalFactorField:
    """A conformal factor with cached lattice values and derivatives."""

    def __init__(self, w: Field, geo: LatticeGeometry):
        self.w = w
        self.geo = geo
        self.refresh()

    def refresh(self):
        x, calc = self.geo.x, self.geo.calc
        self.values = map_sites(self.w, x, 4096)
        self.grad = map_sites(calc.d(self.w), x, 4096)
        self.lap = map_sites(calc.laplacian(self.w, ""), x, 1024)
        self._derived()

    def _derived(self):
        self.grad2 = np.einsum("pab,pa,pb->p", self.geo.ginv, self.grad, self.grad, optimize=True)
        self.e2w = np.exp(2.0 * self.values)
        self.e4w = np.exp(4.0 * self.values)

    def shifted(self, c: float) -> "ConformalFactorField":
        """The field w + c, reusing derivative caches."""
        base = self.w
        out = object.__new__(ConformalFactorField)
        out.w = lambda y: base(y) + c
        out.geo = self.geo
        out.values = self.values + c
        out.grad, out.lap = self.grad, self.lap
        out._derived()
        return out

    def cache_defect(self) -> float:
        fresh = ConformalFactorField(self.w, self.geo)
        return max(sup(fresh.values - self.values), sup(fresh.grad - self.grad), sup(fresh.lap - self.lap),
                   sup(fresh.e4w - self.e4w) / max(sup(fresh.e4w), 1e-300))

    def log_average_e4w(self) -> float:
        return log_mean_exp(4.0 * self.values, self.geo.vol * self.geo.lat.weights)


# --------------------------------------------------------------------------
# functionals
# --------------------------------------------------------------------------

def functional_I(wf: ConformalFactorField, sign: int = 1) -> float:
    geo = wf.geo
    W2 = geo.Wp2 if sign > 0 else geo.Wm2
    total = geo.integrate(W2)
    return 4.0 * geo.integrate(wf.values * W2) - total * wf.log_average_e4w()


def paneitz_quadratic(wf: ConformalFactorField) -> float:
    """int w P w, integrated by parts to second order."""
    geo = wf.geo
    ric_up = np.einsum("pac,pcd,pdb->pab", geo.ginv, geo.ric, geo.ginv, optimize=True)
    ric_ww = np.einsum("pab,pa,pb->p", ric_up, wf.grad, wf.grad, optimize=True)
    return geo.integrate(wf.lap ** 2 + (2.0 / 3.0) * geo.R * wf.grad2 - 2.0 * ric_ww)


def functional_II(wf: ConformalFactorField) -> float:
    geo = wf.geo
    # int Q w with the Laplacian moved onto w
    Qw = geo.integrate(-0.5 * geo.J * wf.lap + (geo.J ** 2 - geo.P2) * wf.values)
    return paneitz_quadratic(wf) + 4.0 * Qw - geo.total_Q * wf.log_average_e4w()


def functional_III(wf: ConformalFactorField) -> float:
    geo = wf.geo
    return (12.0 * geo.integrate((wf.lap + wf.grad2) ** 2)
            - 4.0 * geo.integrate(geo.R * wf.lap + geo.R * wf.grad2))


def functional_IV(wf: ConformalFactorField) -> float:
    geo = wf.geo
    return geo.integrate((geo.R + 6.0 * wf.grad2) * wf.e2w) / math.sqrt(geo.integrate(wf.e4w))


def functional_IV_rescaled(wf: ConformalFactorField, chunk: int = 1024) -> float:
    """Total scalar curvature over root volume, computed in the metric e^{2w} g."""
    geo = wf.geo
    hc = hat_calc(geo.calc, wf.w)
    Rh = map_sites(hc.scalar, geo.x, chunk)
    return geo.integrate(Rh * wf.e4w) / math.sqrt(geo.integrate(wf.e4w))


@dataclass
class FunctionalReport:
    I_plus: float
    I_minus: float
    II: float
    III: float
    IV: float
    Phi: float
    kappa: float
    totalQ: float
    gammas: tuple
    volume_hat: float
    notes: dict = field(default_factory=dict)

    def combination_defect(self) -> float:
        g1p, g1m, g2, g3, g4 = self.gammas
        return abs(self.Phi - (g1p * self.I_plus + g1m * self.I_minus + g2 * self.II + g3 * self.III + g4 * self.IV))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gammas"] = list(self.gammas)
        return d


def kappa(geo: LatticeGeometry, gammas: Sequence[float]) -> float:
    g1p, g1m, g2 = gammas[0], gammas[1], gammas[2]
    return -g1p * geo.integrate(geo.Wp2) - g1m * geo.integrate(geo.Wm2) - g2 * geo.total_Q


def phi(wf: ConformalFactorField, gammas: Sequence[float]) -> FunctionalReport:
    gammas = tuple(float(g) for g in gammas)
    g1p, g1m, g2, g3, g4 = gammas
    Ip = functional_I(wf, +1)
    Im = functional_I(wf, -1)
    II = functional_II(wf)
    III = functional_III(wf)
    IV = functional_IV(wf)
    total = g1p * Ip + g1m * Im + g2 * II + g3 * III + g4 * IV
    return FunctionalReport(Ip, Im, II, III, IV, total, kappa(wf.geo, gammas), wf.geo.total_Q, gammas,
                            wf.geo.integrate(wf.e4w),
                            notes={"quadratic_term_measure": "dv of the background metric"})


# --------------------------------------------------------------------------
# global invariants and the certificate
# --------------------------------------------------------------------------

def total_invariants(geo: LatticeGeometry) -> dict:
    totalQ = geo.total_Q
    Wp, Wm = geo.integrate(geo.Wp2), geo.integrate(geo.Wm2)
    return {"totalQ": totalQ,
            "chern_gauss_bonnet_chi_estimate": (totalQ + (Wp + Wm) / 8.0) / (4.0 * math.pi ** 2),
            "signature_estimate": (Wp - Wm) / (48.0 * math.pi ** 2),
            "Wplus_l2": Wp, "Wminus_l2": Wm, "volume": geo.volume}


def adams_check(totalQ: float, tol: float = 1e-6) -> dict:
    margin = EIGHT_PI2 - totalQ
    boundary = abs(margin) <= tol * EIGHT_PI2
    return {"ok": bool(margin > 0 and not boundary), "margin": margin, "boundary": bool(boundary)}


def conformal_laplacian_lambda1(calc: Calc, lat: ChartLattice, basis: Optional[list] = None,
                                tol: float = 1e-8, max_iter: int = 200, chunk: int = 4096) -> dict:
    """Lowest eigenvalue of -6 Delta + R on the span of the background's trial functions.

    Stiffness and mass matrices are assembled by lattice quadrature; the
    generalised eigenproblem is solved by shifted inverse iteration.
    """
    basis = basis if basis is not None else calc.bg.galerkin_basis()
    x = lat.points

    def site(xs):
        g = calc.metric(xs)
        ginv = np.linalg.inv(g)
        vals = np.stack([f(xs) for f in basis], axis=1)
        grads = np.stack([calc.d(f)(xs) for f in basis], axis=1)
        return {"v": vals, "dv": grads, "ginv": ginv, "vol": np.sqrt(np.linalg.det(g)), "R": calc.scalar(xs)}

    s = map_sites(site, x, chunk)
    wq = s["vol"] * lat.weights
    M = np.einsum("p,pi,pj->ij", wq, s["v"], s["v"], optimize=True)
    K = (6.0 * np.einsum("p,pab,pia,pjb->ij", wq, s["ginv"], s["dv"], s["dv"], optimize=True)
         + np.einsum("p,p,pi,pj->ij", wq, s["R"], s["v"], s["v"], optimize=True))
    K = 0.5 * (K + K.T)
    M = 0.5 * (M + M.T)
    # shift below the spectrum: Rayleigh quotient bound from the smallest R
    shift = float(np.min(s["R"])) - 1.0
    lu = scipy.linalg.lu_factor(K - shift * M)
    c = np.zeros(len(basis))
    c[0] = 1.0
    lam, res = math.nan, math.inf
    for it in range(1, max_iter + 1):
        c = scipy.linalg.lu_solve(lu, M @ c)
        c /= math.sqrt(c @ M @ c)
        lam = float(c @ K @ c)
        res = float(np.linalg.norm(K @ c - lam * (M @ c)))
        if res < tol:
            break
    else:
        raise IterationLimitError(f"inverse iteration stalled after {max_iter} steps", res)
    field_vals = s["v"] @ c
    if field_vals.sum() < 0:
        c, field_vals = -c, -field_vals
    return {"lambda1": lam, "coefficients": c, "eigenfield": field_vals, "residual": res,
            "iterations": it, "positive": bool(np.all(field_vals > 0))}


def certify(chi: int, tau: int, yamabe: float) -> dict:
    """Topological sufficient condition for unobstructedness."""
    if not yamabe > 0:
        raise HypothesisError(f"the Yamabe invariant must be positive, got {yamabe}")
    lhs = 2 * int(chi) + 3 * int(tau)
    rhs = -yamabe ** 2 / (24.0 * math.pi ** 2)
    totalQ = 2.0 * math.pi ** 2 * lhs
    return {"unobstructed": bool(lhs >= rhs), "lhs": lhs, "rhs": rhs,
            "totalQ": totalQ, "totalQ_bound": -yamabe ** 2 / 12.0,
            "verdict": "UNOBSTRUCTED" if lhs >= rhs else "NOT CERTIFIED"}
