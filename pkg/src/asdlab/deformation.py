"""Deformation-complex computations for W+-type sections.

A W+-type section ``U`` is a trace-free symmetric endomorphism of the
self-dual two-forms, stored as five coefficients against the SD basis of the
background coframe and expanded on demand to ``U_ijkl`` (all indices lower).
The splitting operator sends it to an adjoint-tractor-valued two-form.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from . import algebra
from .calculus import Calc, Field, constant_field, sup
from .geometry import ConformalBackground, curvature_pack, map_sites
from .lattice import ChartLattice
from .models import Background
from .tractor import AdjointTractorTwoForm, scale_change_matrix, tractor_nabla


class NotAntiSelfDualError(ValueError):
    """Raised when an identity needing W+ = 0 is run on a non-ASD background."""


@dataclass
class WeylPlusSection:
    """W+-type tensor field from five coefficient functions."""

    bg: Background
    u5: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        basis = algebra.sd_basis(self.bg.coframe(x))
        return algebra.weyl_plus_tensor(self.u5(x), basis)

    u4 = __call__

    @classmethod
    def constant(cls, bg: Background, u5) -> "WeylPlusSection":
        return cls(bg, constant_field(np.asarray(u5, dtype=float)))

    @classmethod
    def random(cls, bg: Background, rng: np.random.Generator, amplitude: float = 1.0) -> "WeylPlusSection":
        fs = [bg.random_function(rng, amplitude) for _ in range(5)]
        return cls(bg, lambda x: np.stack([f(x) for f in fs], axis=-1))

    def scaled(self, f: Field) -> "WeylPlusSection":
        """The section f U."""
        base = self.u5
        return WeylPlusSection(self.bg, lambda x: f(x)[:, None] * base(x))


def raise_last_two(T: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    return np.einsum("pkc,pld,p...cd->p...kl", ginv, ginv, T, optimize=True)


def raise_first(T: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    return np.einsum("pka,pa...->pk...", ginv, T)


def fundamental_contraction_defect(U: np.ndarray, ginv: np.ndarray) -> float:
    """sup |U^ijkl U_ijkm - |U|^2/4 delta^l_m|."""
    Uup = algebra.raise_all(U, ginv)
    lhs = np.einsum("pijkl,pijkm->plm", Uup, U)
    norm2 = np.einsum("pijkl,pijkl->p", Uup, U)
    return sup(lhs - 0.25 * norm2[:, None, None] * np.eye(4))


def delta_U(calc: Calc, U: Field) -> Field:
    """(delta U)_kij = nabla^m U_mkij."""
    nU = calc.nabla(U, "dddd")

    def dU(x):
        return np.einsum("pma,pamkij->pkij", calc.inverse_metric(x), nU(x))

    return dU


def dstar(calc: Calc, U: Field, x: np.ndarray) -> np.ndarray:
    """(D* U)_ij = 2 (nabla^k nabla^l U_ikjl + P^kl U_ikjl)."""
    nn = calc.nabla(calc.nabla(U, "dddd"), "ddddd")(x)
    ginv = calc.inverse_metric(x)
    Pup = np.einsum("pka,plb,pab->pkl", ginv, ginv, calc.schouten(x), optimize=True)
    dd = np.einsum("pak,pbl,pabikjl->pij", ginv, ginv, nn, optimize=True)
    return 2.0 * (dd + np.einsum("pkl,pikjl->pij", Pup, U(x)))


def dstar_nested(calc: Calc, U: Field, x: np.ndarray) -> np.ndarray:
    """D* U through two single divergences, as an independent evaluation."""
    nU = calc.nabla(U, "dddd")

    def inner_div(y):  # V_ikj = nabla^l U_ikjl
        return np.einsum("pbl,pbikjl->pikj", calc.inverse_metric(y), nU(y))

    nV = calc.nabla(inner_div, "ddd")(x)
    ginv = calc.inverse_metric(x)
    dd = np.einsum("pak,paikj->pij", ginv, nV)
    Pup = np.einsum("pka,plb,pab->pkl", ginv, ginv, calc.schouten(x), optimize=True)
    return 2.0 * (dd + np.einsum("pkl,pikjl->pij", Pup, U(x)))


# --------------------------------------------------------------------------
# the splitting operator and its derivatives
# --------------------------------------------------------------------------

def split_z(calc: Calc, U: Field, x: np.ndarray) -> AdjointTractorTwoForm:
    """z(U): d-block U_ij^kl / 2, XZ-block -(delta U)^l_ij, others zero (n = 4)."""
    ginv = calc.inverse_metric(x)
    Ux = U(x)
    dU = delta_U(calc, U)(x)
    n = len(x)
    return AdjointTractorTwoForm(np.zeros((n, 4, 4)), -np.moveaxis(raise_first(dU, ginv), 1, -1),
                                 np.zeros((n, 4, 4, 4)), 0.5 * raise_last_two(Ux, ginv))


def divergence_invariants(calc: Calc, U: Field, x: np.ndarray) -> dict:
    """Antisymmetry in (i, j) and vanishing trace of delta U."""
    dU = delta_U(calc, U)(x)
    tr = np.einsum("pki,pkij->pj", calc.inverse_metric(x), dU)
    return {"antisymmetry": sup(dU + np.swapaxes(dU, 2, 3)), "trace": sup(tr), "size": sup(dU)}


def split_z_scale_defect(calc: Calc, U: Field, w: Field, x: np.ndarray, weight: int) -> float:
    """Relative mismatch between z in the scale e^{2w} g and the transported z.

    ``U`` is carried to the new scale as ``e^{weight w} U_ijkl`` (indices down).
    """
    hcalc = Calc(ConformalBackground(calc.bg, w), calc.mode, calc.depth, calc.lattice, calc.factor)
    g = calc.metric(x)
    T = scale_change_matrix(calc.d(w)(x), np.linalg.inv(g), np.exp(w(x)))
    Z = split_z(calc, U, x).matrix(g)
    moved = np.einsum("pab,pijbc,pcd->pijad", T, Z, np.linalg.inv(T), optimize=True)

    def Uhat(y):
        return np.exp(weight * w(y))[:, None, None, None, None] * U(y)

    Zh = split_z(hcalc, Uhat, x).matrix(hcalc.metric(x))
    return sup(Zh - moved) / max(sup(Zh), 1e-300)


def split_z_weight(calc: Calc, U: Field, w: Field, x: np.ndarray, candidates=range(-2, 5)) -> dict:
    """Scan conformal weights of U and report the one making z scale-invariant."""
    defects = {int(s): split_z_scale_defect(calc, U, w, x, s) for s in candidates}
    best = min(defects, key=defects.get)
    return {"weight": best, "defect": defects[best], "defects": defects}


def nabla_z(calc: Calc, U: Field, x: np.ndarray) -> AdjointTractorTwoForm:
    """Closed-form covariant derivative of z(U); form indices (m, i, j)."""
    g = calc.metric(x)
    ginv = np.linalg.inv(g)
    Ux = U(x)
    dU_f = delta_U(calc, U)
    dU = dU_f(x)                                   # (dU)_kij
    ndU = calc.nabla(dU_f, "ddd")(x)               # nabla_m (dU)_lij
    nU = calc.nabla(U, "dddd")(x)                  # nabla_m U_ijkl
    P = calc.schouten(x)
    Uup = raise_last_two(Ux, ginv)                 # U_ij^kl
    dUup = raise_first(dU, ginv)                   # (dU)^k_ij
    eye = np.eye(4)
    a = dU
    b = -np.einsum("pla,pmaij->pmijl", ginv, ndU) - np.einsum("pijkl,pmk->pmijl", Uup, P)
    c = np.einsum("pka,pijam->pmijk", ginv, Ux)   # U_ij^k_m
    dsym = 0.5 * (np.einsum("pkij,lm->pmijkl", dUup, eye) - np.einsum("plij,km->pmijkl", dUup, eye))
    d = 0.5 * raise_last_two(nU, ginv) + dsym
    return AdjointTractorTwoForm(a, b, c, d)


def adjoint_nabla(calc: Calc, M: Callable[[np.ndarray], np.ndarray], kinds: str) -> Callable:
    """Tractor covariant derivative of an endomorphism-valued tensor field.

    ``M`` maps points to ``(P, *form, 6, 6)`` action matrices.  The result is
    computed from the tractor connection alone as
    ``(nabla M) e = nabla (M e) - M nabla e`` over coordinate basis tractors.
    """

    def Mt(y):
        return np.swapaxes(M(y), -1, -2)

    def eye(y):
        return np.broadcast_to(np.eye(6), (len(y), 6, 6)).copy()

    def nM(x):
        N = tractor_nabla(calc, Mt, kinds + "n")(x)          # (P, m, *form, col, row)
        NE = tractor_nabla(calc, eye, "n")(x)                # (P, m, col, row)
        Mx = M(x)
        extra = Mx.ndim - 3
        NEb = NE.reshape((len(x), 4) + (1,) * extra + (6, 6))
        corr = np.einsum("p...rs,pm...cs->pm...rc", Mx, NEb)
        return np.swapaxes(N, -1, -2) - corr

    return nM


def nabla_z_bruteforce(calc: Calc, U: Field, x: np.ndarray) -> AdjointTractorTwoForm:
    """nabla z by differentiating the action matrix of z(U) with the tractor connection."""

    def Mz(y):
        return split_z(calc, U, y).matrix(calc.metric(y))

    N = adjoint_nabla(calc, Mz, "dd")(x)
    return AdjointTractorTwoForm.from_matrix(N, calc.inverse_metric(x))


def _wplus_contraction(Wp, Ux, ginv):
    """T_ij = W+_pqi^k U^{qp}_{kj}, explicitly indexed."""
    Wmix = np.einsum("pkl,pabil->pabik", ginv, Wp)         # W+_{ab i}^k
    Uup = np.einsum("pqa,pcb,pabkj->pqckj", ginv, ginv, Ux, optimize=True)  # U^{qc}_{kj}
    # contract W+_{p q i}^k with U^{q p}_{k j}
    return np.einsum("xpqik,xqpkj->xij", Wmix, Uup)


def laplacian_z(calc: Calc, U: Field, x: np.ndarray, printed_xy: bool = False) -> AdjointTractorTwoForm:
    """Closed-form rough Laplacian of z(U).

    The XY block is ``W+_pqi^k U^qp_kj - W+_pqj^k U^qp_ki`` (twice the double
    divergence); ``printed_xy`` switches the second term's sign for
    comparison against the alternative arrangement.
    """
    g = calc.metric(x)
    ginv = np.linalg.inv(g)
    Ux = U(x)
    dU_f = delta_U(calc, U)
    dU = dU_f(x)
    ndU = calc.nabla(dU_f, "ddd")(x)                 # nabla_m (dU)_lij
    lap_dU = calc.laplacian(dU_f, "ddd")(x)          # Delta (dU)_lij
    nU = calc.nabla(U, "dddd")(x)                    # nabla_m U_ijkl
    lapU = calc.laplacian(U, "dddd")(x)
    P = calc.schouten(x)
    J = calc.J(x)
    dJ = calc.d(calc.J)(x)
    pack = curvature_pack(calc, x)
    Uup = raise_last_two(Ux, ginv)
    t = _wplus_contraction(pack.Wplus, Ux, ginv)
    a = t - np.swapaxes(t, 1, 2) if not printed_xy else t + np.swapaxes(t, 1, 2)
    nU_up_m = np.einsum("pma,pmijkl->paijkl", ginv, nU)  # nabla^m U_ijkl with m raised
    b = (-np.moveaxis(raise_first(lap_dU, ginv), 1, -1)
         - 2.0 * np.einsum("pmijkl,pmk->pijl", raise_last_two(nU_up_m, ginv), P)
         - np.einsum("pijkl,pk->pijl", Uup, dJ)
         + J[:, None, None, None] * np.moveaxis(raise_first(dU, ginv), 1, -1))
    ndU_up = np.einsum("pka,plb,pabij->pijkl", ginv, ginv, ndU, optimize=True)  # nabla^k (dU)^l_ij at [i,j,k,l]
    Pmix = np.einsum("plb,pbm->plm", ginv, P)                    # P^l_m
    d = (0.5 * raise_last_two(lapU, ginv) - ndU_up + np.swapaxes(ndU_up, -1, -2)
         - np.einsum("pijkm,plm->pijkl", Uup, Pmix) + np.einsum("pijlm,pkm->pijkl", Uup, Pmix))
    n = len(x)
    return AdjointTractorTwoForm(a, b, np.zeros((n, 4, 4, 4)), d)


def laplacian_z_bruteforce(calc: Calc, U: Field, x: np.ndarray) -> AdjointTractorTwoForm:
    """g^am nabla_a of the closed-form nabla z, via the tractor connection."""

    def Mdz(y):
        return nabla_z(calc, U, y).matrix(calc.metric(y))

    N = adjoint_nabla(calc, Mdz, "ddd")(x)      # (P, a, m, i, j, 6, 6)
    ginv = calc.inverse_metric(x)
    L = np.einsum("pam,pamij...->pij...", ginv, N)
    return AdjointTractorTwoForm.from_matrix(L, ginv)


def laplacian_z_nested(calc: Calc, U: Field, x: np.ndarray) -> AdjointTractorTwoForm:
    """Rough Laplacian of z(U) by two brute-force tractor derivatives."""

    def Mz(y):
        return split_z(calc, U, y).matrix(calc.metric(y))

    N = adjoint_nabla(calc, adjoint_nabla(calc, Mz, "dd"), "ddd")(x)
    ginv = calc.inverse_metric(x)
    L = np.einsum("pam,pamij...->pij...", ginv, N)
    return AdjointTractorTwoForm.from_matrix(L, ginv)


# --------------------------------------------------------------------------
# identities
# --------------------------------------------------------------------------

def _require_asd(pack, tol: float):
    wp = sup(pack.Wplus)
    if wp > tol:
        raise NotAntiSelfDualError(f"background is not anti-self-dual: sup|W+| = {wp:.3e}")
    return wp


def delta_z_identity(calc: Calc, U: Field, x: np.ndarray, asd_tol: float = 1e-6) -> dict:
    """Divergence of z(U) against -1/2 (D* U) in the XZ block.

    ``fitted_factor`` is the least-squares constant c in ``XZ = c D*U``; a value
    away from -1/2 flags a normalisation mismatch.
    """
    pack = curvature_pack(calc, x)
    wp = _require_asd(pack, asd_tol)
    ginv = pack.ginv
    dz = nabla_z(calc, U, x)
    tr = {k: np.einsum("pmi,pmij...->pj...", ginv, v) for k, v in dz.blocks().items()}
    Ds = dstar(calc, U, x)
    want_b = -0.5 * np.einsum("pla,pja->pjl", ginv, Ds)
    res = {"XY": sup(tr["XY"]), "XZ": sup(tr["XZ"] - want_b), "YZ": sup(tr["YZ"]), "ZZ": sup(tr["ZZ"])}
    Ds_up = np.einsum("pla,pja->pjl", ginv, Ds)
    denom = float(np.sum(Ds_up * Ds_up))
    fitted = float(np.sum(tr["XZ"] * Ds_up)) / denom if denom > 0 else float("nan")
    return {"residual": res, "residual_sup": max(res.values()), "dstar_sup": sup(Ds),
            "delta_z_sup": max(sup(v) for v in tr.values()), "wplus_sup": wp,
            "fitted_factor": fitted}


def double_divergence(calc: Calc, U: Field, x: np.ndarray) -> dict:
    """nabla^m (delta U)_mij against (W+_pqi^k U^qp_kj - W+_pqj^k U^qp_ki) / 2."""
    ndU = calc.nabla(delta_U(calc, U), "ddd")(x)
    ginv = calc.inverse_metric(x)
    lhs = np.einsum("pam,pamij->pij", ginv, ndU)
    pack = curvature_pack(calc, x)
    t = _wplus_contraction(pack.Wplus, U(x), ginv)
    rhs = 0.5 * (t - np.swapaxes(t, 1, 2))
    return {"lhs": lhs, "rhs": rhs, "residual_sup": sup(lhs - rhs),
            "lhs_sup": sup(lhs), "rhs_sup": sup(rhs)}


def weitzenboeck_fields(calc: Calc, U: Field, x: np.ndarray) -> dict:
    """Residual fields of the two Weitzenboeck identities (no ASD check)."""
    g = calc.metric(x)
    ginv = np.linalg.inv(g)
    Ux = U(x)
    dU_f = delta_U(calc, U)
    dU = dU_f(x)
    ndU = calc.nabla(dU_f, "ddd")(x)             # nabla_m (dU)_lij
    lap_dU = calc.laplacian(dU_f, "ddd")(x)
    nU = calc.nabla(U, "dddd")(x)                # nabla_m U_ijkl
    lapU = calc.laplacian(U, "dddd")(x)
    P = calc.schouten(x)
    J = calc.J(x)
    dJ_up = np.einsum("pka,pa->pk", ginv, calc.d(calc.J)(x))
    Pmix = np.einsum("pka,pam->pkm", ginv, P)    # P^k_m
    # I: Delta(dU)_lij + 2 nabla^m U_ijkl P^k_m + U_ijkl nabla^k J - 3 J (dU)_lij
    nU_up = np.einsum("pma,pmijkl->paijkl", ginv, nU)
    res1 = (lap_dU + 2.0 * np.einsum("pmijkl,pkm->plij", nU_up, Pmix)
            + np.einsum("pijkl,pk->plij", Ux, dJ_up) - 3.0 * J[:, None, None, None] * dU)
    # II: 1/2 Delta U_ijkl - nabla_k (dU)_lij + nabla_l (dU)_kij
    #     - U_ijkm P_l^m + U_ijlm P^m_k - J U_ijkl
    Pl_m = np.einsum("pla,pam->plm", P, ginv)     # P_l^m
    nk = np.einsum("pklij->pijkl", ndU)
    res2 = (0.5 * lapU - nk + np.swapaxes(nk, 3, 4)
            - np.einsum("pijkm,plm->pijkl", Ux, Pl_m)
            + np.einsum("pijlm,pmk->pijkl", Ux, np.einsum("pma,pak->pmk", ginv, P))
            - J[:, None, None, None, None] * Ux)
    return {"I": res1, "II": res2, "delta_U": dU, "nabla_delta_U": ndU, "nabla_U": nU,
            "laplacian_delta_U": lap_dU, "U": Ux, "P": P, "J": J, "dJ_up": dJ_up, "ginv": ginv, "g": g}


def weitzenboeck_residuals(calc: Calc, U: Field, x: np.ndarray, asd_tol: float = 1e-6) -> dict:
    pack = curvature_pack(calc, x)
    wp = _require_asd(pack, asd_tol)
    f = weitzenboeck_fields(calc, U, x)
    # only the self-dual part in the last pair vanishes for a general section
    sd = 0.5 * (f["II"] + algebra.hodge_second_pair(f["II"], calc.metric(x)))
    return {"I_sup": sup(f["I"]), "II_sup": sup(f["II"]), "II_wplus_sup": sup(sd),
            "dstar_sup": sup(dstar(calc, U, x)), "wplus_sup": wp}


def pointwise_bounds(calc: Calc, U: Field, x: np.ndarray) -> dict:
    """Margins of the pointwise Cauchy-Schwarz and AM-GM steps (all >= 0).

    ``cauchy_schwarz``: 4 |nabla dU| |V| - |4 T nabla dU U|;
    ``am_gm``: 2 |nabla dU|^2 + 2 |V|^2 - |4 T nabla dU U|;
    ``lower_bound``: 4 T nabla dU U + 2 |nabla dU|^2 + |P0|^2 |U|^2 / 2 + 9 J^2 |U|^2 / 8.
    """
    g = calc.metric(x)
    ginv = np.linalg.inv(g)
    Ux = U(x)
    ndU = calc.nabla(delta_U(calc, U), "ddd")(x)   # nabla_m (dU)_lij
    P = calc.schouten(x)
    J = calc.J(x)
    P0 = P - 0.25 * J[:, None, None] * g
    T = P0 + 0.75 * J[:, None, None] * g
    Tmix = np.einsum("pmk,pka->pma", T, ginv)      # T_m^k
    V = np.einsum("pmk,pijkl->pmlij", Tmix, Ux)
    term = 4.0 * algebra.inner(ndU, V, ginv)
    n_ndU = np.sqrt(np.maximum(algebra.inner(ndU, ndU, ginv), 0.0))
    V2 = algebra.inner(V, V, ginv)
    U2 = algebra.inner(Ux, Ux, ginv)
    P02 = algebra.inner(P0, P0, ginv)
    return {"cauchy_schwarz": 4.0 * n_ndU * np.sqrt(np.maximum(V2, 0.0)) - np.abs(term),
            "am_gm": 2.0 * n_ndU ** 2 + 2.0 * V2 - np.abs(term),
            "lower_bound": term + 2.0 * n_ndU ** 2 + 0.5 * P02 * U2 + 1.125 * J ** 2 * U2,
            "V_identity": V2 - 0.25 * algebra.inner(T, T, ginv) * U2}


def V_norm_identity(T: np.ndarray, U: np.ndarray, ginv: np.ndarray) -> dict:
    """|V|^2 against |T|^2 |U|^2 / 4 for V_mlij = T_m^k U_ijkl."""
    Tmix = np.einsum("pmk,pka->pma", T, ginv)     # T_m^a with second index raised
    V = np.einsum("pmk,pijkl->pmlij", Tmix, U)
    V2 = algebra.inner(V, V, ginv)
    T2 = algebra.inner(T, T, ginv)
    U2 = algebra.inner(U, U, ginv)
    return {"V2": V2, "rhs": 0.25 * T2 * U2, "residual_sup": sup(V2 - 0.25 * T2 * U2)}


def integral_identity_suite(calc: Calc, U: Field, lat: ChartLattice, asd_tol: Optional[float] = 1e-6,
                            chunk: int = 64) -> dict:
    """Both sides of the integration-by-parts steps of the vanishing argument.

    For a general section the step that uses the first Weitzenboeck identity
    acquires the extra term ``2 int <dU, res_I>``, which vanishes exactly for
    kernel elements; it is reported separately.  The pairs are plain
    integrations by parts, so ``asd_tol=None`` runs them on any background.
    """
    x = lat.points

    def site_terms(xs):
        f = weitzenboeck_fields(calc, U, xs)
        pack = curvature_pack(calc, xs)
        ginv, g, Ux, dU, ndU, nU = f["ginv"], f["g"], f["U"], f["delta_U"], f["nabla_delta_U"], f["nabla_U"]
        J, P = f["J"], f["P"]
        U2 = algebra.inner(Ux, Ux, ginv)
        lapU2 = calc.laplacian(lambda y: algebra.inner(U(y), U(y), calc.inverse_metric(y)), "")(xs)
        lapJ = calc.laplacian(calc.J, "")(xs)
        Pmix = np.einsum("pka,pam->pkm", ginv, P)                     # P^k_m
        P0 = P - 0.25 * J[:, None, None] * g
        P0mix = np.einsum("pka,pam->pkm", ginv, P0)
        dU_up = algebra.raise_all(dU, ginv)                            # (dU)^{lij}
        nU_up = np.einsum("pma,pmijkl->paijkl", ginv, nU)              # nabla^m U_ijkl
        ndU_all = np.einsum("pma,pmlij->palij", ginv, np.einsum("plb,pic,pjd,pmbcd->pmlij", ginv, ginv, ginv, ndU, optimize=True))
        # nabla^m (dU)^{lij} at [m, l, i, j]
        dUU = np.einsum("plij,pijkl->pk", dU_up, Ux)                  # (dU)^{lij} U_ijkl
        dJ_up = f["dJ_up"]
        kdU = np.einsum("pijkl,pklij->p", Ux, ndU_all)                 # U_ijkl nabla^k (dU)^{lij}
        dU2 = algebra.inner(dU, dU, ginv)
        ndU2 = algebra.inner(ndU, ndU, ginv)
        dUU_dJ = np.einsum("pk,pk->p", dUU, dJ_up)
        # each side is a list of pointwise terms; masses normalise 0 = 0 identities
        sides = {
            "bs4": ([0.5 * J * lapU2], [0.5 * lapJ * U2]),
            "bsd3": ([-2.0 * np.einsum("plij,pmijkl,pkm->p", dU_up, nU_up, Pmix, optimize=True)],
                     [2.0 * np.einsum("pmlij,pijkl,pkm->p", ndU_all, Ux, Pmix, optimize=True),
                      2.0 * dUU_dJ]),
            "bsd5": ([dUU_dJ], [-J * kdU, -J * dU2]),
            "bsd8": ([J * kdU],
                     [2.0 * ndU2, 4.0 * np.einsum("pmlij,pijkl,pkm->p", ndU_all, Ux, P0mix, optimize=True),
                      4.0 * J * dU2, 2.0 * algebra.inner(dU, f["I"], ginv)]),
        }
        out = {}
        for name, (lhs, rhs) in sides.items():
            out[f"{name}_lhs"] = sum(lhs)
            out[f"{name}_rhs"] = sum(rhs)
            out[f"{name}_mass"] = sum(np.abs(t) for t in lhs + rhs)
        out["bsd8_kernel_defect"] = rhs[-1]
        out["vol"] = np.sqrt(np.linalg.det(g))
        out["wplus"] = np.sqrt(np.maximum(pack.norm2(pack.Wplus), 0.0))
        return out

    terms = map_sites(site_terms, x, chunk)
    wp = float(terms["wplus"].max())
    if asd_tol is not None and wp > asd_tol:
        raise NotAntiSelfDualError(f"background is not anti-self-dual: sup|W+| = {wp:.3e}")
    I = {k: lat.integrate(v, terms["vol"]) for k, v in terms.items() if k not in ("vol", "wplus")}
    report = {}
    for name in ("bs4", "bsd3", "bsd5", "bsd8"):
        report[name] = _pair(I[f"{name}_lhs"], I[f"{name}_rhs"], I[f"{name}_mass"])
    report["bsd8"]["kernel_defect"] = I["bsd8_kernel_defect"]
    return report


def _pair(lhs: float, rhs: float, mass: float) -> dict:
    scale = max(abs(lhs), abs(rhs), mass, 1e-300)
    return {"lhs": lhs, "rhs": rhs, "mass": mass, "abs_diff": abs(lhs - rhs),
            "rel_diff": abs(lhs - rhs) / scale}


def vanishing_report(J_min: float, int_dU2_J: float, int_nU2_J: float, tol: float = 1e-12) -> dict:
    """Bookkeeping of the final step: J > 0 and 0 >= int(4J|dU|^2 + J|nabla U|^2)."""
    bound = 4.0 * int_dU2_J + int_nU2_J
    forced = J_min > 0 and bound <= tol
    return {"J_positive": J_min > 0, "bound": bound, "nabla_U_vanishes": forced,
            "conclusion": "U = 0" if forced else "not forced"}


def asd_index(chi: int, tau: int) -> Fraction:
    """(15 chi + 29 tau) / 2."""
    return Fraction(15 * int(chi) + 29 * int(tau), 2)
