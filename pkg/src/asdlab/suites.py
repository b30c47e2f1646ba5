"""Named identity checks grouped into the suites run by ``asdlab verify``.

Every check evaluates a residual field at sampled lattice sites and compares
its sup-norm with a tolerance of one of three kinds:

``absolute``
    a fixed bound on the residual itself;
``relative``
    a fixed bound on the residual divided by the size of the compared terms;
``stencil``
    five times the Richardson estimate of the finite-difference truncation
    error, obtained by repeating the evaluation with doubled steps, plus a
    small round-off floor.  An identity that fails by a constant amount
    does not shrink with the step and is caught by this bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import algebra, conformal, deformation, geometry, tractor
from .calculus import Calc, constant_field, richardson_error, sup
from .models import Background, NonFiniteFieldError

SUITES = ("geometry", "tractor", "deformation", "conformal")
STENCIL_FACTOR = 5.0
JITTER = 1.05


@dataclass
class Check:
    identity: str
    residual: np.ndarray
    tolerance: float
    kind: str = "absolute"
    scale: float = 1.0
    info: dict = field(default_factory=dict)

    @property
    def residual_sup(self) -> float:
        return sup(self.residual) / self.scale

    @property
    def residual_l2(self) -> float:
        r = np.asarray(self.residual, dtype=float)
        if r.size == 0:
            return 0.0
        per_site = np.sqrt(np.sum(r.reshape(len(r), -1) ** 2, axis=1)) if r.ndim > 1 else np.abs(r)
        return float(np.sqrt(np.mean(per_site ** 2))) / self.scale

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual_sup) and self.residual_sup <= self.tolerance)

    def record(self, lattice: dict, seed: int) -> dict:
        out = {"identity": self.identity, "residual_sup": self.residual_sup,
               "residual_l2": self.residual_l2, "tolerance": self.tolerance,
               "pass": self.passed, "lattice": lattice, "seed": seed, "kind": self.kind}
        if self.info:
            out["info"] = self.info
        return out


def stencil_check(name: str, residual_of: Callable[[Calc], np.ndarray], calc: Calc,
                  floor: float = 1e-12, **info) -> Check:
    """Residual at the working step against 5x its estimated stencil error.

    The estimate adds the Richardson truncation error (steps h and 2h) to a
    round-off estimate from a 5% step jitter, under which truncation error
    barely moves while round-off noise decorrelates.
    """
    fine = np.asarray(residual_of(calc))
    coarse = np.asarray(residual_of(calc.coarser()))
    jitter = np.asarray(residual_of(calc.coarser(JITTER)))
    trunc = sup(richardson_error(fine, coarse))
    noise = sup(fine - jitter)
    return Check(name, fine, STENCIL_FACTOR * (trunc + noise) + floor, "stencil",
                 info={"truncation_error": trunc, "roundoff_error": noise, **info})


def relative_check(name: str, residual: np.ndarray, scale: float, tol: float, **info) -> Check:
    return Check(name, residual, tol, "relative", max(scale, 1.0), info=dict(info))


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass
class SuiteContext:
    bg: Background
    calc: Calc
    x: np.ndarray
    sites: np.ndarray
    lattice: object
    rng: np.random.Generator
    tol: float
    quadrature_sites: Optional[tuple] = None

    @classmethod
    def build(cls, bg: Background, sites, count: int, seed: int, tol: float = 1e-6,
              quadrature_sites=None) -> "SuiteContext":
        lat = bg.lattice(sites)
        idx = lat.sample(count, seed)
        x = lat.points[idx]
        g = bg.metric(x)
        bad = ~np.isfinite(g.reshape(len(x), -1)).all(axis=1)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise NonFiniteFieldError(f"non-finite metric at lattice site {lat.site_index(int(idx[k]))}")
        return cls(bg, Calc(bg, depth=3), x, idx, lat, np.random.default_rng(seed), tol, quadrature_sites)

    def describe(self) -> dict:
        return {"geometry": self.bg.name, "sites": list(self.lattice.shape),
                "sampled_sites": int(len(self.x))}


def _asd(ctx: SuiteContext) -> bool:
    return ctx.bg.conformally_flat


def _einstein(ctx: SuiteContext) -> bool:
    return ctx.bg.name in ("flat_t4", "round_s4")


def _parallelizable(ctx: SuiteContext) -> bool:
    # random sections are built on the chart coframe, which is global only here
    return ctx.bg.name != "round_s4"


def _random_one_form(ctx: SuiteContext) -> Callable:
    fs = [ctx.bg.random_function(ctx.rng) for _ in range(4)]
    return lambda y: np.stack([f(y) for f in fs], axis=-1)


def _random_two_form(ctx: SuiteContext) -> Callable:
    fs = [ctx.bg.random_function(ctx.rng) for _ in range(6)]
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

    def omega(y):
        out = np.zeros((len(y), 4, 4))
        for f, (a, b) in zip(fs, pairs):
            v = f(y)
            out[:, a, b] = v
            out[:, b, a] = -v
        return out

    return omega


def _small_factor(ctx: SuiteContext, amplitude: float = 0.1) -> Callable:
    return ctx.bg.random_function(ctx.rng, amplitude)


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def geometry_suite(ctx: SuiteContext) -> list[Check]:
    x, calc = ctx.x, ctx.calc
    mf = geometry.MetricField.sample(ctx.bg, x)
    pack = geometry.curvature_pack(calc, x)
    Rm, g, ginv = pack.Rm, pack.g, pack.ginv
    rscale = max(sup(Rm), 1.0)
    out = [Check("metric_inverse", np.einsum("pab,pbc->pac", mf.g, mf.ginv) - np.eye(4), 1e-12)]

    sym = np.stack([Rm + np.swapaxes(Rm, 1, 2), Rm + np.swapaxes(Rm, 3, 4),
                    Rm - np.transpose(Rm, (0, 3, 4, 1, 2)),
                    Rm + np.transpose(Rm, (0, 2, 3, 1, 4)) + np.transpose(Rm, (0, 3, 1, 2, 4))], axis=1)
    out.append(relative_check("riemann_symmetries", sym, rscale, 1e-8))
    traces = np.stack([np.einsum("pac,pabcd->pbd", ginv, pack.W), np.einsum("pad,pabcd->pbc", ginv, pack.W),
                       np.einsum("pbc,pabcd->pad", ginv, pack.W), np.einsum("pbd,pabcd->pac", ginv, pack.W)],
                      axis=1)
    out.append(relative_check("weyl_trace_free", traces, rscale, 1e-10))
    out.append(relative_check("curvature_reassembly", pack.reassembly_residual(), rscale, 1e-8))
    out.append(Check("schouten_trace", np.einsum("pab,pab->p", ginv, pack.P) - pack.J, 1e-12))

    omega = geometry.TwoFormField.from_values(_random_two_form(ctx)(x), g)
    star2 = algebra.hodge(omega.dual, g) - omega.omega
    proj = np.stack([omega.sd_part + omega.asd_part - omega.omega,
                     algebra.hodge(omega.sd_part, g) - omega.sd_part,
                     algebra.hodge(omega.asd_part, g) + omega.asd_part], axis=1)
    orth = algebra.inner(omega.sd_part, omega.asd_part, ginv)
    out.append(relative_check("hodge_star_involution", star2, sup(omega.omega), 1e-12))
    out.append(relative_check("self_dual_projectors", proj, sup(omega.omega), 1e-12,
                              orthogonality=sup(orth)))

    if ctx.bg.conformally_flat:
        out.append(Check("weyl_vanishes", pack.W, 1e-7))

    out.append(stencil_check("contracted_bianchi", lambda c: geometry.contracted_bianchi_residual(c, x), calc))
    w1 = _random_one_form(ctx)
    out.append(stencil_check("curvature_commutator", lambda c: geometry.commutator_residual(c, w1, x), calc))
    w2 = _random_two_form(ctx)
    out.append(stencil_check("hodge_weitzenboeck",
                             lambda c: geometry.hodge_weitzenboeck_residual(c, w2, x)["residual"], calc))
    K = geometry.killing_operator(calc, w1, x)
    out.append(relative_check("killing_trace_free", np.einsum("pab,pab->p", ginv, K), sup(K), 1e-12))
    wf = _small_factor(ctx)
    out.append(stencil_check("schouten_transformation", lambda c: geometry.conformal_rescale(c, wf, x)[1], calc))
    out.append(stencil_check("cotton_weyl_divergence", lambda c: geometry.bianchi_residual(c, x)[0], calc,
                             nabla_riemann=sup(geometry.bianchi_residual(calc, x)[1])))
    return out


# --------------------------------------------------------------------------
# tractor
# --------------------------------------------------------------------------

def _basis_tractors(n: int):
    eY = tractor.TractorField(np.ones(n), np.zeros((n, 4)), np.zeros(n))
    eX = tractor.TractorField(np.zeros(n), np.zeros((n, 4)), np.ones(n))
    eZ = []
    for b in range(4):
        mu = np.zeros((n, 4))
        mu[:, b] = 1.0
        eZ.append(tractor.TractorField(np.zeros(n), mu, np.zeros(n)))
    return eY, eX, eZ


def pairing_table_residual(ginv: np.ndarray) -> np.ndarray:
    """h on the basis Y, X, Z against Y.X = 1, Z_b.Z^c = delta, zero otherwise."""
    n = len(ginv)
    eY, eX, eZ = _basis_tractors(n)
    basis = [eY, eX] + eZ
    res = []
    for i, A in enumerate(basis):
        for j, B in enumerate(basis):
            got = tractor.tractor_pair(A, B, ginv)
            if {i, j} == {0, 1}:
                want = np.ones(n)
            elif i >= 2 and j >= 2:
                want = ginv[:, i - 2, j - 2]
            else:
                want = np.zeros(n)
            res.append(got - want)
    return np.stack(res, axis=1)


def tractor_suite(ctx: SuiteContext, random_fields: int = 3) -> list[Check]:
    x, calc = ctx.x, ctx.calc
    pack = geometry.curvature_pack(calc, x, cotton=True)
    ginv = pack.ginv
    out = [Check("pairing_table", pairing_table_residual(ginv), 0.0),
           Check("projector_derivatives", np.array([tractor.projector_derivative_residual(calc, x)]), 1e-12)]

    V = tractor.random_tractor(ctx.bg, ctx.rng)
    W = tractor.random_tractor(ctx.bg, ctx.rng)
    # a single derivative: the smallest sampler step keeps truncation below round-off
    out.append(stencil_check("tractor_metric_parallel",
                             lambda c: tractor.metric_compatibility_residual(c, V, W, x), calc.with_depth(1)))

    kappa = tractor.tractor_curvature(pack.W, pack.C, ginv)
    for k in range(random_fields):
        Vk = tractor.random_tractor(ctx.bg, ctx.rng)

        def comm_res(c, Vk=Vk):
            p = geometry.curvature_pack(c, x, cotton=True)
            kap = tractor.tractor_curvature(p.W, p.C, p.ginv).matrix(p.g)
            return tractor.curvature_commutator(c, Vk, x) - np.einsum("pabij,pj->pabi", kap, Vk(x))

        out.append(stencil_check(f"tractor_curvature_commutator[{k}]", comm_res, calc))

    ups = ctx.rng.normal(size=(len(x), 4))
    tv = tractor.TractorField.unstack(V(x))
    tw = tractor.TractorField.unstack(W(x))
    h0 = tractor.tractor_pair(tv, tw, ginv)
    h1 = tractor.tractor_pair(tractor.conformal_transform_tractor(tv, ups, ginv),
                              tractor.conformal_transform_tractor(tw, ups, ginv), ginv)
    out.append(relative_check("pairing_scale_invariance", h1 - h0, sup(h0), 1e-12))
    back = tractor.conformal_transform_tractor(tractor.conformal_transform_tractor(tv, ups, ginv), -ups, ginv)
    out.append(relative_check("scale_change_round_trip", (back - tv).stack(), sup(tv.stack()), 1e-12))

    if _einstein(ctx):
        c2 = calc.with_depth(2)
        one = lambda y: np.ones(len(y))
        nabla = tractor.tractor_connection(c2, lambda y: tractor.thomas_D(c2, one, y), x)
        out.append(Check("einstein_scale_parallel", nabla.stack(), 1e-8))
        out.append(Check("almost_einstein_scale", tractor.almost_einstein_residual(c2, one, x), 1e-8))
    else:
        out.append(Check("tractor_curvature_blocks_xy", kappa.a, 0.0))
    return out


# --------------------------------------------------------------------------
# deformation
# --------------------------------------------------------------------------

def _first_pair_star(T: np.ndarray, g: np.ndarray) -> np.ndarray:
    swapped = np.transpose(T, (0, 3, 4, 1, 2))
    return np.transpose(algebra.hodge_second_pair(swapped, g), (0, 3, 4, 1, 2))


def deformation_suite(ctx: SuiteContext, sections: int = 1) -> list[Check]:
    x, calc, bg = ctx.x, ctx.calc, ctx.bg
    out = []
    for k in range(sections):
        U = deformation.WeylPlusSection.random(bg, ctx.rng)
        tag = f"[{k}]"
        Ux = U(x)
        ginv = calc.inverse_metric(x)
        g = calc.metric(x)
        uscale = sup(Ux)
        out.append(relative_check("section_contraction" + tag, np.array(
            [deformation.fundamental_contraction_defect(Ux, ginv)]), uscale ** 2, 1e-10))
        asd_pair = np.stack([Ux - _first_pair_star(Ux, g),
                             Ux - algebra.hodge_second_pair(Ux, g)], axis=1)
        out.append(relative_check("section_self_dual" + tag, asd_pair, uscale, 1e-12))
        z = deformation.split_z(calc, U, x)
        zsd = z.d - _first_pair_star(z.d, g)
        out.append(relative_check("split_z_self_dual" + tag, zsd, sup(z.d), 1e-12))

        out.append(stencil_check("nabla_z_blocks" + tag, lambda c: np.concatenate(
            [v.reshape(len(x), -1) for v in
             (deformation.nabla_z(c, U, x) - deformation.nabla_z_bruteforce(c, U, x)).blocks().values()], axis=1),
            calc))
        out.append(stencil_check("laplacian_z_blocks" + tag, lambda c: np.concatenate(
            [v.reshape(len(x), -1) for v in
             (deformation.laplacian_z(c, U, x) - deformation.laplacian_z_bruteforce(c, U, x)).blocks().values()],
            axis=1), calc))
        dd = deformation.double_divergence(calc, U, x)
        out.append(Check("double_divergence" + tag, dd["lhs"] - dd["rhs"], 1e-5,
                         info={"lhs_sup": dd["lhs_sup"], "rhs_sup": dd["rhs_sup"]}))
        if _asd(ctx):
            # the XY block is a curvature contraction: two metric derivatives suffice
            out.append(Check("laplacian_z_xy_block" + tag, deformation.laplacian_z(calc.with_depth(2), U, x).a,
                             1e-8))
            dz = deformation.delta_z_identity(calc, U, x)
            out.append(Check("divergence_of_z" + tag, np.array(list(dz["residual"].values())), 1e-5,
                             info={"fitted_factor": dz["fitted_factor"]}))
            wz = deformation.weitzenboeck_residuals(calc, U, x)
            out.append(Check("weitzenboeck_II_self_dual_part" + tag, np.array([wz["II_wplus_sup"]]), 1e-5,
                             info={"full_residual_sup": wz["II_sup"]}))
    T = ctx.rng.normal(size=(len(x), 4, 4))
    T = 0.5 * (T + np.swapaxes(T, 1, 2))
    Ux = deformation.WeylPlusSection.random(bg, ctx.rng)(x)
    vn = deformation.V_norm_identity(T, Ux, calc.inverse_metric(x))
    out.append(relative_check("V_norm_identity", vn["V2"] - vn["rhs"], sup(vn["rhs"]), 1e-12))
    if bg.name == "flat_t4":
        U0 = deformation.WeylPlusSection.constant(bg, ctx.rng.normal(size=5))
        wz = deformation.weitzenboeck_residuals(calc, U0, x)
        out.append(Check("weitzenboeck_I_kernel", np.array([wz["I_sup"], wz["dstar_sup"]]), 1e-6))
    if _asd(ctx) and _parallelizable(ctx) and ctx.quadrature_sites is not None:
        U = deformation.WeylPlusSection.random(bg, ctx.rng)
        lat = bg.lattice(ctx.quadrature_sites)
        rep = deformation.integral_identity_suite(calc.with_depth(3), U, lat)
        for name in ("bs4", "bsd3", "bsd5", "bsd8"):
            out.append(Check(f"integral_{name}", np.array([rep[name]["rel_diff"]]), 1e-5, "relative",
                             info={"lhs": rep[name]["lhs"], "rhs": rep[name]["rhs"],
                                   "quadrature_sites": list(lat.shape)}))
    return out


# --------------------------------------------------------------------------
# conformal
# --------------------------------------------------------------------------

def conformal_suite(ctx: SuiteContext) -> list[Check]:
    x, calc, bg = ctx.x, ctx.calc, ctx.bg
    q = conformal.q_curvature(calc, x)
    out = [relative_check("q_curvature_forms", q["Q"] - q["Q_schouten"], sup(q["Q"]), 1e-8)]
    w = _small_factor(ctx)
    phi_f = bg.random_function(ctx.rng, 0.5)
    cov = conformal.paneitz_covariance_residual(calc, w, phi_f, x)
    out.append(relative_check("paneitz_covariance", cov["residual"], cov["scale"], 1e-4))
    out.append(stencil_check("q_transformation",
                             lambda c: conformal.q_transformation_residual(c, w, x)["residual"], calc))
    if bg.name == "perturbed_flat":
        qt = conformal.q_transformation_residual(calc, w, x)
        out.append(relative_check("q_transformation_relative", qt["residual"], qt["scale"], 1e-4))
    one = constant_field(np.array(1.0))
    out.append(Check("paneitz_constants", conformal.paneitz_apply(calc, one, x), 1e-8))

    if ctx.quadrature_sites is not None:
        lat = bg.lattice(ctx.quadrature_sites)
        geo = conformal.LatticeGeometry.build(Calc(bg, depth=2), lat)
        wf = conformal.ConformalFactorField(bg.random_function(ctx.rng, 0.2), geo)
        gammas = (0.3, -0.2, -6.0, -0.5, -2.0)
        base = conformal.phi(wf, gammas)
        parts = [base.I_plus, base.I_minus, base.II, base.III, base.IV]
        combo = sum(gm * p for gm, p in zip(gammas, parts))
        out.append(relative_check("phi_combination", np.array([base.Phi - combo]), abs(base.Phi), 1e-12))
        shifts = []
        for c in ctx.rng.uniform(-1.0, 1.0, size=3):
            shifts.append(conformal.phi(wf.shifted(float(c)), gammas).Phi - base.Phi)
        out.append(relative_check("phi_scale_invariance", np.array(shifts), abs(base.Phi), 1e-10))
        inv = conformal.total_invariants(geo)
        if bg.euler_characteristic is not None:
            chi = bg.euler_characteristic
            out.append(Check("euler_characteristic", np.array([inv["chern_gauss_bonnet_chi_estimate"] - chi]),
                             1e-4, info={"chi_estimate": inv["chern_gauss_bonnet_chi_estimate"]}))
        if bg.conformally_flat:
            out.append(Check("signature_vanishes", np.array([inv["signature_estimate"]]), 1e-4))
            target = 2.0 * math.pi ** 2 * (2 * bg.euler_characteristic + 3 * bg.signature)
            out.append(Check("total_q", np.array([inv["totalQ"] - target]), 1e-4, "relative",
                             max(abs(target), 1.0), info={"totalQ": inv["totalQ"]}))
    return out


RUNNERS = {"geometry": geometry_suite, "tractor": tractor_suite,
           "deformation": deformation_suite, "conformal": conformal_suite}

#: quadrature lattices small enough for an interactive verify run
QUADRATURE_SITES = {"flat_t4": (6, 6, 6, 6), "perturbed_flat": (8, 8, 8, 8),
                    "round_s4": (8, 8, 8, 8), "s3xs1": (6, 6, 6, 4)}


def run(bg: Background, suite: str, sites, count: int, seed: int, tol: float = 1e-6,
        quadrature: bool = True) -> dict:
    """Run one suite (or ``all``) and return the per-identity records."""
    names = SUITES if suite == "all" else (suite,)
    if any(n not in RUNNERS for n in names):
        raise KeyError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES + ('all',))}")
    records = []
    lattice = None
    for name in names:
        ctx = SuiteContext.build(bg, sites, count, seed, tol,
                                 QUADRATURE_SITES.get(bg.name) if quadrature else None)
        lattice = ctx.describe()
        for check in RUNNERS[name](ctx):
            rec = check.record(lattice, seed)
            rec["suite"] = name
            records.append(rec)
    failed = [r["identity"] for r in records if not r["pass"]]
    return {"suite": suite, "lattice": lattice, "seed": seed, "checks": records,
            "pass": not failed, "failed": failed}
