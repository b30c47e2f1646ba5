import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from asdlab import algebra, deformation
from asdlab.calculus import Calc, sup
from asdlab.deformation import WeylPlusSection
from asdlab.models import make_background

from conftest import sample_points

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)
U0 = [0.7, -0.3, 0.4, 0.2, -0.5]


def wave(y):
    return np.sin(2 * math.pi * y[:, 0])


@pytest.mark.parametrize("chi,tau,want", [(2, 0, 15), (0, 0, 0), (3, -1, 8)])
def test_asd_index(chi, tau, want):
    assert deformation.asd_index(chi, tau) == Fraction(want)


def test_dstar_flat_examples(flat):
    x = sample_points(flat)
    c = Calc(flat, depth=2)
    U = WeylPlusSection.constant(flat, U0)
    assert sup(deformation.dstar(c, U, x)) < 1e-9
    D = deformation.dstar(c, U.scaled(wave), x)
    fpp = -4 * math.pi ** 2 * wave(x)
    want = 2.0 * fpp[:, None, None] * U(x)[:, :, 0, :, 0]
    assert sup(D - want) < 1e-5


def test_dstar_sphere_matches_nested(sphere, rng):
    x = sample_points(sphere, 3)
    U = WeylPlusSection.random(sphere, rng)
    c = Calc(sphere, depth=2)
    D = deformation.dstar(c, U, x)
    assert np.all(np.isfinite(D))
    assert sup(D - deformation.dstar_nested(c, U, x)) < 1e-5 * max(1.0, sup(D))
    assert sup(D - np.swapaxes(D, 1, 2)) < 1e-5 * max(1.0, sup(D))


def test_split_z_examples(flat):
    x = sample_points(flat)
    c = Calc(flat)
    zero = WeylPlusSection.constant(flat, np.zeros(5))
    assert deformation.split_z(c, zero, x).sup() == 0.0
    U = WeylPlusSection.constant(flat, U0)
    z = deformation.split_z(c, U, x)
    assert sup(z.d - 0.5 * U(x)) < 1e-14
    assert sup(z.b) < 1e-9 and sup(z.a) == 0.0 and sup(z.c) == 0.0


def test_split_z_weight_is_two(flat, rng):
    x = sample_points(flat, 3)
    U = WeylPlusSection.random(flat, rng)
    w = lambda y: 0.1 * np.sin(2 * math.pi * y[:, 1]) + 0.05 * np.cos(2 * math.pi * y[:, 2])
    rep = deformation.split_z_weight(Calc(flat, depth=1), U, w, x)
    assert rep["weight"] == 2
    assert rep["defect"] < 1e-6


def test_nabla_z_flat_constant(flat):
    x = sample_points(flat)
    c = Calc(flat, depth=2)
    U = WeylPlusSection.constant(flat, U0)
    dz = deformation.nabla_z(c, U, x)
    assert sup(dz.a) < 1e-9 and sup(dz.b) < 1e-9 and sup(dz.d) < 1e-9
    # c-block U_ij^k_m, stored with the derivative index first
    assert sup(dz.c - np.einsum("pijkm->pmijk", U(x))) < 1e-12
    assert (dz - deformation.nabla_z_bruteforce(c, U, x)).sup() < 1e-9


def test_nabla_z_zero_section(product):
    x = sample_points(product, 3)
    zero = WeylPlusSection.constant(product, np.zeros(5))
    assert deformation.nabla_z(Calc(product), zero, x).sup() == 0.0


@pytest.mark.parametrize("name", ["flat", "perturbed", "product"])
def test_closed_forms_match_bruteforce(name, request):
    bg = request.getfixturevalue(name)
    rng = np.random.default_rng(11)
    x = sample_points(bg, 2)
    U = WeylPlusSection.random(bg, rng)
    c = Calc(bg, depth=3)
    for closed, brute in ((deformation.nabla_z, deformation.nabla_z_bruteforce),
                          (deformation.laplacian_z, deformation.laplacian_z_bruteforce)):
        a, b = closed(c, U, x), brute(c, U, x)
        assert (a - b).sup() < 1e-5 * max(1.0, b.sup())


def test_laplacian_z_flat_constant(flat):
    U = WeylPlusSection.constant(flat, U0)
    assert deformation.laplacian_z(Calc(flat, depth=2), U, sample_points(flat)).sup() < 1e-8


def test_laplacian_z_xy_block_on_asd(product, rng):
    U = WeylPlusSection.random(product, rng)
    lz = deformation.laplacian_z(Calc(product, depth=2), U, sample_points(product, 4))
    assert sup(lz.a) < 1e-8


def test_printed_xy_block_differs_on_non_asd(perturbed, rng):
    # the transcribed sign of the second W+ contraction only matters where W+ is nonzero
    x = sample_points(perturbed, 3)
    U = WeylPlusSection.random(perturbed, rng)
    c = Calc(perturbed, depth=3)
    brute = deformation.laplacian_z_bruteforce(c, U, x).a
    good = deformation.laplacian_z(c, U, x).a
    printed = deformation.laplacian_z(c, U, x, printed_xy=True).a
    assert sup(good - brute) < 1e-5 * max(1.0, sup(brute))
    assert sup(printed - brute) > 100 * sup(good - brute)


def test_delta_z_identity(flat, product, rng):
    x = sample_points(flat)
    c = Calc(flat, depth=3)
    rep = deformation.delta_z_identity(c, WeylPlusSection.constant(flat, U0), x)
    assert rep["delta_z_sup"] < 1e-8 and rep["dstar_sup"] < 1e-8
    rep = deformation.delta_z_identity(c, WeylPlusSection.constant(flat, U0).scaled(wave), x)
    assert rep["residual_sup"] < 1e-6
    assert rep["fitted_factor"] == pytest.approx(-0.5, abs=1e-6)
    rep = deformation.delta_z_identity(Calc(product, depth=3), WeylPlusSection.random(product, rng),
                                       sample_points(product, 3))
    assert rep["residual_sup"] < 1e-5


def test_asd_preconditions_reject_perturbed(perturbed, rng):
    U = WeylPlusSection.random(perturbed, rng)
    x = sample_points(perturbed, 2)
    with pytest.raises(deformation.NotAntiSelfDualError, match="W\\+"):
        deformation.delta_z_identity(Calc(perturbed), U, x)
    with pytest.raises(deformation.NotAntiSelfDualError):
        deformation.weitzenboeck_residuals(Calc(perturbed), U, x)


def test_double_divergence_examples(flat, product, perturbed, rng):
    rep = deformation.double_divergence(Calc(flat, depth=3), WeylPlusSection.constant(flat, U0), sample_points(flat))
    assert rep["lhs_sup"] < 1e-8 and rep["rhs_sup"] < 1e-20
    rep = deformation.double_divergence(Calc(product, depth=3), WeylPlusSection.random(product, rng),
                                        sample_points(product, 3))
    assert rep["lhs_sup"] < 1e-6
    rep = deformation.double_divergence(Calc(perturbed, depth=3), WeylPlusSection.random(perturbed, rng),
                                        sample_points(perturbed, 3))
    assert rep["residual_sup"] < 1e-5
    assert rep["rhs_sup"] > 1e-4


def test_weitzenboeck_flat_constant(flat):
    rep = deformation.weitzenboeck_residuals(Calc(flat, depth=3), WeylPlusSection.constant(flat, U0),
                                             sample_points(flat))
    assert rep["I_sup"] < 1e-6 and rep["II_sup"] < 1e-6 and rep["dstar_sup"] < 1e-8


def test_weitzenboeck_second_identity_self_dual_part_on_product(product, rng):
    rep = deformation.weitzenboeck_residuals(Calc(product, depth=3), WeylPlusSection.random(product, rng),
                                             sample_points(product, 3))
    assert rep["II_wplus_sup"] < 1e-5


def test_integral_suite_zero_section(product):
    zero = WeylPlusSection.constant(product, np.zeros(5))
    rep = deformation.integral_identity_suite(Calc(product, depth=3), zero, product.lattice((3, 3, 3, 2)))
    for name in ("bs4", "bsd3", "bsd5", "bsd8"):
        assert rep[name]["lhs"] == 0.0 and rep[name]["rhs"] == 0.0


def test_vanishing_report():
    assert deformation.vanishing_report(1.0, 0.0, 0.0)["conclusion"] == "U = 0"
    assert deformation.vanishing_report(-1.0, 0.0, 0.0)["conclusion"] == "not forced"
    assert deformation.vanishing_report(1.0, 0.5, 0.0)["nabla_U_vanishes"] is False


def random_coframe(A):
    g = np.einsum("pab,pcb->pac", A, A) + np.eye(4)
    theta = np.swapaxes(np.linalg.cholesky(g), 1, 2)
    if np.any(np.linalg.det(theta) < 0):
        theta[:, 0] *= np.sign(np.linalg.det(theta))[:, None]
    return g, theta


@settings(max_examples=40, deadline=None)
@given(arrays(float, (2, 5), elements=finite), arrays(float, (2, 4, 4), elements=finite))
def test_section_algebra(u5, A):
    g, theta = random_coframe(A)
    ginv = np.linalg.inv(g)
    U = algebra.weyl_plus_tensor(u5, algebra.sd_basis(theta))
    s = max(1.0, sup(U))
    assert deformation.fundamental_contraction_defect(U, ginv) <= 1e-10 * s * s
    assert sup(algebra.hodge_second_pair(U, g) - U) <= 1e-10 * s
    assert sup(np.einsum("pab,pacbd->pcd", ginv, U)) <= 1e-10 * s
    assert sup(algebra.bianchi_defect(U)) <= 1e-10 * s


@settings(max_examples=30, deadline=None)
@given(arrays(float, (2, 4, 4, 4, 4), elements=finite), arrays(float, (2, 4, 4), elements=finite))
def test_weyl_plus_projection_idempotent(T, A):
    g, theta = random_coframe(A)
    ginv, basis = np.linalg.inv(g), algebra.sd_basis(theta)
    once = algebra.weyl_plus_projection(T, basis, ginv)
    twice = algebra.weyl_plus_projection(once, basis, ginv)
    assert sup(twice - once) <= 1e-10 * max(1.0, sup(once))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (1, 5), elements=finite), arrays(float, (1, 4, 4), elements=finite),
       arrays(float, (1, 4, 4), elements=finite))
def test_V_norm_identity(u5, Tr, A):
    g, theta = random_coframe(A)
    U = algebra.weyl_plus_tensor(u5, algebra.sd_basis(theta))
    T = 0.5 * (Tr + np.swapaxes(Tr, 1, 2))
    rep = deformation.V_norm_identity(T, U, np.linalg.inv(g))
    assert rep["residual_sup"] <= 1e-12 * max(1.0, sup(rep["rhs"]))


def test_split_z_of_sd_section_is_sd(product, rng):
    x = sample_points(product, 4)
    U = WeylPlusSection.random(product, rng)
    z = deformation.split_z(Calc(product, depth=1), U, x)
    g = product.metric(x)
    d_low = np.einsum("pka,plb,pijab->pijkl", g, g, z.d)
    star_first = np.transpose(algebra.hodge_second_pair(np.transpose(d_low, (0, 3, 4, 1, 2)), g), (0, 3, 4, 1, 2))
    assert sup(d_low - star_first) <= 1e-12 * max(1.0, sup(d_low))
