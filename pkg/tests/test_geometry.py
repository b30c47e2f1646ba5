import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from asdlab import algebra, geometry
from asdlab.calculus import Calc, sup
from asdlab.models import DegenerateMetricError, NonFiniteFieldError, make_background

from conftest import sample_points

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def sphere_christoffel(x):
    # g = e^{2f} delta with f = log 2 - log(1 + |x|^2): Gamma^c_ab = d_a f delta_bc + d_b f delta_ac - d_c f delta_ab
    df = -2.0 * x / (1.0 + np.sum(x * x, axis=1))[:, None]
    eye = np.eye(4)
    return (np.einsum("pa,bc->pcab", df, eye) + np.einsum("pb,ac->pcab", df, eye)
            - np.einsum("pc,ab->pcab", df, eye))


def test_flat_christoffel_vanishes(flat):
    x = sample_points(flat)
    assert sup(geometry.christoffel(Calc(flat), x)) < 1e-12


def test_sphere_christoffel_matches_conformal_formula(sphere):
    x = sample_points(sphere, 6)
    G = geometry.christoffel(Calc(sphere), x)
    assert sup(G - sphere_christoffel(x)) < 1e-8
    assert sup(G - np.swapaxes(G, 2, 3)) == 0.0


def test_product_christoffel_constant_along_circle(product):
    x = sample_points(product, 4)
    shifted = x.copy()
    shifted[:, 3] += 1.234
    c = Calc(product)
    assert sup(geometry.christoffel(c, x) - geometry.christoffel(c, shifted)) < 1e-12


def test_riemann_flat_and_sphere(flat, sphere):
    assert sup(geometry.riemann(Calc(flat), sample_points(flat))[1]) < 1e-9
    x = sample_points(sphere, 6)
    g = sphere.metric(x)
    want = np.einsum("pac,pbd->pabcd", g, g) - np.einsum("pad,pbc->pabcd", g, g)
    _, Rm = geometry.riemann(Calc(sphere), x)
    assert sup(Rm - want) < 1e-7


def test_product_riemann_vanishes_on_circle_planes(product):
    x = sample_points(product, 5)
    _, Rm = geometry.riemann(Calc(product), x)
    assert sup(Rm[:, 3]) < 1e-8 and sup(Rm[:, :, :, 3]) < 1e-8


def test_decompose_sphere(sphere):
    x = sample_points(sphere, 6)
    pack = geometry.curvature_pack(Calc(sphere), x)
    assert np.allclose(pack.Rscal, 12.0, atol=1e-7)
    assert np.allclose(pack.J, 2.0, atol=1e-8)
    assert sup(pack.P - 0.5 * pack.g) < 1e-7
    assert sup(pack.W) < 1e-7 and sup(pack.Wplus) < 1e-7 and sup(pack.Wminus) < 1e-7


def test_decompose_product_schouten_in_orthonormal_frame(product):
    x = sample_points(product, 5)
    pack = geometry.curvature_pack(Calc(product), x)
    assert np.allclose(pack.Rscal, 6.0, atol=1e-7)
    assert np.allclose(pack.J, 1.0, atol=1e-7)
    theta = product.coframe(x)
    e = np.linalg.inv(theta)  # frame vectors as columns
    P_frame = np.einsum("pai,pab,pbj->pij", e, pack.P, e)
    assert sup(P_frame - np.diag([0.5, 0.5, 0.5, -0.5])) < 1e-7
    assert sup(pack.W) < 1e-8


def test_decompose_flat_all_zero(flat):
    pack = geometry.curvature_pack(Calc(flat), sample_points(flat))
    for T in (pack.Rm, pack.Ric, pack.W, pack.P, pack.Rscal):
        assert sup(T) < 1e-20


def test_decompose_rejects_malformed_curvature(rng):
    Rm = rng.normal(size=(2, 4, 4, 4, 4))
    with pytest.raises(geometry.MalformedCurvatureError):
        geometry.decompose(Rm, np.broadcast_to(np.eye(4), (2, 4, 4)).copy())


@settings(max_examples=30, deadline=None)
@given(arrays(float, (3, 4, 4), elements=finite), arrays(float, (3, 4, 4), elements=finite))
def test_decompose_reassembles_algebraic_curvature(A, S):
    g = np.einsum("pab,pcb->pac", A, A) + 2.0 * np.eye(4)
    T = np.einsum("pab,pcd->pabcd", S, S)
    Rm = algebra.curvature_projection(T - np.swapaxes(T, 1, 2))
    pack = geometry.decompose(Rm, g, tol=1e-8)
    scale = max(sup(Rm), 1.0)
    assert sup(pack.Rm - pack.W - algebra.kulkarni_nomizu(g, pack.P)) <= 1e-10 * scale
    ginv = np.linalg.inv(g)
    for t in algebra.traces(pack.W, ginv):
        assert sup(t) <= 1e-10 * scale
    assert sup(np.einsum("pab,pab->p", ginv, pack.P) - pack.J) <= 1e-12 * scale


def test_cotton_vanishes_on_models(sphere, product, flat):
    for bg in (sphere, product, flat):
        C, B = geometry.cotton_bach(Calc(bg, depth=3), sample_points(bg, 3))
        assert sup(C) < 1e-5
        assert sup(B) < 1e-4


def test_cotton_bianchi_on_perturbed_flat(perturbed):
    x = sample_points(perturbed, 4)
    res, scale = geometry.bianchi_residual(Calc(perturbed, depth=3), x)
    assert sup(res) < 1e-6 * sup(scale)


def test_bach_symmetric_trace_free_on_asd(product):
    x = sample_points(product, 3)
    pack = geometry.curvature_pack(Calc(product, depth=3), x)
    _, B = geometry.cotton_bach(Calc(product, depth=3), x)
    assert sup(B - np.swapaxes(B, 1, 2)) < 1e-4
    assert sup(np.einsum("pab,pab->p", pack.ginv, B)) < 1e-4


def sd_constant(y):
    w = np.zeros((len(y), 4, 4))
    w[:, 0, 1], w[:, 2, 3] = 1.0, 1.0
    return w - np.swapaxes(w, 1, 2)


def test_hodge_weitzenboeck_flat_examples(flat):
    x = sample_points(flat)
    c = Calc(flat, depth=2)
    rep = geometry.hodge_weitzenboeck_residual(c, sd_constant, x)
    assert rep["residual_sup"] < 1e-20 and rep["hodge_laplacian_sup"] < 1e-20 and rep["self_dual"]
    wave = lambda y: np.sin(2 * math.pi * y[:, 0])[:, None, None] * sd_constant(y)
    assert geometry.hodge_weitzenboeck_residual(c, wave, x)["residual_sup"] < 1e-6


def test_hodge_weitzenboeck_sphere_random_form(sphere, rng):
    fs = [sphere.random_function(rng) for _ in range(6)]
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

    def omega(y):
        out = np.zeros((len(y), 4, 4))
        for f, (a, b) in zip(fs, pairs):
            out[:, a, b] = f(y)
            out[:, b, a] = -out[:, a, b]
        return out

    rep = geometry.hodge_weitzenboeck_residual(Calc(sphere, depth=2), omega, sample_points(sphere, 4))
    assert rep["residual_sup"] < 1e-5
    assert rep["R_min"] > 0


def test_killing_operator_examples(flat, sphere):
    x = sample_points(flat)
    c = Calc(flat)
    const = lambda y: np.tile([1.0, -2.0, 0.5, 3.0], (len(y), 1))
    assert sup(geometry.killing_operator(c, const, x)) < 1e-12
    wave = lambda y: np.stack([0 * y[:, 0], np.sin(2 * math.pi * y[:, 0]), 0 * y[:, 0], 0 * y[:, 0]], axis=1)
    K = geometry.killing_operator(c, wave, x)
    assert np.allclose(K[:, 0, 1], 2 * math.pi * np.cos(2 * math.pi * x[:, 0]), atol=1e-8)
    assert sup(np.einsum("paa->p", K)) < 1e-12
    # rotation in the (x1, x2) plane is an isometry of the stereographic chart metric
    xs = sample_points(sphere, 5)
    rot = lambda y: sphere.metric(y)[:, :, 0] * -y[:, 1:2] + sphere.metric(y)[:, :, 1] * y[:, 0:1]
    assert sup(geometry.killing_operator(Calc(sphere), rot, xs)) < 1e-7


def test_conformal_rescale_examples(flat, sphere):
    x = sample_points(flat)
    c = Calc(flat, depth=2)
    hat, res = geometry.conformal_rescale(c, lambda y: np.full(len(y), 0.3), x)
    assert sup(res) < 1e-12
    assert sup(Calc(hat).schouten(x)) < 1e-12
    _, res = geometry.conformal_rescale(c, lambda y: 0.1 * np.sin(2 * math.pi * y[:, 0]), x)
    assert sup(res) < 1e-6
    # the sphere metric is e^{2f} times the flat chart metric
    big = make_background("flat_t4", extent=10.0)
    f = lambda y: math.log(2.0) - np.log1p(np.sum(y * y, axis=1))
    xs = sample_points(sphere, 4)
    hat, res = geometry.conformal_rescale(Calc(big, depth=2), f, xs)
    assert sup(res) < 1e-6
    assert sup(Calc(hat, depth=2).schouten(xs) - 0.5 * sphere.metric(xs)) < 1e-6


def test_commutator_sign_convention(sphere, rng):
    f = [sphere.random_function(rng) for _ in range(4)]
    omega = lambda y: np.stack([h(y) for h in f], axis=1)
    res = geometry.commutator_residual(Calc(sphere, depth=3), omega, sample_points(sphere, 3))
    assert sup(res) < 1e-5


def test_contracted_bianchi(perturbed):
    res = geometry.contracted_bianchi_residual(Calc(perturbed, depth=3), sample_points(perturbed, 4))
    assert sup(res) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(float, (2, 4, 4), elements=finite), arrays(float, (2, 4, 4), elements=finite))
def test_two_form_star_algebra(A, W):
    g = np.einsum("pab,pcb->pac", A, A) + np.eye(4)
    tf = geometry.TwoFormField.from_values(W, g)
    s = max(sup(tf.omega), 1.0)
    assert sup(algebra.hodge(tf.dual, g) - tf.omega) <= 1e-9 * s
    assert sup(tf.sd_part + tf.asd_part - tf.omega) <= 1e-12 * s
    assert sup(algebra.hodge(tf.sd_part, g) - tf.sd_part) <= 1e-9 * s
    assert sup(algebra.hodge(tf.asd_part, g) + tf.asd_part) <= 1e-9 * s
    assert sup(algebra.inner(tf.sd_part, tf.asd_part, np.linalg.inv(g))) <= 1e-9 * s * s


@settings(max_examples=20, deadline=None)
@given(arrays(float, (2, 4, 4), elements=finite))
def test_self_dual_projectors_idempotent(A):
    g = np.einsum("pab,pcb->pac", A, A) + np.eye(4)
    Pp, Pm = algebra.sd_projector(g, 1), algebra.sd_projector(g, -1)
    mm = np.matmul
    assert sup(mm(Pp, Pp) - Pp) < 1e-9
    assert sup(mm(Pm, Pm) - Pm) < 1e-9
    assert sup(mm(Pp, Pm)) < 1e-9


def test_metric_field_invariants(perturbed):
    mf = geometry.MetricField.sample(perturbed, sample_points(perturbed, 10))
    assert mf.identity_defect() < 1e-12
    assert np.all(mf.vol > 0)
    assert sup(mf.g - np.swapaxes(mf.g, 1, 2)) == 0.0


def test_degenerate_metric_names_site(flat):
    class Bad(type(flat)):
        def metric(self, x):
            g = super().metric(x)
            g[2] = 0.0
            return g

    with pytest.raises(DegenerateMetricError, match="site 2"):
        geometry.MetricField.sample(Bad(), sample_points(flat, 4))


def test_non_finite_metric_aborts(flat):
    class Bad(type(flat)):
        def metric(self, x):
            g = super().metric(x)
            g[1, 0, 0] = np.nan
            return g

    with pytest.raises(NonFiniteFieldError, match="site 1"):
        geometry.MetricField.sample(Bad(), sample_points(flat, 3))


def test_map_sites_threads_match_serial(perturbed):
    x = perturbed.lattice(6).points
    c = Calc(perturbed)
    serial = geometry.map_sites(c.scalar, x, chunk=100)
    geometry.set_threads(3)
    try:
        threaded = geometry.map_sites(c.scalar, x, chunk=100)
    finally:
        geometry.set_threads(1)
    assert np.array_equal(serial, threaded)
    with pytest.raises(ValueError):
        geometry.set_threads(0)


def test_fourth_order_convergence_on_sphere(sphere):
    x = sample_points(sphere, 4)
    errs = []
    for factor in (8.0, 4.0):
        pack = geometry.curvature_pack(Calc(sphere, depth=2, factor=factor), x)
        errs.append(sup(pack.Rscal - 12.0))
    assert errs[0] / errs[1] >= 8.0
