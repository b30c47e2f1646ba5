import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from asdlab import geometry, tractor
from asdlab.calculus import Calc, sup
from asdlab.suites import pairing_table_residual

from conftest import sample_points

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def tf(sigma, mu, rho):
    return tractor.TractorField(np.atleast_1d(np.asarray(sigma, float)), np.atleast_2d(np.asarray(mu, float)),
                                np.atleast_1d(np.asarray(rho, float)))


def test_thomas_D_flat(flat):
    x = sample_points(flat)
    c = Calc(flat, depth=2)
    D = tractor.thomas_D(c, lambda y: np.ones(len(y)), x)
    assert np.allclose(D.stack(), [1, 0, 0, 0, 0, 0], atol=1e-12)
    D = tractor.thomas_D(c, lambda y: np.sin(2 * math.pi * y[:, 0]), x)
    assert np.allclose(D.rho, math.pi ** 2 * np.sin(2 * math.pi * x[:, 0]), atol=1e-6)


def test_thomas_D_sphere(sphere):
    x = sample_points(sphere)
    D = tractor.thomas_D(Calc(sphere, depth=2), lambda y: np.ones(len(y)), x)
    assert np.allclose(D.stack(), [1, 0, 0, 0, 0, -0.5], atol=1e-8)


def test_thomas_D_rejects_wrong_weight(flat):
    with pytest.raises(tractor.WeightError):
        tractor.thomas_D(Calc(flat), lambda y: np.ones(len(y)), sample_points(flat), weight=2)


def test_pairing_examples():
    ginv = np.eye(4)[None]
    Y, X = tf(1, [0, 0, 0, 0], 0), tf(0, [0, 0, 0, 0], 1)
    assert tractor.tractor_pair(Y, X, ginv)[0] == 1.0
    assert tractor.tractor_pair(Y, Y, ginv)[0] == 0.0
    mu, nu = [1.0, 2.0, -1.0, 0.5], [0.5, -1.0, 3.0, 2.0]
    assert tractor.tractor_pair(tf(0, mu, 0), tf(0, nu, 0), ginv)[0] == np.dot(mu, nu)


def test_pairing_table_exact(perturbed):
    ginv = np.linalg.inv(perturbed.metric(sample_points(perturbed, 6)))
    assert sup(pairing_table_residual(ginv)) == 0.0


def test_tractor_connection_flat_examples(flat):
    x = sample_points(flat)
    c = Calc(flat, depth=1)
    const = lambda y: tf(np.ones(len(y)), np.zeros((len(y), 4)), np.zeros(len(y)))
    assert sup(tractor.tractor_connection(c, const, x).stack()) < 1e-12
    dx1 = lambda y: tf(np.zeros(len(y)), np.tile([1.0, 0, 0, 0], (len(y), 1)), np.zeros(len(y)))
    n = tractor.tractor_connection(c, dx1, x)
    assert np.allclose(n.sigma, np.tile([-1.0, 0, 0, 0], (len(x), 1)), atol=1e-12)
    assert sup(n.mu) < 1e-12 and sup(n.rho) < 1e-12


def test_einstein_scale_parallel_on_sphere(sphere):
    x = sample_points(sphere)
    c = Calc(sphere, depth=2)
    n = tractor.tractor_connection(c, lambda y: tractor.thomas_D(c, lambda z: np.ones(len(z)), y), x)
    assert sup(n.stack()) < 1e-8


@pytest.mark.parametrize("name", ["flat", "sphere", "perturbed"])
def test_projector_derivatives_algebraic(name, request):
    bg = request.getfixturevalue(name)
    assert tractor.projector_derivative_residual(Calc(bg), sample_points(bg)) < 1e-12


def test_conformal_transform_examples(rng):
    ginv = np.eye(4)[None].repeat(3, axis=0)
    V = tractor.TractorField.unstack(rng.normal(size=(3, 6)))
    same = tractor.conformal_transform_tractor(V, np.zeros((3, 4)), ginv)
    assert sup((same - V).stack()) == 0.0
    ups = rng.normal(size=(3, 4))
    Y = tractor.TractorField(np.ones(3), np.zeros((3, 4)), np.zeros(3))
    out = tractor.conformal_transform_tractor(Y, ups, ginv)
    assert np.allclose(out.mu, ups) and np.allclose(out.rho, -0.5 * np.sum(ups ** 2, axis=1))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (2, 6), elements=finite), arrays(float, (2, 6), elements=finite),
       arrays(float, (2, 4), elements=finite), arrays(float, (2, 4, 4), elements=finite))
def test_pairing_invariant_under_scale_change(v, w, ups, A):
    ginv = np.linalg.inv(np.einsum("pab,pcb->pac", A, A) + np.eye(4))
    V, W = tractor.TractorField.unstack(v), tractor.TractorField.unstack(w)
    h0 = tractor.tractor_pair(V, W, ginv)
    h1 = tractor.tractor_pair(tractor.conformal_transform_tractor(V, ups, ginv),
                              tractor.conformal_transform_tractor(W, ups, ginv), ginv)
    scale = max(1.0, sup(v) * sup(w) * (1 + sup(ups)) ** 2 * max(1.0, sup(ginv)))
    assert sup(h1 - h0) <= 1e-12 * scale
    back = tractor.conformal_transform_tractor(tractor.conformal_transform_tractor(V, ups, ginv), -ups, ginv)
    assert sup((back - V).stack()) <= 1e-12 * scale


@settings(max_examples=30, deadline=None)
@given(arrays(float, (2, 4), elements=finite), arrays(float, (2, 4, 4), elements=finite),
       arrays(float, (2,), elements=st.floats(0.5, 2.0)))
def test_scale_change_matrix_preserves_metric(ups, A, omega):
    g = np.einsum("pab,pcb->pac", A, A) + np.eye(4)
    ginv = np.linalg.inv(g)
    T = tractor.scale_change_matrix(ups, ginv, omega)
    ghat_inv = ginv / omega[:, None, None] ** 2
    H, Hh = tractor.tractor_metric(ginv), tractor.tractor_metric(ghat_inv)
    assert sup(np.einsum("pia,pij,pjb->pab", T, Hh, T) - H) <= 1e-10 * max(1.0, sup(H))


def test_tractor_curvature_vanishes_on_conformally_flat(flat, product):
    for bg in (flat, product):
        x = sample_points(bg, 3)
        pack = geometry.curvature_pack(Calc(bg, depth=3), x, cotton=True)
        assert tractor.tractor_curvature(pack.W, pack.C, pack.ginv).sup() < 1e-5


def test_tractor_curvature_matches_commutator_on_perturbed(perturbed, rng):
    x = sample_points(perturbed, 3)
    c = Calc(perturbed, depth=3)
    pack = geometry.curvature_pack(c, x, cotton=True)
    kap = tractor.tractor_curvature(pack.W, pack.C, pack.ginv)
    assert kap.is_antisymmetric(1e-12)
    V = tractor.random_tractor(perturbed, rng)
    res = tractor.curvature_commutator(c, V, x) - np.einsum("pabij,pj->pabi", kap.matrix(pack.g), V(x))
    assert sup(res) < 1e-5


def test_adjoint_matrix_round_trip(rng):
    g = np.eye(4)[None] + 0.1 * np.diag(rng.normal(size=4))[None]
    d = rng.normal(size=(1, 4, 4))
    F = tractor.AdjointTractorTwoForm(rng.normal(size=1), rng.normal(size=(1, 4)), rng.normal(size=(1, 4)),
                                      d - np.swapaxes(d, 1, 2))
    back = tractor.AdjointTractorTwoForm.from_matrix(F.matrix(g), np.linalg.inv(g))
    assert (back - F).sup() < 1e-14
    # an adjoint tractor is skew with respect to h
    M = F.matrix(g)
    H = tractor.tractor_metric(np.linalg.inv(g))
    assert sup(np.einsum("pij,pjk->pik", H, M) + np.einsum("pji,pjk->pik", M, H)) < 1e-14


def test_metric_compatibility_on_perturbed(perturbed, rng):
    x = sample_points(perturbed)
    V, W = tractor.random_tractor(perturbed, rng), tractor.random_tractor(perturbed, rng)
    assert sup(tractor.metric_compatibility_residual(Calc(perturbed, depth=1), V, W, x)) < 1e-8


def test_almost_einstein_examples(sphere, product, flat):
    one = lambda y: np.ones(len(y))
    x = sample_points(sphere)
    assert sup(tractor.almost_einstein_residual(Calc(sphere, depth=2), one, x)) < 1e-8

    x = sample_points(product, 4)
    res = tractor.almost_einstein_residual(Calc(product, depth=2), one, x)
    e = np.linalg.inv(product.coframe(x))
    framed = np.einsum("pai,pab,pbj->pij", e, res, e)
    assert sup(framed - np.diag([0.25, 0.25, 0.25, -0.75])) < 1e-7

    x = sample_points(flat)
    sigma = lambda y: 1.0 + 0.1 * np.sin(2 * math.pi * y[:, 0])
    res = tractor.almost_einstein_residual(Calc(flat, depth=2), sigma, x)
    h = -0.4 * math.pi ** 2 * np.sin(2 * math.pi * x[:, 0])
    want = np.einsum("p,ab->pab", h, np.diag([1.0, 0, 0, 0]) - 0.25 * np.eye(4))
    assert sup(res - want) < 1e-6
