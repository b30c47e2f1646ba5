import math

import numpy as np
import pytest

from asdlab import solver
from asdlab.conformal import HypothesisError
from asdlab.solver import SolverConfig

Y_SPHERE = 8 * math.sqrt(6) * math.pi
THEOREM = (0.0, 0.0, -6.0, -0.5, -2.0 * Y_SPHERE)


@pytest.fixture(scope="module")
def circle():
    return solver.circle_symmetric_reduction()


@pytest.fixture(scope="module")
def flagship():
    return solver.maximize_phi(SolverConfig())


def smooth(pb, seed, amp=0.1):
    rng = np.random.default_rng(seed)
    t = 2 * math.pi * pb.coordinates() / pb.extent
    return amp * sum(rng.normal() * np.cos(k * t) + rng.normal() * np.sin(k * t) for k in range(1, 4))


def test_gradient_matches_finite_differences(circle):
    rep = solver.gradient_self_test(circle, smooth(circle, 1), THEOREM, np.random.default_rng(2))
    assert rep["max_rel_error"] < 1e-5
    assert rep["constant_direction"] < 1e-10


def test_gradient_zero_on_flat_torus_at_zero():
    pb = solver.flat_torus_problem(nodes=5)
    G = solver.gradient_phi(pb, np.zeros(pb.shape), (0.0, 0.0, -6.0, 0.0, 0.0))
    assert np.max(np.abs(G)) < 1e-12


def test_reduced_matches_four_d_at_zero(circle):
    # the 4-D route takes curvature from finite differences, so agreement is to stencil round-off
    rep = solver.four_d_phi(circle, np.zeros(circle.shape), THEOREM)
    assert rep["rel_diff"] < 1e-9


def test_reduced_matches_four_d_single_mode(circle):
    w = 0.1 * np.sin(2 * math.pi * circle.coordinates() / circle.extent)
    assert solver.four_d_phi(circle, w, THEOREM)["rel_diff"] < 1e-6


def test_derived_checks_on_background(circle):
    zero = np.zeros(circle.shape)
    el = solver.el_residual(circle, zero, THEOREM)
    rep = solver.derived_metric_checks(circle, zero, el["mu"], Y_SPHERE)
    assert rep["J_min"] == pytest.approx(1.0, rel=1e-12)
    assert rep["J_positive"]
    # |P0|^2 = 3/4 and J = 1 give slack -3/4 + 15/4 = 3 in the unscaled metric
    assert rep["keyPDE_ok"]
    assert rep["keymu_basis"] == "conditional on the supplied Yamabe constant"


def test_background_keyPDE_slack_unit_metric():
    rep = solver.pointwise_key_checks(np.ones(4), np.zeros(4), np.full(4, 0.75))
    assert rep["keyPDE_margin_min"] == pytest.approx(3.0)
    assert rep["J_positive"] and rep["keyPDE_ok"]


def test_constant_curvature_el_field_is_constant(circle):
    el = solver.el_residual(circle, np.zeros(circle.shape), THEOREM)
    assert el["residual_sup"] < 1e-9 * abs(el["mu"])


def test_keyPDE_violation_names_site():
    J = np.ones(6)
    lapJ = np.zeros(6)
    P0_2 = np.full(6, 0.75)
    lapJ[4] = 10.0
    rep = solver.pointwise_key_checks(J, lapJ, P0_2)
    assert rep["keyPDE_ok"] is False
    assert rep["keyPDE_worst_site"] == 4


def test_flagship_run(flagship):
    r = flagship
    assert r.converged and r.grad_norm < 1e-7
    assert r.el_residual_sup < 1e-6
    assert r.volume_hat == pytest.approx(1.0, abs=1e-8)
    assert r.J_min > 0 and r.keyPDE_margin_min >= -1e-6
    assert r.checks["mu_integral_identity"]["rel_diff"] < 1e-6
    assert r.checks["gradient_self_test"]["max_rel_error"] < 1e-5


def test_flagship_ascent_is_monotone(flagship):
    values = [row[1] for row in flagship.trace]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert flagship.phi_value >= flagship.phi_initial


def test_initial_value_is_yamabe_term(circle):
    zero = np.zeros(circle.shape)
    f = solver.functionals(circle, zero)
    assert solver.phi_value(circle, zero, THEOREM) == pytest.approx(THEOREM[4] * f["IV"], rel=1e-14)


def test_stationarity_tracks_gradient(flagship):
    assert flagship.el_residual_sup <= 10 * 1e-7
    loose = solver.maximize_phi(SolverConfig(grad_tol=1e-3))
    assert loose.grad_norm >= flagship.grad_norm
    assert loose.el_residual_sup >= flagship.el_residual_sup


def test_zero_weight_limb_converges():
    r = solver.maximize_phi(SolverConfig(gammas=(0.0, 0.0, -6.0, -0.5, 0.0)))
    assert r.converged
    assert r.el_residual_sup < 1e-6


def test_flat_torus_full_4d():
    r = solver.maximize_phi(SolverConfig(geometry="flat_t4", reduction="full-4d", nodes=5, grad_tol=1e-5))
    assert r.converged
    assert np.ptp(r.w_star) < 1e-8


def test_iteration_limit_flags_non_converged():
    r = solver.maximize_phi(SolverConfig(max_iters=1))
    assert not r.converged and r.iterations == 1


def test_runs_are_deterministic():
    a = solver.maximize_phi(SolverConfig(seed=3, max_iters=5))
    b = solver.maximize_phi(SolverConfig(seed=3, max_iters=5))
    assert np.array_equal(a.w_star, b.w_star) and a.trace == b.trace


def test_sphere_is_refused():
    with pytest.raises(HypothesisError, match="kappa"):
        solver.maximize_phi(SolverConfig(geometry="round_s4", reduction="full-4d"))


def test_kappa_bound_on_periodic_problem():
    pb = solver.PeriodicProblem("fixture", 1, 9, 1.0, R=0.0, ric_periodic=0.0, Q=100.0, transverse_volume=1.0)
    with pytest.raises(HypothesisError):
        solver.check_hypotheses(pb, THEOREM)


@pytest.mark.parametrize("gammas", [(0, 0, 1.0, -0.5, -1.0), (0, 0, -6.0, 0.0, -1.0), (0, 0, -6.0, -0.5, 1.0)])
def test_gamma_signs_are_enforced(gammas):
    with pytest.raises(HypothesisError):
        SolverConfig(gammas=gammas).validate()


def test_configuration_errors():
    with pytest.raises(solver.ConfigurationError):
        solver.circle_symmetric_reduction("flat_t4")
    with pytest.raises(solver.ConfigurationError):
        solver.build_problem(SolverConfig(geometry="perturbed_flat", reduction="full-4d"))
    with pytest.raises(solver.ConfigurationError):
        SolverConfig(reduction="radial").validate()
    with pytest.raises(solver.ConfigurationError):
        solver.flat_torus_problem(nodes=4)


def test_default_gammas_follow_yamabe():
    assert SolverConfig(yamabe=3.0).resolved_gammas() == (0.0, 0.0, -6.0, -0.5, -6.0)
