"""Continuous-time side: coefficient assemblies, the integrator, exact
Gaussian solutions and loss curves, and the scalar loss ODE."""

import csv

import numpy as np
import pytest

from advsde.models import LinearRegressionModel, QuadraticModel
from advsde.numerics import RngStream, loglog_fit
from advsde.sde import (
    CONVENTIONS,
    LossOdeParams,
    OuSolution,
    SdeCoefficients,
    coefficients_adversarial,
    coefficients_controlled,
    coefficients_sgd,
    default_dt,
    euler_maruyama,
    loss_ode_integrate,
    loss_ode_rhs,
    path_to_csv,
    quad_expected_loss,
    quad_expected_loss_sgd,
    quad_stationary_loss,
    sde_one_step_moments,
)
from advsde.training import TrainConfig, one_step_moments_analytic

ETA_GRID = (0.1, 0.05, 0.025, 0.0125)


def _cfg(**overrides):
    base = dict(eta=0.1, batch_size=20, inner_steps=5, horizon=1.0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture()
def quad_1d():
    return QuadraticModel(np.array([[1.0]]))


# -- coefficient assemblies ----------------------------------------------------


def test_adversarial_drift_hand_value(quad_model_2d):
    coeffs = coefficients_adversarial(quad_model_2d, _cfg())
    np.testing.assert_allclose(
        coeffs.drift(np.ones(2)), [-1.55, -4.2], rtol=1e-12
    )


def test_adversarial_drift_matches_effective_curvature(quad_model_2d):
    cfg = _cfg()
    coeffs = coefficients_adversarial(quad_model_2d, cfg)
    h = quad_model_2d.h
    h_hat = h + (cfg.inner_steps + 0.5) * cfg.eta * (h @ h)
    gen = RngStream(61, (0,)).generator
    for _ in range(20):
        theta = gen.standard_normal(2)
        np.testing.assert_allclose(
            coeffs.drift(theta), -(theta @ h_hat), rtol=0.0, atol=1e-12
        )


def test_adversarial_coefficients_without_inner_loop_reduce_to_sgd(linreg_model):
    cfg = _cfg(inner_steps=0)
    adv = coefficients_adversarial(linreg_model, cfg)
    sgd = coefficients_sgd(linreg_model, cfg)
    thetas = RngStream(62, (0,)).generator.standard_normal((100, 2))
    for theta in thetas:
        np.testing.assert_allclose(adv.b0(theta), sgd.b0(theta), rtol=0.0, atol=1e-14)
        np.testing.assert_allclose(adv.b1(theta), sgd.b1(theta), rtol=0.0, atol=1e-14)
    np.testing.assert_array_equal(adv.sigma(thetas[0]), sgd.sigma(thetas[0]))


def test_drift_vanishes_at_the_minimum(quad_model_2d):
    coeffs = coefficients_adversarial(quad_model_2d, _cfg())
    np.testing.assert_array_equal(coeffs.b0(np.zeros(2)), 0.0)
    np.testing.assert_array_equal(coeffs.b1(np.zeros(2)), 0.0)


def test_sgd_drift_closed_form(quad_model_2d):
    cfg = _cfg()
    coeffs = coefficients_sgd(quad_model_2d, cfg)
    h = quad_model_2d.h
    theta = np.array([0.3, -1.2])
    np.testing.assert_allclose(
        coeffs.drift(theta), -(theta @ (h + 0.5 * cfg.eta * h @ h)), atol=1e-14
    )


def test_diffusion_shared_between_algorithms(quad_model_2d):
    cfg = _cfg()
    adv = coefficients_adversarial(quad_model_2d, cfg)
    sgd = coefficients_sgd(quad_model_2d, cfg)
    theta = np.ones(2)
    np.testing.assert_array_equal(adv.sigma(theta), sgd.sigma(theta))
    np.testing.assert_allclose(
        adv.sigma(theta), np.sqrt(2.0 / cfg.beta) * quad_model_2d.h
    )


def test_coefficients_require_closed_form_statistics(logistic_model):
    for factory in (coefficients_adversarial, coefficients_sgd):
        with pytest.raises(ValueError, match="closed-form"):
            factory(logistic_model, _cfg())


def test_controlled_validation(quad_model_2d):
    with pytest.raises(ValueError, match="u must"):
        coefficients_controlled(quad_model_2d, _cfg(), 1.2)
    with pytest.raises(ValueError, match="convention"):
        coefficients_controlled(quad_model_2d, _cfg(), 0.5, convention="printed")


def test_controlled_full_rate_equals_adversarial(quad_model_2d, linreg_model):
    for model in (quad_model_2d, linreg_model):
        cfg = _cfg()
        adv = coefficients_adversarial(model, cfg)
        ctl = coefficients_controlled(model, cfg, 1.0, convention="general_formula")
        gen = RngStream(63, (0,)).generator
        for _ in range(10):
            theta = gen.standard_normal(model.d_theta)
            np.testing.assert_allclose(ctl.b0(theta), adv.b0(theta), atol=1e-14)
            np.testing.assert_allclose(ctl.b1(theta), adv.b1(theta), atol=1e-14)
        np.testing.assert_allclose(ctl.sigma(theta), adv.sigma(theta), atol=1e-16)


def test_controlled_zero_rate_freezes_the_dynamics(linreg_model):
    for convention in CONVENTIONS:
        ctl = coefficients_controlled(linreg_model, _cfg(), 0.0, convention=convention)
        theta = np.array([0.4, -0.7])
        np.testing.assert_array_equal(ctl.drift(theta), 0.0)
        np.testing.assert_array_equal(ctl.sigma(theta), 0.0)


def test_controlled_printed_regression_drift():
    gen = RngStream(64, (0,)).generator
    design = gen.standard_normal((4, 2))
    mean = gen.standard_normal(4)
    model = LinearRegressionModel(design, mean, np.eye(4))
    cfg = _cfg(inner_steps=0)
    ctl = coefficients_controlled(model, cfg, 1.0, convention="paper_printed")
    theta = gen.standard_normal(2)
    v = (theta @ design.T - mean) @ design
    expected = -(2.0 * v + cfg.eta * (v @ design.T @ design))
    np.testing.assert_allclose(ctl.drift(theta), expected, rtol=1e-12)


def test_controlled_conventions_differ_with_inner_loop(linreg_model):
    cfg = _cfg(inner_steps=3)
    theta = np.array([0.9, -0.4])
    printed = coefficients_controlled(linreg_model, cfg, 0.5, convention="paper_printed")
    general = coefficients_controlled(
        linreg_model, cfg, 0.5, convention="general_formula"
    )
    assert not np.allclose(printed.b1(theta), general.b1(theta))
    np.testing.assert_allclose(printed.b0(theta), general.b0(theta), atol=1e-14)


# -- Euler-Maruyama --------------------------------------------------------------


def _deterministic_coeffs(rate=1.5, correction=0.5, eta=0.1, dim=1):
    zero = np.zeros((dim, dim))
    return SdeCoefficients(
        kind="test",
        eta=eta,
        b0=lambda theta: -rate * theta,
        b1=lambda theta: correction * theta,
        sigma=lambda theta: zero,
    )


def test_euler_maruyama_validates_arguments(quad_1d):
    coeffs = coefficients_adversarial(quad_1d, _cfg())
    with pytest.raises(ValueError, match="factory"):
        euler_maruyama(
            coeffs, np.ones(1), 1.0, 0.01, RngStream(65, (0,)), u_schedule=lambda t: 1.0
        )
    with pytest.raises(ValueError, match="dt"):
        euler_maruyama(coeffs, np.ones(1), 1.0, 0.0, RngStream(65, (1,)))
    with pytest.raises(ValueError, match="shorter"):
        euler_maruyama(coeffs, np.ones(1), 0.001, 0.01, RngStream(65, (2,)))


def test_euler_maruyama_single_deterministic_step():
    coeffs = _deterministic_coeffs()
    theta0 = np.array([2.0])
    final = euler_maruyama(coeffs, theta0, 0.01, 0.01, RngStream(66, (0,)))
    drift = -1.5 * 2.0 + 0.1 * 0.5 * 2.0
    np.testing.assert_allclose(final, theta0 + 0.01 * drift, rtol=1e-15)


def test_euler_maruyama_constant_path_without_forcing():
    coeffs = SdeCoefficients(
        kind="test",
        eta=0.1,
        b0=lambda theta: np.zeros_like(theta),
        b1=lambda theta: np.zeros_like(theta),
        sigma=lambda theta: np.zeros((2, 2)),
    )
    times, path = euler_maruyama(
        coeffs, np.array([1.0, -1.0]), 0.1, 0.01, RngStream(67, (0,)), store_every=2
    )
    np.testing.assert_array_equal(path, np.broadcast_to([1.0, -1.0], path.shape))
    assert times[0] == 0.0 and times[-1] == pytest.approx(0.1)


def test_euler_maruyama_halving_the_step_halves_the_error():
    coeffs = _deterministic_coeffs()
    exact = 2.0 * np.exp(-1.45)
    errors = []
    for dt in (0.01, 0.005):
        final = euler_maruyama(coeffs, np.array([2.0]), 1.0, dt, RngStream(68, (0,)))
        errors.append(abs(final[0] - exact))
    ratio = errors[0] / errors[1]
    assert 1.8 <= ratio <= 2.2


def test_euler_maruyama_weak_consistency_with_exact_loss_curve(quad_1d):
    cfg = _cfg()
    coeffs = coefficients_adversarial(quad_1d, cfg)
    start = np.ones((10_000, 1))
    final = euler_maruyama(
        coeffs, start, cfg.horizon, default_dt(cfg), RngStream(69, (0,))
    )
    g = 0.5 * final[:, 0] ** 2
    target = quad_expected_loss(quad_1d, cfg, np.ones(1), 1.0)
    stderr = g.std(ddof=1) / np.sqrt(g.size)
    assert abs(g.mean() - target) <= 3.0 * stderr + 0.1 * default_dt(cfg)


def test_euler_maruyama_u_schedule_uses_the_factory(quad_1d):
    cfg = _cfg()

    def factory(u):
        return coefficients_controlled(quad_1d, cfg, u, convention="general_formula")

    # A schedule pinned at zero freezes the state exactly.
    final = euler_maruyama(
        factory,
        np.array([1.0]),
        0.1,
        0.01,
        RngStream(70, (0,)),
        u_schedule=lambda t: 0.0,
    )
    np.testing.assert_array_equal(final, [1.0])


def test_path_to_csv_writes_states_and_monitor(tmp_path, quad_1d):
    times = np.array([0.0, 0.5, 1.0])
    path = np.array([[1.0, 2.0], [0.5, 1.0], [0.25, 0.5]])
    state_file = tmp_path / "path.csv"
    path_to_csv(times, path, state_file)
    with open(state_file, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["t", "theta_0", "theta_1"]
    assert [float(v) for v in rows[2]] == [0.5, 0.5, 1.0]

    monitor_file = tmp_path / "loss.csv"
    path_to_csv(
        times, path, monitor_file, monitor=lambda p: 0.5 * np.sum(p * p, axis=1)
    )
    with open(monitor_file, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["t", "monitored_loss"]
    assert float(rows[1][1]) == pytest.approx(2.5)


def test_path_to_csv_rejects_ensembles(tmp_path):
    with pytest.raises(ValueError, match="single path"):
        path_to_csv(np.array([0.0]), np.ones((1, 3, 2)), tmp_path / "bad.csv")


# -- exact Gaussian solution --------------------------------------------------------


def test_ou_solution_initial_condition(quad_model_2d):
    ou = OuSolution.from_model(quad_model_2d, _cfg())
    theta0 = np.array([0.7, -1.1])
    np.testing.assert_allclose(ou.mean(theta0, 0.0), theta0, rtol=1e-14)
    np.testing.assert_array_equal(ou.mode_variances(0.0), 0.0)


def test_ou_rate_map(quad_model_2d):
    cfg = _cfg()
    ou = OuSolution.from_model(quad_model_2d, cfg)
    np.testing.assert_allclose(sorted(ou.rates), [1.0, 2.0])
    np.testing.assert_allclose(
        ou.rates_hat, ou.rates + 0.55 * ou.rates**2, rtol=1e-14
    )


def test_ou_noiseless_limit_is_the_deterministic_flow(quad_model_2d):
    cfg = _cfg(batch_size=10**12)
    ou = OuSolution.from_model(quad_model_2d, cfg)
    theta0 = np.array([1.0, 1.0])
    samples = ou.sample(theta0, 0.8, RngStream(71, (0,)), 100)
    target = ou.mean(theta0, 0.8)
    assert np.abs(samples - target).max() <= 1e-5


def test_ou_long_time_variance_limit(quad_model_2d):
    ou = OuSolution.from_model(quad_model_2d, _cfg())
    np.testing.assert_allclose(
        ou.mode_variances(1e6),
        ou.rates**2 / (ou.beta * ou.rates_hat),
        rtol=1e-12,
    )


def test_ou_sample_covariance_matches_closed_form():
    model = QuadraticModel(np.array([[1.5, 0.4], [0.4, 0.8]]))
    cfg = _cfg()
    ou = OuSolution.from_model(model, cfg)
    theta0 = np.array([1.0, -1.0])
    t = 0.7
    samples = ou.sample(theta0, t, RngStream(72, (0,)), 100_000)
    coords = samples @ ou.basis
    target = ou.mode_variances(t)
    observed = coords.var(axis=0, ddof=1)
    np.testing.assert_allclose(observed, target, rtol=0.05)
    cross = np.cov(coords.T, ddof=1)[0, 1]
    assert abs(cross) <= 0.05 * np.sqrt(target[0] * target[1])


# -- expected-loss curves -------------------------------------------------------------


def test_quad_expected_loss_hand_value(quad_1d):
    value = quad_expected_loss(quad_1d, _cfg(), np.ones(1), 1.0)
    assert value == pytest.approx(0.023294722807751838, rel=1e-12)


def test_quad_expected_loss_sgd_hand_value(quad_1d):
    value = quad_expected_loss_sgd(quad_1d, _cfg(), np.ones(1), 1.0)
    assert value == pytest.approx(0.06874847251426058, rel=1e-12)


def test_expected_loss_curves_start_at_the_initial_loss(quad_model_2d):
    theta0 = np.array([0.6, -0.8])
    start = 0.5 * float(theta0 @ quad_model_2d.h @ theta0)
    assert quad_expected_loss(quad_model_2d, _cfg(), theta0, 0.0) == pytest.approx(start)
    assert quad_expected_loss_sgd(quad_model_2d, _cfg(), theta0, 0.0) == pytest.approx(
        start
    )


def test_adversarial_curve_sits_below_sgd(quad_1d):
    cfg = _cfg()
    times = np.linspace(0.1, 1.0, 10)
    adv = quad_expected_loss(quad_1d, cfg, np.ones(1), times)
    sgd = quad_expected_loss_sgd(quad_1d, cfg, np.ones(1), times)
    assert np.all(adv < sgd)


def test_stationary_loss_hand_value(quad_1d):
    value = quad_stationary_loss(quad_1d, _cfg())
    assert value == pytest.approx(1.0 / 1240.0, rel=1e-12)
    assert value == pytest.approx(0.0008064516129032258, rel=1e-12)


def test_expected_loss_converges_to_the_stationary_level(quad_model_2d):
    cfg = _cfg()
    late = quad_expected_loss(quad_model_2d, cfg, np.ones(2), 500.0)
    assert late == pytest.approx(quad_stationary_loss(quad_model_2d, cfg), rel=1e-12)


def test_sgd_noise_floor(quad_model_2d):
    cfg = _cfg()
    rates = np.linalg.eigvalsh(quad_model_2d.h)
    floor = float(np.sum(rates**2)) / (2.0 * cfg.beta)
    late = quad_expected_loss_sgd(quad_model_2d, cfg, np.ones(2), 500.0)
    assert late == pytest.approx(floor, rel=1e-12)


def test_curves_coincide_without_inner_loop_at_vanishing_rate(quad_model_2d):
    cfg = _cfg(inner_steps=0, eta=1e-11)
    times = np.linspace(0.0, 2.0, 9)
    adv = quad_expected_loss(quad_model_2d, cfg, np.ones(2), times)
    sgd = quad_expected_loss_sgd(quad_model_2d, cfg, np.ones(2), times)
    np.testing.assert_allclose(adv, sgd, atol=1e-10)


def test_stationary_empirical_mean_matches_formula(quad_model_2d):
    cfg = _cfg()
    ou = OuSolution.from_model(quad_model_2d, cfg)
    t = 20.0 / float(ou.rates.min())
    samples = ou.sample(np.full(2, 5.0), t, RngStream(73, (0,)), 200_000)
    g = 0.5 * np.einsum("ni,ij,nj->n", samples, quad_model_2d.h, samples)
    stderr = g.std(ddof=1) / np.sqrt(g.size)
    assert abs(g.mean() - ou.stationary_loss()) <= 3.0 * stderr


# -- one-step moments of the limit -----------------------------------------------------


def test_sde_one_step_exact_first_moment(quad_model_2d):
    cfg = _cfg()
    theta0 = np.array([1.0, -0.5])
    pair = sde_one_step_moments(quad_model_2d, cfg, theta0)
    ou = OuSolution.from_model(quad_model_2d, cfg)
    np.testing.assert_allclose(pair.first, ou.mean(theta0, cfg.eta) - theta0, atol=1e-15)
    rates, basis = np.linalg.eigh(quad_model_2d.h)
    rates_hat = rates + 0.55 * rates**2
    manual = ((theta0 @ basis) * np.expm1(-rates_hat * cfg.eta)) @ basis.T
    np.testing.assert_allclose(pair.first, manual, rtol=1e-12)
    assert pair.provenance == "sde_exact"


def test_sde_one_step_mode_validation(quad_model_2d):
    with pytest.raises(ValueError, match="mode"):
        sde_one_step_moments(quad_model_2d, _cfg(), np.ones(2), mode="em")
    with pytest.raises(ValueError, match="stream"):
        sde_one_step_moments(quad_model_2d, _cfg(), np.ones(2), mode="mc")


def test_sde_one_step_mc_matches_exact(quad_model_2d):
    cfg = _cfg()
    theta0 = np.array([1.0, -0.5])
    exact = sde_one_step_moments(quad_model_2d, cfg, theta0)
    mc = sde_one_step_moments(
        quad_model_2d,
        cfg,
        theta0,
        mode="mc",
        n_paths=20_000,
        stream=RngStream(74, (0,)),
    )
    assert np.all(np.abs(mc.first - exact.first) <= 4.0 * mc.first_stderr + 1e-4)
    assert np.all(np.abs(mc.second - exact.second) <= 4.0 * mc.second_stderr + 1e-4)


def test_sde_moments_match_discrete_analytic_to_third_order(quad_model_2d):
    theta0 = np.array([1.0, -0.5])
    first_gaps, second_gaps = [], []
    for eta in ETA_GRID:
        cfg = _cfg(eta=eta, batch_size=8, inner_steps=3)
        sde_pair = sde_one_step_moments(quad_model_2d, cfg, theta0)
        discrete = one_step_moments_analytic(quad_model_2d, cfg, theta0)
        first_gaps.append(np.abs(sde_pair.first - discrete.first).max())
        second_gaps.append(np.abs(sde_pair.second - discrete.second).max())
    for gaps in (first_gaps, second_gaps):
        fit = loglog_fit(np.array(ETA_GRID), np.array(gaps))
        assert fit.slope >= 2.7


# -- scalar loss ODE ----------------------------------------------------------------


def test_loss_ode_params_validation():
    with pytest.raises(ValueError, match="alpha"):
        LossOdeParams(alpha=0.0, noise_trace=1.0, inner_steps=0, eta=0.1, beta=10.0)
    with pytest.raises(ValueError, match="noise_trace"):
        LossOdeParams(alpha=1.0, noise_trace=-1.0, inner_steps=0, eta=0.1, beta=10.0)
    with pytest.raises(ValueError, match="inner_steps"):
        LossOdeParams(alpha=1.0, noise_trace=1.0, inner_steps=-1, eta=0.1, beta=10.0)


def test_loss_ode_rhs_hand_value():
    params = LossOdeParams(alpha=1.0, noise_trace=1.0, inner_steps=0, eta=0.0, beta=100.0)
    assert loss_ode_rhs(params, 1.0, 1.0) == pytest.approx(-3.92, rel=1e-14)


def test_loss_ode_frozen_without_control():
    params = LossOdeParams(alpha=2.0, noise_trace=0.5, inner_steps=3, eta=0.05, beta=80.0)
    times, losses, factors = loss_ode_integrate(params, 1.3, 0.0, 1.0, dt=0.01)
    np.testing.assert_array_equal(losses, 1.3)
    np.testing.assert_array_equal(factors, 0.0)
    assert times[-1] == pytest.approx(1.0)


def test_loss_ode_rejects_negative_start():
    params = LossOdeParams(alpha=1.0, noise_trace=1.0, inner_steps=0, eta=0.1, beta=10.0)
    with pytest.raises(ValueError, match="initial loss"):
        loss_ode_integrate(params, -0.1, 1.0, 1.0)


def test_loss_ode_matches_linear_closed_form():
    params = LossOdeParams(alpha=1.5, noise_trace=0.8, inner_steps=2, eta=0.05, beta=60.0)
    u = 0.7
    contraction = 2.0 * (
        (2.0 + 4.0 * params.inner_steps * params.eta) * params.alpha * u
        + params.eta * params.alpha**2 * u**2
    )
    injection = 8.0 * params.alpha**2 * params.noise_trace / params.beta * u**2
    s0 = 2.0
    level = injection / contraction
    _, losses, factors = loss_ode_integrate(params, s0, u, 1.0, dt=1e-3)
    exact = level + (s0 - level) * np.exp(-contraction)
    assert losses[-1] == pytest.approx(exact, rel=1e-8)
    np.testing.assert_array_equal(factors, u)


def test_loss_ode_feedback_receives_time_and_state():
    params = LossOdeParams(alpha=1.0, noise_trace=1.0, inner_steps=0, eta=0.0, beta=100.0)
    seen = []

    def policy(t, s):
        seen.append((t, s))
        return 1.0 if s > 0.5 else 0.0

    _, losses, factors = loss_ode_integrate(params, 1.0, policy, 2.0, dt=0.01)
    assert losses[0] > 0.5 >= losses[-1]
    assert factors[0] == 1.0 and factors[-2] == 0.0
    assert seen[0][0] == 0.0
