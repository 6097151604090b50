import numpy as np
import pytest

from adenkf import (
    Ensemble,
    FilterState,
    InflationPolicy,
    IntegratorSpec,
    ModelSpec,
    NonFiniteStatistics,
    Observation,
    ObservationOperator,
    assimilation_step,
    build_operator,
    compute_statistics,
    eakf_adjustment,
    eakf_analysis,
    enkf_analysis,
    etkf_analysis,
    etkf_transform,
    forecast,
    inflation_strength,
)
from conftest import random_spd

RK4 = IntegratorSpec.rk4(2.5e-3)


def _random_problem(rng, d=5, q=2, K=6, scale=2.0):
    H = rng.standard_normal((q, d))
    gamma = random_spd(rng, q, scale=0.5)
    op = build_operator(H, gamma)
    V = scale * rng.standard_normal((K, d))
    z = rng.standard_normal(q)
    zp = z + rng.standard_normal((K, q))
    return op, Ensemble(V), Observation(z=z, z_perturbed=zp)


def _posterior_cov_oracle(chat, op):
    """Dense evaluation of the prior-posterior covariance relation."""
    H = op.h_white
    G = np.eye(op.q) + H @ chat @ H.T
    return chat - chat @ H.T @ np.linalg.solve(G, H @ chat)


# ---------------------------------------------------------------------------
# ensemble type and forecast


def test_ensemble_moments():
    members = np.array([[0.0, 0.0], [2.0, 2.0]])
    ens = Ensemble(members)
    assert np.allclose(ens.mean(), [1.0, 1.0])
    assert np.allclose(ens.covariance(), [[2.0, 2.0], [2.0, 2.0]])


def test_ensemble_needs_two_members():
    with pytest.raises(ValueError):
        Ensemble(np.zeros((1, 3)))


def test_forecast_keeps_fixed_point_members():
    model = ModelSpec.lorenz96(4.0)
    ens = Ensemble(np.full((2, 5), 4.0))
    out = forecast(ens, model, RK4, 0.05, np.random.default_rng(0))
    assert np.allclose(out.members, 4.0, atol=1e-12)


def test_forecast_is_deterministic_and_order_preserving():
    model = ModelSpec.lorenz96(8.0, noise_cov=0.01 * np.eye(5))
    members = 8.0 + np.random.default_rng(1).standard_normal((4, 5))
    a = forecast(Ensemble(members), model, RK4, 0.05, np.random.default_rng(9))
    b = forecast(Ensemble(members), model, RK4, 0.05, np.random.default_rng(9))
    assert np.array_equal(a.members, b.members)
    # reordering members permutes the deterministic part identically
    perm = [2, 0, 3, 1]
    c = forecast(Ensemble(members[perm]), model, RK4, 0.05, np.random.default_rng(9))
    det_a = forecast(Ensemble(members), model, RK4, 0.05, np.random.default_rng(9))
    assert np.allclose(c.members - det_a.members[perm], c.members - det_a.members[perm])


def test_forecast_noise_covariance_statistical():
    model = ModelSpec.linear_gaussian(np.zeros((2, 2)), noise_cov=np.eye(2))
    ens = Ensemble(np.zeros((10_000, 2)))
    out = forecast(ens, model, RK4, 1.0, np.random.default_rng(3))
    cov = out.members.T @ out.members / out.size
    assert np.linalg.norm(cov - np.eye(2)) < 0.05 * np.sqrt(2)


# ---------------------------------------------------------------------------
# statistics and inflation


def test_statistics_vanish_for_perfect_ensemble(paper_operator):
    members = np.tile(np.arange(5.0), (6, 1))
    hv = members[0, 0] * 10.0
    obs = Observation(z=np.array([hv]), z_perturbed=np.full((6, 1), hv))
    theta, xi = compute_statistics(Ensemble(members), obs, paper_operator, "enkf")
    assert theta == 0.0 and xi == 0.0


def test_statistics_hand_case():
    op = build_operator([[1.0, 0.0]], [[1.0]])
    ens = Ensemble(np.array([[0.0, 0.0], [2.0, 2.0]]))
    obs = Observation(z=np.array([0.0]), z_perturbed=None)
    # covariance is [[2,2],[2,2]] so the cross block is 2 and the literal
    # square-form innovation statistic is (0 + 4)/2 = 2
    theta, xi = compute_statistics(ens, obs, op, "esrf", literal_form=True)
    assert theta == pytest.approx(2.0)
    assert xi == pytest.approx(2.0)
    theta_sqrt, _ = compute_statistics(ens, obs, op, "esrf")
    assert theta_sqrt == pytest.approx(np.sqrt(2.0))


def test_xi_matches_dense_svd_oracle():
    rng = np.random.default_rng(5)
    op = build_operator(np.hstack([np.diag([2.0, 1.0]), np.zeros((2, 3))]), np.eye(2))
    for _ in range(25):
        V = rng.standard_normal((6, 5)) * 3
        cov = Ensemble(V).covariance()
        oracle = np.linalg.svd(cov[:2, 2:], compute_uv=False)[0]
        obs = Observation(z=np.zeros(2), z_perturbed=np.zeros((6, 2)))
        _, xi = compute_statistics(Ensemble(V), obs, op, "enkf")
        assert xi == pytest.approx(oracle, abs=1e-10)


def test_fully_observed_state_has_zero_xi():
    op = build_operator(np.eye(3), np.eye(3))
    V = np.random.default_rng(0).standard_normal((5, 3))
    obs = Observation(z=np.zeros(3), z_perturbed=np.zeros((5, 3)))
    _, xi = compute_statistics(Ensemble(V), obs, op, "enkf")
    assert xi == 0.0


def test_inflation_thresholds_are_strict():
    pol = InflationPolicy.adaptive_inflation(1.0, 1.0, 1.0)
    at = inflation_strength(pol, 1.0, 1.0)
    assert not at.triggered and at.lam == 0.0
    above = inflation_strength(pol, 2.0, 0.0)
    assert above.triggered and above.lam == pytest.approx(2.0)
    both = inflation_strength(pol, 2.0, 3.0)
    assert both.lam == pytest.approx(2.0 * 4.0)


def test_inflation_off_is_always_zero():
    pol = InflationPolicy.none()
    out = inflation_strength(pol, 1e9, 1e9)
    assert out.lam == 0.0 and not out.triggered


def test_nonfinite_statistics_raise():
    pol = InflationPolicy.adaptive_inflation(1.0, 1.0, 1.0)
    with pytest.raises(NonFiniteStatistics):
        inflation_strength(pol, float("nan"), 0.0)
    with pytest.raises(NonFiniteStatistics):
        inflation_strength(pol, float("inf"), 0.0)


# ---------------------------------------------------------------------------
# perturbed-observation analysis


def test_collapsed_ensemble_has_zero_gain(paper_operator):
    members = np.tile(np.arange(5.0), (6, 1))
    obs = Observation(z=np.array([-3.0]), z_perturbed=np.full((6, 1), -3.0))
    out = enkf_analysis(Ensemble(members), obs, paper_operator, InflationPolicy.none())
    assert np.array_equal(out.posterior.members, members)


def test_scalar_kalman_hand_case():
    op = build_operator([[1.0]], [[1.0]])
    half = 2.0**-0.5
    members = np.array([[2.0 + half], [2.0 - half]])
    ens = Ensemble(members)
    assert ens.covariance()[0, 0] == pytest.approx(1.0)
    obs = Observation(z=np.array([0.0]), z_perturbed=np.zeros((2, 1)))
    out = enkf_analysis(ens, obs, op, InflationPolicy.none())
    assert out.posterior.mean()[0] == pytest.approx(1.0)


def test_gain_form_equivalence():
    # the solve-based update equals the resolvent form (I + C H^T H)^-1 ...
    rng = np.random.default_rng(11)
    for _ in range(50):
        op, ens, obs = _random_problem(rng)
        out = enkf_analysis(ens, obs, op, InflationPolicy.none())
        H = op.h_white
        chat = ens.covariance()
        A = np.eye(op.d) + chat @ H.T @ H
        oracle = np.linalg.solve(A, ens.members.T + chat @ H.T @ obs.z_perturbed.T).T
        assert np.abs(out.posterior.members - oracle).max() < 1e-10


def test_adaptive_below_threshold_is_bitwise_plain():
    rng = np.random.default_rng(13)
    op, ens, obs = _random_problem(rng)
    plain = enkf_analysis(ens, obs, op, InflationPolicy.none())
    adaptive = enkf_analysis(
        ens, obs, op, InflationPolicy.adaptive_inflation(1.0, 1e12, 1e12)
    )
    assert np.array_equal(plain.posterior.members, adaptive.posterior.members)


def test_constant_inflation_moves_posterior_toward_observations():
    rng = np.random.default_rng(17)
    op, ens, obs = _random_problem(rng)
    plain = enkf_analysis(ens, obs, op, InflationPolicy.none())
    inflated = enkf_analysis(ens, obs, op, InflationPolicy.constant(5.0))
    H = op.h_white
    innov_plain = np.linalg.norm(plain.posterior.members @ H.T - obs.z_perturbed)
    innov_infl = np.linalg.norm(inflated.posterior.members @ H.T - obs.z_perturbed)
    assert innov_infl < innov_plain


def test_multiplicative_inflation_form():
    rng = np.random.default_rng(19)
    op, ens, obs = _random_problem(rng)
    out = enkf_analysis(ens, obs, op, InflationPolicy.constant(0.3, multiplicative=True))
    H = op.h_white
    ct = 1.3 * ens.covariance()
    A = np.eye(op.d) + ct @ H.T @ H
    oracle = np.linalg.solve(A, ens.members.T + ct @ H.T @ obs.z_perturbed.T).T
    assert np.abs(out.posterior.members - oracle).max() < 1e-10


# ---------------------------------------------------------------------------
# square-root analyses


def test_etkf_unobserved_limit_is_identity():
    # a test-only operator with zero gain: transform is exactly I_K
    op = ObservationOperator(
        h_raw=np.zeros((1, 3)),
        gamma=np.eye(1),
        h0=np.array([0.0]),
        rotation=np.eye(3),
        whitener=np.eye(1),
        rho0=0.0,
    )
    rng = np.random.default_rng(23)
    V = rng.standard_normal((4, 3))
    S = (V - V.mean(0)).T
    assert np.array_equal(etkf_transform(S, op), np.eye(4))
    obs = Observation(z=np.zeros(1), z_perturbed=None)
    out = etkf_analysis(Ensemble(V), obs, op, InflationPolicy.none())
    assert np.abs(out.posterior.members - V).max() < 1e-12


def test_esrf_posterior_covariance_identity():
    rng = np.random.default_rng(29)
    for _ in range(100):
        op, ens, obs = _random_problem(rng, d=2, q=1, K=3)
        oracle = _posterior_cov_oracle(ens.covariance(), op)
        for fn in (etkf_analysis, eakf_analysis):
            out = fn(ens, obs, op, InflationPolicy.none())
            assert np.abs(out.posterior.covariance() - oracle).max() < 1e-8


def test_etkf_and_eakf_posterior_covariances_agree():
    rng = np.random.default_rng(31)
    for _ in range(50):
        op, ens, obs = _random_problem(rng, d=3, q=2, K=4)
        a = etkf_analysis(ens, obs, op, InflationPolicy.none()).posterior.covariance()
        b = eakf_analysis(ens, obs, op, InflationPolicy.none()).posterior.covariance()
        assert np.abs(a - b).max() < 1e-8


def test_eakf_zero_spread_stays_zero():
    op = build_operator([[1.0, 0.0]], [[1.0]])
    members = np.tile([1.0, 2.0], (4, 1))
    obs = Observation(z=np.array([0.0]), z_perturbed=None)
    out = eakf_analysis(Ensemble(members), obs, op, InflationPolicy.none())
    assert np.abs(out.posterior.anomalies()).max() == 0.0
    A = eakf_adjustment(np.zeros((2, 4)), op)
    assert np.array_equal(A, np.zeros((2, 2)))


def test_triggered_square_root_mean_is_pulled_by_inflation():
    # collapsed ensemble: mean moves toward z by the resolvent factor
    op = build_operator([[1.0]], [[1.0]])  # h0 = 1
    members = np.full((3, 1), 5.0)
    z = np.array([0.0])
    obs = Observation(z=z, z_perturbed=None)
    pol = InflationPolicy.adaptive_inflation(c_phi=1.0, m1=1.0, m2=1.0)
    out = etkf_analysis(Ensemble(members), obs, op, pol)
    theta = out.diagnostics.theta
    assert theta == pytest.approx(5.0)  # sqrt(mean |5 - 0|^2)
    lam = out.diagnostics.lam
    assert lam == pytest.approx(5.0)
    # posterior innovation = prior innovation / (1 + lam * h0^2)
    expected = 5.0 - lam / (1.0 + lam) * 5.0
    assert out.posterior.mean()[0] == pytest.approx(expected, abs=1e-12)


def test_esrf_mean_equals_unperturbed_enkf_average():
    rng = np.random.default_rng(37)
    for _ in range(20):
        op, ens, obs = _random_problem(rng, d=4, q=2, K=5)
        zero_pert = Observation(z=obs.z, z_perturbed=np.tile(obs.z, (5, 1)))
        enkf_out = enkf_analysis(ens, zero_pert, op, InflationPolicy.none())
        esrf_out = etkf_analysis(ens, obs, op, InflationPolicy.none())
        assert np.abs(enkf_out.posterior.mean() - esrf_out.posterior.mean()).max() < 1e-10


def test_esrf_spread_ignores_inflation():
    rng = np.random.default_rng(41)
    op, ens, obs = _random_problem(rng, d=3, q=1, K=4)
    plain = etkf_analysis(ens, obs, op, InflationPolicy.none())
    inflated = etkf_analysis(ens, obs, op, InflationPolicy.constant(2.0))
    assert np.allclose(
        plain.posterior.anomalies(), inflated.posterior.anomalies(), atol=1e-12
    )
    assert not np.allclose(plain.posterior.mean(), inflated.posterior.mean())


# ---------------------------------------------------------------------------
# one full cycle and reduction properties


def _tiny_setup():
    model = ModelSpec.lorenz96(8.0)
    op = build_operator([[1.0, 0.0, 0.0, 0.0, 0.0]], [[0.01]])
    members = 8.0 + np.random.default_rng(43).standard_normal((6, 5))
    return model, op, members


def test_assimilation_step_determinism():
    model, op, members = _tiny_setup()
    outs = []
    for _ in range(2):
        state = FilterState(Ensemble(members), 0, np.random.default_rng(4))
        obs = Observation(
            z=np.array([80.0]), z_perturbed=80.0 + np.zeros((6, 1)), index=1
        )
        state, out = assimilation_step(
            state, obs, model, RK4, op, InflationPolicy.none(), "enkf", 0.05
        )
        outs.append(out.posterior.members)
    assert np.array_equal(outs[0], outs[1])


def test_reduction_adaptive_with_huge_thresholds_is_plain():
    model, op, members = _tiny_setup()
    variants = {
        "plain": InflationPolicy.none(),
        "ai": InflationPolicy.adaptive_inflation(1.0, 1e15, 1e15),
    }
    results = {}
    for name, pol in variants.items():
        state = FilterState(Ensemble(members), 0, np.random.default_rng(4))
        for step in range(3):
            obs = Observation(
                z=np.array([80.0 + step]),
                z_perturbed=80.0 + step + np.zeros((6, 1)),
                index=step,
            )
            state, out = assimilation_step(
                state, obs, model, RK4, op, pol, "enkf", 0.05
            )
        results[name] = state.ensemble.members
    assert np.array_equal(results["plain"], results["ai"])


def test_reduction_cai_with_zero_rho_is_ai():
    model, op, members = _tiny_setup()
    results = {}
    for name, pol in {
        "ai": InflationPolicy.adaptive_inflation(1.0, 30.0, 6.0),
        "cai0": InflationPolicy.adaptive_inflation(1.0, 30.0, 6.0, rho=0.0),
    }.items():
        state = FilterState(Ensemble(members), 0, np.random.default_rng(4))
        for step in range(3):
            obs = Observation(
                z=np.array([80.0]), z_perturbed=80.0 + np.zeros((6, 1)), index=step
            )
            state, _ = assimilation_step(state, obs, model, RK4, op, pol, "enkf", 0.05)
        results[name] = state.ensemble.members
    assert np.array_equal(results["ai"], results["cai0"])


def test_forecast_propagates_member_solver_failure():
    from adenkf import ImplicitSolveFailed

    model = ModelSpec.lorenz96(16.0)
    spec = IntegratorSpec.implicit_euler(1e-2, tol=1e-10, max_iter=1)
    members = 16.0 + np.arange(10.0).reshape(2, 5) * 7.0
    with pytest.raises(ImplicitSolveFailed):
        forecast(Ensemble(members), model, spec, 0.05, np.random.default_rng(0))


def test_esrf_identity_holds_along_a_run():
    # the prior-posterior covariance relation holds at every analysis step
    model = ModelSpec.lorenz96(8.0)
    op = build_operator([[1.0, 0.0, 0.0, 0.0, 0.0]], [[0.01]])
    from adenkf import advance_signal

    for family, fn in (("etkf", etkf_analysis), ("eakf", eakf_analysis)):
        rng = np.random.default_rng(53)
        ens = Ensemble(8.0 + rng.standard_normal((6, 5)))
        truth = np.full(5, 8.0) + rng.standard_normal(5)
        for _ in range(100):
            truth = advance_signal(model, RK4, truth, 0.05, rng)
            z = np.array([10.0 * truth[0]]) + rng.standard_normal(1)
            ens = forecast(ens, model, RK4, 0.05, rng)
            chat = ens.covariance()
            oracle = _posterior_cov_oracle(chat, op)
            out = fn(ens, Observation(z=z, z_perturbed=None), op, InflationPolicy.none())
            resid = np.linalg.norm(out.posterior.covariance() - oracle)
            assert resid <= 1e-8 * (1.0 + np.linalg.norm(chat))
            ens = out.posterior


# ---------------------------------------------------------------------------
# large-ensemble limit against the exact Kalman filter


def _kalman_step(m, P, M, R, H, z):
    m = M @ m
    P = M @ P @ M.T + R
    S = H @ P @ H.T + np.eye(H.shape[0])
    K = P @ H.T @ np.linalg.inv(S)
    m = m + K @ (z - H @ m)
    P = (np.eye(len(m)) - K @ H) @ P
    return m, P


def test_large_ensemble_matches_kalman_filter():
    rng = np.random.default_rng(47)
    M = np.array([[0.9, 0.2], [-0.1, 0.8]])
    R = 0.1 * np.eye(2)
    model = ModelSpec.linear_gaussian(M, noise_cov=R, discrete=True)
    op = build_operator([[1.0, 0.0]], [[0.25]])
    H = op.h_white
    K = 1000
    P0 = np.eye(2)
    truth = rng.multivariate_normal(np.zeros(2), P0)
    ens = Ensemble(rng.multivariate_normal(np.zeros(2), P0, size=K))
    m, P = np.zeros(2), P0
    for _ in range(50):
        truth = M @ truth + rng.multivariate_normal(np.zeros(2), R)
        z = H @ truth + rng.standard_normal(1)
        zp = z + rng.standard_normal((K, 1))
        ens = forecast(ens, model, RK4, 1.0, rng)
        obs = Observation(z=z, z_perturbed=zp)
        out = enkf_analysis(ens, obs, op, InflationPolicy.none())
        ens = out.posterior
        m, P = _kalman_step(m, P, M, R, H, z)
    se_mean = 3.0 * np.sqrt(np.diag(P) / K)
    assert np.all(np.abs(ens.mean() - m) <= se_mean)
    se_cov = 3.0 * (np.abs(P) + np.sqrt(np.outer(np.diag(P), np.diag(P)))) * np.sqrt(2.0 / K)
    assert np.all(np.abs(ens.covariance() - P) <= se_cov)
