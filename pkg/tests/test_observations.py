import numpy as np
import pytest

from adenkf import (
    Observation,
    SingularGamma,
    build_operator,
    observe,
)
from conftest import ZeroRng, random_spd


def test_identity_problem_is_already_canonical():
    op = build_operator(np.eye(5), np.eye(5))
    assert np.allclose(op.h0, np.ones(5))
    assert np.allclose(op.rotation, np.eye(5))
    assert op.rho0 == pytest.approx(1.0)
    assert op.q == 5


def test_single_component_observation_whitens_to_ten(paper_operator):
    # noise std 0.1 turns a unit-gain observation into gain 10
    op = paper_operator
    assert np.allclose(op.h0, [10.0])
    assert op.rho0 == pytest.approx(100.0)
    assert np.allclose(op.rotation, np.eye(5))
    assert op.q == 1 and op.d == 5
    assert op.norm == pytest.approx(10.0)


def test_whitening_round_trip_and_noise_covariance():
    rng = np.random.default_rng(0)
    H = rng.standard_normal((3, 5))
    gamma = random_spd(rng, 3)
    op = build_operator(H, gamma)
    # reconstruct the raw operator from the canonical pieces
    H_rec = op.unwhiten_obs(op.h_white.T).T @ op.rotation.T
    assert np.abs(H_rec - H).max() < 1e-12
    gamma_rec = np.linalg.pinv(op.whitener) @ np.linalg.pinv(op.whitener).T
    assert np.abs(gamma_rec - gamma).max() < 1e-12
    # whitened raw noise has identity covariance
    draws = rng.multivariate_normal(np.zeros(3), gamma, size=100_000)
    white = op.whiten_obs(draws)
    cov = white.T @ white / white.shape[0]
    assert np.linalg.norm(cov - np.eye(3)) < 0.05 * np.sqrt(3)


def test_rank_deficient_rows_are_dropped():
    H = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])  # rank 1
    op = build_operator(H, np.eye(2))
    assert op.q == 1
    assert op.h0[0] == pytest.approx(np.sqrt(5.0))


def test_singular_gamma_rejected():
    with pytest.raises(SingularGamma):
        build_operator(np.eye(2), np.diag([1.0, 0.0]))


def test_observe_without_noise(paper_operator):
    truth = np.zeros(5)
    truth[0] = 1.0
    obs = observe(paper_operator, truth, 6, perturb=False, rng=ZeroRng())
    assert np.allclose(obs.z, [10.0])
    assert obs.z_perturbed is None


def test_observe_identity_case_with_stubbed_noise():
    op = build_operator(np.eye(3), np.eye(3))
    obs = observe(op, np.zeros(3), 2, perturb=False, rng=ZeroRng(fixed=[1.0, 0.0, 0.0]))
    assert np.allclose(obs.z, [1.0, 0.0, 0.0])


def test_perturbed_copies_center_on_the_observation(paper_operator):
    rng = np.random.default_rng(1)
    truth = np.zeros(5)
    obs = observe(paper_operator, truth, 6, perturb=True, rng=rng)
    assert obs.z_perturbed.shape == (6, 1)
    assert len(np.unique(obs.z_perturbed)) == 6
    # statistical oracle: mean of many perturbations within 3 sigma of z
    n = 100_000
    pert = obs.z + rng.standard_normal((n, 1))
    assert abs(pert.mean() - obs.z[0]) < 3.0 / np.sqrt(n)


def test_filtering_equivalence_through_the_rotation():
    """Running the filter on a raw (H, Gamma) problem via the whitened frame
    equals running it on the pre-whitened problem, step by step."""
    from adenkf import Ensemble, InflationPolicy, enkf_analysis

    rng = np.random.default_rng(7)
    d, q, K = 4, 2, 5
    H = rng.standard_normal((q, d))
    gamma = random_spd(rng, q, scale=0.5)
    op_raw = build_operator(H, gamma)
    # the equivalent pre-whitened problem
    op_white = build_operator(op_raw.h_white, np.eye(q))
    assert np.allclose(op_white.h0, op_raw.h0, atol=1e-12)
    assert np.allclose(op_white.rotation, np.eye(d), atol=1e-12)

    members_raw = rng.standard_normal((K, d))
    members_white = op_raw.rotate(members_raw)
    policy = InflationPolicy.constant(0.05)
    for step in range(5):
        z = rng.standard_normal(q)
        zp = z + rng.standard_normal((K, q))
        obs = Observation(z=z, z_perturbed=zp, index=step)
        out_raw = enkf_analysis(Ensemble(op_raw.rotate(members_raw)), obs, op_raw, policy)
        out_white = enkf_analysis(Ensemble(members_white), obs, op_white, policy)
        members_raw = op_raw.unrotate(out_raw.posterior.members)
        members_white = out_white.posterior.members
        assert np.abs(op_raw.rotate(members_raw) - members_white).max() < 1e-10
