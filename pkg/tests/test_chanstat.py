"""Channel estimation and statistics checks against closed forms."""

import numpy as np
import pytest

from cfhybrid.chanstat import (
    cb_precoder,
    compute_psi,
    estimate_statistics,
    mmse_estimate,
    norm_constants,
    sample_true_channels,
)
from cfhybrid.errors import DegenerateLinkError
from cfhybrid.netgen import (
    PilotAssignment,
    SpatialModel,
    SystemConfig,
    Topology,
    build_spatial_model,
    build_topology,
    local_scattering_covariance,
)


def small_config(**kw):
    base = dict(M=3, K=4, N=2, serving_set_size=2, tau_c=200, tau_p=2,
                area_m=300.0, mc_trials=4000, seed=3)
    base.update(kw)
    return SystemConfig(**base)


def scenario(cfg, seed=11):
    topo = build_topology(cfg, seed=seed)
    spatial = build_spatial_model(topo, cfg)
    pilots = PilotAssignment(
        pilot_index=np.arange(cfg.K) % cfg.tau_p, tau_p=cfg.tau_p)
    return topo, spatial, pilots


# --- channel sampling --------------------------------------------------------

def test_scalar_channel_variance_matches_gain():
    beta = 3.7e-10
    spatial = SpatialModel(covariances=np.full((1, 1, 1, 1), beta, dtype=complex))
    draws = np.array([sample_true_channels(spatial, ts).h[0, 0, 0]
                      for ts in range(10000)])
    assert np.abs(draws.mean()) < 5 * np.sqrt(beta / 10000)
    assert np.var(draws) == pytest.approx(beta, rel=0.05)


def test_sample_covariance_matches_spatial_model():
    r = local_scattering_covariance(1.0, 0.4, 20.0, 3)
    spatial = SpatialModel(covariances=r[None, None])
    acc = np.zeros((3, 3), dtype=complex)
    trials = 5000
    for ts in range(trials):
        h = sample_true_channels(spatial, ts).h[0, 0]
        acc += np.outer(h, h.conj())
    emp = acc / trials
    assert np.linalg.norm(emp - r) / np.linalg.norm(r) < 0.1


def test_channel_sampling_deterministic_per_seed():
    cfg = small_config()
    _, spatial, _ = scenario(cfg)
    a = sample_true_channels(spatial, 5).h
    b = sample_true_channels(spatial, 5).h
    c = sample_true_channels(spatial, 6).h
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# --- MMSE estimation ---------------------------------------------------------

def test_psi_accumulates_cohort_covariances():
    cfg = small_config()
    topo, spatial, pilots = scenario(cfg)
    psi = compute_psi(spatial, pilots, cfg)
    t = pilots.pilot_index[0]
    cohort = pilots.cohort(0)
    expected = cfg.tau_p * cfg.pilot_power_W * spatial.covariances[:, cohort].sum(axis=1) \
        + cfg.sigma2_W * np.eye(cfg.N)
    assert np.allclose(psi[:, t], expected)


def test_estimate_approaches_truth_without_noise():
    # full-rank covariance, singleton cohort, vanishing noise
    cfg = small_config(K=2, tau_p=2, noise_figure_dB=-120.0)
    r = local_scattering_covariance(1e-9, 0.2, 30.0, 2)
    spatial = SpatialModel(covariances=np.stack([r, r])[None].repeat(3, axis=0)
                           .reshape(3, 2, 2, 2))
    pilots = PilotAssignment(pilot_index=np.array([0, 1]), tau_p=2)
    real = sample_true_channels(spatial, 9)
    h_hat = mmse_estimate(real, spatial, pilots, cfg, trial_seed=9)
    assert np.allclose(h_hat, real.h, rtol=1e-4, atol=1e-9)


def test_copilot_ues_with_identical_covariance_share_the_estimate():
    cfg = small_config(K=2, tau_p=1)
    r = local_scattering_covariance(2e-10, -0.7, 15.0, 2)
    spatial = SpatialModel(covariances=np.broadcast_to(r, (1, 2, 2, 2)).copy())
    pilots = PilotAssignment(pilot_index=np.array([0, 0]), tau_p=1)
    real = sample_true_channels(spatial, 31)
    h_hat = mmse_estimate(real, spatial, pilots, cfg, trial_seed=31)
    assert not np.allclose(real.h[0, 0], real.h[0, 1])   # true channels differ
    assert np.array_equal(h_hat[0, 0], h_hat[0, 1])      # estimates coincide


def test_estimate_sample_covariance_matches_closed_form():
    cfg = small_config(K=2, tau_p=1, mc_trials=1)
    r = local_scattering_covariance(4e-10, 0.9, 10.0, 2)
    spatial = SpatialModel(covariances=np.stack(
        [r, 0.5 * r])[None])                              # (1, 2, 2, 2), shared pilot
    pilots = PilotAssignment(pilot_index=np.array([0, 0]), tau_p=1)
    psi_inv = np.linalg.inv(compute_psi(spatial, pilots, cfg))[0, 0]
    r0 = spatial.covariances[0, 0]
    expected = cfg.pilot_power_W * cfg.tau_p * r0 @ psi_inv @ r0

    acc = np.zeros((2, 2), dtype=complex)
    trials = 6000
    for ts in range(trials):
        real = sample_true_channels(spatial, ts)
        h_hat = mmse_estimate(real, spatial, pilots, cfg, trial_seed=ts)
        acc += np.outer(h_hat[0, 0], h_hat[0, 0].conj())
    emp = acc / trials
    assert np.linalg.norm(emp - expected) / np.linalg.norm(expected) < 0.1


def test_norm_constant_scalar_closed_form():
    beta, p, tau_p = 5e-10, 0.1, 4
    cfg = small_config(M=1, K=1, N=1, serving_set_size=1, tau_p=tau_p,
                       pilot_power_W=p)
    spatial = SpatialModel(covariances=np.full((1, 1, 1, 1), beta, dtype=complex))
    pilots = PilotAssignment(pilot_index=np.array([0]), tau_p=tau_p)
    nc = norm_constants(spatial, pilots, cfg)
    expected = p * tau_p * beta ** 2 / (tau_p * p * beta + cfg.sigma2_W)
    assert nc[0, 0] == pytest.approx(expected, rel=1e-12)


# --- precoder ----------------------------------------------------------------

def test_precoder_zero_off_serving_and_unit_mean_energy():
    cfg = small_config()
    topo, spatial, pilots = scenario(cfg)
    nc = norm_constants(spatial, pilots, cfg)
    energy = np.zeros((cfg.M, cfg.K))
    trials = 2000
    for ts in range(trials):
        real = sample_true_channels(spatial, ts)
        h_hat = mmse_estimate(real, spatial, pilots, cfg, trial_seed=ts)
        w = cb_precoder(h_hat, topo, nc)
        assert np.all(w[~topo.serving_mask] == 0)
        energy += np.sum(np.abs(w) ** 2, axis=-1)
    mean_energy = energy / trials
    assert np.allclose(mean_energy[topo.serving_mask], 1.0, atol=0.1)


def test_precoder_rejects_degenerate_serving_link():
    cfg = small_config()
    topo, spatial, pilots = scenario(cfg)
    nc = norm_constants(spatial, pilots, cfg)
    nc[topo.serving_sets[0][0], 0] = 0.0
    with pytest.raises(DegenerateLinkError):
        cb_precoder(np.zeros((cfg.M, cfg.K, cfg.N), dtype=complex), topo, nc)


# --- statistics --------------------------------------------------------------

@pytest.fixture(scope="module")
def stats_setup():
    cfg = small_config(mc_trials=4000)
    topo, spatial, pilots = scenario(cfg)
    stats = estimate_statistics(spatial, pilots, topo, cfg, with_se=True)
    return cfg, topo, spatial, pilots, stats


def test_statistics_shapes_and_nonnegativity(stats_setup):
    cfg, topo, _, _, st = stats_setup
    assert st.b.shape == (cfg.M, cfg.K)
    assert st.C.shape == (cfg.K, cfg.K, cfg.M, cfg.M)
    assert st.c_nc.shape == (cfg.K, cfg.K, cfg.M)
    assert st.var_nc.shape == (cfg.M, cfg.K)
    assert np.all(st.b >= 0) and np.all(st.c_nc >= 0) and np.all(st.var_nc >= 0)
    assert st.sigma2_dl_W == cfg.sigma2_W
    assert not st.low_trial_warning


def test_statistics_vanish_off_serving_sets(stats_setup):
    cfg, topo, _, _, st = stats_setup
    off = ~topo.serving_mask
    assert np.all(st.b[off] == 0)
    assert np.all(st.var_nc[off] == 0)
    for k in range(cfg.K):
        outside = np.flatnonzero(off[:, k])
        assert np.all(st.c_nc[k, :, outside] == 0)
        for i in range(cfg.K):
            assert np.all(st.C[k, i][outside, :] == 0)
            assert np.all(st.C[k, i][:, outside] == 0)


def test_cross_matrices_are_symmetric_psd(stats_setup):
    cfg, _, _, _, st = stats_setup
    for k in range(cfg.K):
        for i in range(cfg.K):
            m = st.C[k, i]
            assert np.allclose(m, m.T, atol=1e-18)
            w = np.linalg.eigvalsh(m)
            assert w.min() >= -1e-10 * max(np.trace(m), 1e-300)


def test_own_block_is_variance_only_diagonal(stats_setup):
    cfg, _, _, _, st = stats_setup
    for k in range(cfg.K):
        assert np.allclose(st.C[k, k], np.diag(st.var_nc[:, k]), atol=1e-30)
        # stream self-moment = variance + squared mean
        assert np.allclose(st.c_nc[k, k], st.var_nc[:, k] + st.b[:, k] ** 2,
                           rtol=1e-9, atol=1e-30)


def test_coherent_gain_matches_closed_form_within_errorbars(stats_setup):
    cfg, topo, spatial, pilots, st = stats_setup
    b_cf = np.sqrt(norm_constants(spatial, pilots, cfg))
    served = topo.serving_mask
    dev = np.abs(st.b - b_cf)[served] / st.se_b[served]
    assert dev.max() < 4.0
    assert st.b_check_rel_max < 0.1


def test_orthogonal_pilot_cross_terms_vanish():
    cfg = small_config(K=4, tau_p=4, mc_trials=6000)
    topo, spatial, pilots = scenario(cfg)      # tau_p = K: all pilots distinct
    st = estimate_statistics(spatial, pilots, topo, cfg, with_se=True)
    off = ~np.eye(cfg.M, dtype=bool)
    worst = 0.0
    for k in range(cfg.K):
        for i in range(cfg.K):
            if k == i:
                continue
            se = np.maximum(st.se_C[k, i][off], 1e-300)
            worst = max(worst, np.max(np.abs(st.C[k, i][off]) / se))
    assert worst < 4.5


def test_copilot_cross_terms_do_not_vanish():
    cfg = small_config(K=2, M=2, N=2, serving_set_size=2, tau_p=1, mc_trials=6000)
    topo, spatial, pilots = scenario(cfg)
    assert pilots.pilot_index[0] == pilots.pilot_index[1]
    st = estimate_statistics(spatial, pilots, topo, cfg, with_se=True)
    off = ~np.eye(cfg.M, dtype=bool)
    dev = np.abs(st.C[0, 1][off]) / np.maximum(st.se_C[0, 1][off], 1e-300)
    assert dev.max() > 6.0


def test_statistics_deterministic_and_trial_count_respected():
    cfg = small_config(mc_trials=500)
    topo, spatial, pilots = scenario(cfg)
    s1 = estimate_statistics(spatial, pilots, topo, cfg)
    s2 = estimate_statistics(spatial, pilots, topo, cfg)
    s3 = estimate_statistics(spatial, pilots, topo, cfg, seed=999)
    assert np.array_equal(s1.b, s2.b) and np.array_equal(s1.C, s2.C)
    assert not np.array_equal(s1.b, s3.b)
    assert s1.mc_trials == 500


def test_low_trial_warning_flag():
    cfg = small_config(mc_trials=50)
    topo, spatial, pilots = scenario(cfg)
    st = estimate_statistics(spatial, pilots, topo, cfg)
    assert st.low_trial_warning


def test_vectorized_estimator_agrees_with_per_trial_ops():
    """Dual route: batched estimator vs composing the public per-trial ops."""
    cfg = small_config(M=2, K=2, N=2, serving_set_size=2, tau_p=2, mc_trials=3000)
    topo, spatial, pilots = scenario(cfg, seed=4)
    st = estimate_statistics(spatial, pilots, topo, cfg, with_se=True)

    nc = norm_constants(spatial, pilots, cfg)
    trials = 3000
    acc_b = np.zeros((cfg.M, cfg.K))
    acc_s = np.zeros((cfg.K, cfg.K, cfg.M, cfg.M), dtype=complex)
    for ts in range(trials):
        real = sample_true_channels(spatial, ts)
        h_hat = mmse_estimate(real, spatial, pilots, cfg, trial_seed=ts)
        w = cb_precoder(h_hat, topo, nc)
        g = np.einsum("mia,mka->mki", real.h.conj(), w)
        acc_b += np.real(g[:, np.arange(cfg.K), np.arange(cfg.K)])
        acc_s += np.einsum("lki,rki->kilr", g, g.conj())
    b_ref = acc_b / trials
    s_ref = np.real(acc_s) / trials

    assert np.abs(st.b - b_ref).max() <= 4 * (st.se_b.max() * np.sqrt(2))
    for k in range(cfg.K):
        for i in range(cfg.K):
            if k == i:
                continue
            tol = 5 * np.maximum(st.se_C[k, i], 1e-300) * np.sqrt(2)
            assert np.all(np.abs(st.C[k, i] - s_ref[k, i]) <= tol + 1e-25)
