"""Geometry, path loss, covariance, and pilot assignment checks."""

import math

import numpy as np
import pytest

from cfhybrid.errors import ConfigError
from cfhybrid.netgen import (
    SystemConfig,
    assign_pilots,
    build_spatial_model,
    build_topology,
    format_config,
    large_scale_gain,
    local_scattering_covariance,
    parse_config,
    wrap_displacement,
)


# --- config ----------------------------------------------------------------

def test_noise_power_matches_reference_value():
    cfg = SystemConfig()
    # 20 MHz, 9 dB noise figure, 290 K
    assert cfg.sigma2_W == pytest.approx(6.36e-13, rel=5e-3)
    assert cfg.sigma2_W == pytest.approx(20e6 * 1.381e-23 * 290 * 10 ** 0.9, rel=1e-12)


def test_prelog_uses_downlink_fraction():
    cfg = SystemConfig(tau_c=200, tau_p=10)
    assert cfg.tau_d == 190
    assert cfg.prelog == pytest.approx(0.95)


def test_config_roundtrip_through_text():
    cfg = SystemConfig(M=5, K=7, serving_set_size=3, fronthaul_cap_bpsHz=22.5, seed=42)
    again = parse_config(format_config(cfg))
    assert again == cfg


def test_config_parser_accepts_comments_and_blank_lines():
    cfg = parse_config("# scenario\nM = 4\n\nK = 6  # six users\nserving_set_size = 2\n")
    assert (cfg.M, cfg.K, cfg.serving_set_size) == (4, 6, 2)


@pytest.mark.parametrize("text", ["bogus_key = 1\n", "M 4\n", "K = — \n"])
def test_config_parser_rejects_malformed_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("bad", [
    dict(serving_set_size=0), dict(serving_set_size=20), dict(tau_p=0),
    dict(tau_p=200), dict(pilot_power_W=0.0), dict(fronthaul_cap_bpsHz=-1.0),
    dict(mc_trials=0), dict(K=0),
])
def test_config_validation_rejects_out_of_range(bad):
    with pytest.raises(ConfigError):
        SystemConfig(**bad).validate()


# --- geometry --------------------------------------------------------------

def test_wrap_distance_crosses_the_boundary():
    d, ang = wrap_displacement(np.array([[0.0, 0.0]]), np.array([[599.0, 599.0]]), 600.0)
    assert d[0, 0] == pytest.approx(math.sqrt(2.0), abs=1e-12)
    assert ang[0, 0] == pytest.approx(-3 * math.pi / 4, abs=1e-12)


def test_wrap_distance_tie_prefers_unshifted_image():
    d, ang = wrap_displacement(np.array([[0.0, 0.0]]), np.array([[300.0, 0.0]]), 600.0)
    assert d[0, 0] == pytest.approx(300.0)
    assert ang[0, 0] == pytest.approx(0.0)   # +x direction, not the -x image


def test_wrap_distance_never_exceeds_half_diagonal():
    rng = np.random.default_rng(7)
    a = rng.uniform(0, 600, size=(40, 2))
    b = rng.uniform(0, 600, size=(50, 2))
    d, _ = wrap_displacement(a, b, 600.0)
    assert d.shape == (40, 50)
    assert np.all(d <= 600.0 * math.sqrt(2) / 2 + 1e-9)
    plain = np.hypot(*(a[:, None, :] - b[None, :, :]).transpose(2, 0, 1))
    assert np.all(d <= plain + 1e-9)


def test_pathloss_reference_points():
    assert 10 * np.log10(large_scale_gain(1.0)) == pytest.approx(-30.5, abs=1e-12)
    assert 10 * np.log10(large_scale_gain(10.0)) == pytest.approx(-67.2, abs=1e-12)
    # shadowing shifts the dB value one for one
    assert 10 * np.log10(large_scale_gain(10.0, 3.0)) == pytest.approx(-64.2, abs=1e-12)


def test_pathloss_distance_floor():
    assert large_scale_gain(0.25) == pytest.approx(large_scale_gain(1.0))


# --- covariance ------------------------------------------------------------

def test_covariance_structure_at_reference_angle():
    beta, n = 2.5e-9, 8
    r = local_scattering_covariance(beta, math.radians(30.0), 15.0, n)
    assert r.shape == (n, n)
    assert np.allclose(r, r.conj().T, atol=1e-18)
    assert np.real(np.trace(r)) == pytest.approx(n * beta, rel=1e-12)
    assert np.allclose(np.diag(r), beta)
    w = np.linalg.eigvalsh(r)
    assert w.min() >= -1e-12 * np.real(np.trace(r))


def test_covariance_collapses_to_rank_one_without_spread():
    r = local_scattering_covariance(1.0, math.radians(-42.0), 0.0, 6)
    steer = np.exp(1j * np.pi * np.arange(6) * math.sin(math.radians(-42.0)))
    assert np.allclose(r, np.outer(steer, steer.conj()), atol=1e-12)


def test_covariance_spread_damps_off_diagonals():
    narrow = local_scattering_covariance(1.0, 0.3, 5.0, 8)
    wide = local_scattering_covariance(1.0, 0.3, 40.0, 8)
    assert abs(wide[0, 7]) < abs(narrow[0, 7])


def test_sqrt_factors_reproduce_covariance():
    cfg = SystemConfig(M=3, K=4, N=5, serving_set_size=2, mc_trials=100)
    topo = build_topology(cfg, seed=11)
    spatial = build_spatial_model(topo, cfg)
    a = spatial.sqrt_factors()
    rebuilt = a @ np.conj(np.swapaxes(a, -1, -2))
    assert np.allclose(rebuilt, spatial.covariances, atol=1e-18 + 1e-10 * spatial.beta.max())
    assert np.allclose(spatial.beta, topo.beta, rtol=1e-12)


# --- topology --------------------------------------------------------------

def test_topology_is_deterministic_per_seed():
    cfg = SystemConfig()
    t1 = build_topology(cfg, seed=5)
    t2 = build_topology(cfg, seed=5)
    t3 = build_topology(cfg, seed=6)
    assert np.array_equal(t1.ap_pos, t2.ap_pos)
    assert np.array_equal(t1.beta, t2.beta)
    assert not np.array_equal(t1.ap_pos, t3.ap_pos)


def test_serving_sets_pick_largest_gains():
    cfg = SystemConfig()
    topo = build_topology(cfg, seed=3)
    s = cfg.serving_set_size
    for k in range(cfg.K):
        chosen = topo.serving_sets[k]
        assert len(chosen) == s
        assert np.all(np.diff(chosen) > 0)
        worst_chosen = topo.beta[chosen, k].min()
        others = np.setdiff1d(np.arange(cfg.M), chosen)
        assert np.all(topo.beta[others, k] <= worst_chosen + 1e-300)


def test_serving_and_served_sets_are_dual():
    cfg = SystemConfig(M=9, K=11, serving_set_size=4)
    topo = build_topology(cfg, seed=9)
    for m in range(cfg.M):
        for k in range(cfg.K):
            assert (k in topo.served_sets[m]) == (m in topo.serving_sets[k])
            assert topo.serving_mask[m, k] == (m in topo.serving_sets[k])
    assert sum(len(s) for s in topo.served_sets) == cfg.K * cfg.serving_set_size


def test_serving_tie_breaks_toward_lower_ap_index():
    cfg = SystemConfig(M=4, K=1, N=2, serving_set_size=2, shadowing_std_dB=0.0)
    topo = build_topology(cfg, seed=1)
    topo.beta[:, 0] = np.array([0.5, 0.7, 0.5, 0.5])
    order = np.argsort(-topo.beta[:, 0], kind="stable")
    assert list(np.sort(order[:2])) == [0, 1]


def test_positions_stay_inside_area():
    cfg = SystemConfig(area_m=250.0)
    topo = build_topology(cfg, seed=21)
    for pos in (topo.ap_pos, topo.ue_pos):
        assert np.all(pos >= 0.0) and np.all(pos < 250.0)


def test_shadowing_toggle_changes_gains_only():
    base = SystemConfig(shadowing_std_dB=0.0)
    loud = SystemConfig(shadowing_std_dB=4.0)
    t0 = build_topology(base, seed=13)
    t1 = build_topology(loud, seed=13)
    assert np.array_equal(t0.ap_pos, t1.ap_pos)
    assert np.array_equal(t0.distance_m, t1.distance_m)
    assert not np.allclose(t0.beta, t1.beta, rtol=1e-3, atol=0.0)
    expected = large_scale_gain(t0.distance_m)
    assert np.allclose(t0.beta, expected, rtol=1e-12, atol=0.0)


# --- pilots ----------------------------------------------------------------

def test_pilots_distinct_when_ue_count_fits():
    pa = assign_pilots(K=10, tau_p=10, seed=2)
    assert sorted(pa.pilot_index) == list(range(10))
    assert all(len(c) == 1 for c in pa.cohorts())


def test_pilots_reuse_when_oversubscribed():
    pa = assign_pilots(K=15, tau_p=10, seed=2)
    assert np.all((0 <= pa.pilot_index) & (pa.pilot_index < 10))
    cohorts = pa.cohorts()
    assert sum(len(c) for c in cohorts) == 15
    # every pilot is claimed by someone, so an orthogonal core of 10 exists
    assert all(len(c) >= 1 for c in cohorts)
    assert sum(len(c) - 1 for c in cohorts) == 5


def test_oversubscribed_orthogonal_core_moves_with_the_seed():
    cores = {tuple(np.sort(np.unique(assign_pilots(K=30, tau_p=4, seed=s)
                                     .pilot_index, return_index=True)[1]))
             for s in range(8)}
    assert len(cores) > 1  # the bijective subset is not pinned to UEs 0..3


def test_cohort_contains_own_ue_and_is_consistent():
    pa = assign_pilots(K=23, tau_p=7, seed=5)
    for k in range(23):
        cohort = pa.cohort(k)
        assert k in cohort
        assert np.all(pa.pilot_index[cohort] == pa.pilot_index[k])


def test_single_ue_gets_a_singleton_cohort():
    pa = assign_pilots(K=1, tau_p=10, seed=0)
    assert list(pa.cohort(0)) == [0]


def test_pilot_assignment_deterministic_per_seed():
    a = assign_pilots(K=40, tau_p=10, seed=77)
    b = assign_pilots(K=40, tau_p=10, seed=77)
    c = assign_pilots(K=40, tau_p=10, seed=78)
    assert np.array_equal(a.pilot_index, b.pilot_index)
    assert not np.array_equal(a.pilot_index, c.pilot_index)
