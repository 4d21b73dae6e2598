"""Channel estimation and precoding statistics.

Uplink pilots give each AP an MMSE estimate of its serving channels; the
downlink uses conjugate beamforming on those estimates.  Rate evaluation and
power optimization only ever touch channel statistics, estimated here by
Monte Carlo over channel and pilot-noise realizations:

  b[m, k]        mean of h_{m,k}^H w_{m,k}ap  (real, coherent gain per link)
  C[k, i]        M x M second-moment matrix of the vector
                 (h_{l,i}^H w_{l,k})_l, with the own-signal mean removed on
                 the diagonal block k == i
  c_nc[s, i, m]  E|h_{m,i}^H w_{m,s}|^2, per-AP moments for independent
                 symbol streams
  var_nc[m, k]   E|h_{m,k}^H w_{m,k}|^2 - b[m, k]^2

Entries involving a non-serving (AP, UE) pair are exactly zero because the
precoder is zero there.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLinkError, NumericalError
from .netgen import PilotAssignment, SpatialModel, SystemConfig, Topology
from .seeding import substream

_STREAM_CHANNEL = 0
_STREAM_PILOT_NOISE = 1
_STREAM_MC = 2

_MC_BATCH = 256
_MIN_TRIALS = 100


@dataclass
class ChannelRealization:
    """One draw of the true channels, h[m, k] in C^N."""

    h: np.ndarray            # (M, K, N) complex
    trial_seed: int


def sample_true_channels(spatial: SpatialModel, trial_seed: int) -> ChannelRealization:
    """Draw h_{m,k} ~ CN(0, R_{m,k}) for every link, deterministically per seed."""
    a = spatial.sqrt_factors()                    # (M, K, N, N)
    m, k, n, _ = a.shape
    rng = substream(trial_seed, _STREAM_CHANNEL)
    z = rng.standard_normal((m, k, n)) + 1j * rng.standard_normal((m, k, n))
    z *= np.sqrt(0.5)
    h = (a @ z[..., None])[..., 0]
    return ChannelRealization(h=h, trial_seed=trial_seed)


def compute_psi(spatial: SpatialModel, pilots: PilotAssignment,
                config: SystemConfig) -> np.ndarray:
    """Pilot-projection covariance per (AP, pilot): sum of cohort covariances
    weighted by tau_p * pilot power, plus noise."""
    M, K, N, _ = spatial.covariances.shape
    psi = np.zeros((M, pilots.tau_p, N, N), dtype=complex)
    psi += config.sigma2_W * np.eye(N)
    for t, cohort in enumerate(pilots.cohorts()):
        if len(cohort):
            psi[:, t] += config.tau_p * config.pilot_power_W * \
                spatial.covariances[:, cohort].sum(axis=1)
    return psi


def _estimator_matrices(spatial: SpatialModel, pilots: PilotAssignment,
                        config: SystemConfig) -> np.ndarray:
    """E[m, k] with h_hat_{m,k} = E[m, k] @ y_{m, t_k}."""
    psi_inv = np.linalg.inv(compute_psi(spatial, pilots, config))
    psi_inv_k = psi_inv[:, pilots.pilot_index]            # (M, K, N, N)
    return np.sqrt(config.pilot_power_W) * (spatial.covariances @ psi_inv_k)


def mmse_estimate(realization: ChannelRealization, spatial: SpatialModel,
                  pilots: PilotAssignment, config: SystemConfig,
                  trial_seed: int) -> np.ndarray:
    """MMSE channel estimates for all links from one uplink pilot reception.

    The received pilot projection is y_{m,t} = sum over the cohort of
    sqrt(p_pilot) * tau_p * h_{m,l} plus CN(0, tau_p * sigma2 * I) noise,
    shared by all UEs on the same pilot.
    """
    M, K, N = realization.h.shape
    rng = substream(trial_seed, _STREAM_PILOT_NOISE)
    noise = rng.standard_normal((M, pilots.tau_p, N)) + \
        1j * rng.standard_normal((M, pilots.tau_p, N))
    noise *= np.sqrt(0.5 * config.tau_p * config.sigma2_W)

    gain = np.sqrt(config.pilot_power_W) * config.tau_p
    y = noise
    for t, cohort in enumerate(pilots.cohorts()):
        if len(cohort):
            y[:, t] += gain * realization.h[:, cohort].sum(axis=1)

    est = _estimator_matrices(spatial, pilots, config)
    y_k = y[:, pilots.pilot_index]                        # (M, K, N)
    return (est @ y_k[..., None])[..., 0]


def norm_constants(spatial: SpatialModel, pilots: PilotAssignment,
                   config: SystemConfig) -> np.ndarray:
    """Mean estimated-channel energy E||h_hat_{m,k}||^2 per link.

    Closed form: p_pilot * tau_p * tr(R Psi^{-1} R).
    """
    psi_inv = np.linalg.inv(compute_psi(spatial, pilots, config))
    psi_inv_k = psi_inv[:, pilots.pilot_index]
    r = spatial.covariances
    prod = r @ psi_inv_k @ r
    tr = np.real(np.trace(prod, axis1=-2, axis2=-1))
    return config.pilot_power_W * config.tau_p * tr


def cb_precoder(h_hat: np.ndarray, topology: Topology,
                norm_const: np.ndarray) -> np.ndarray:
    """Unit-mean-energy conjugate beamformers; zero for non-serving links."""
    mask = topology.serving_mask
    bad = mask & ~(norm_const > 0)
    if np.any(bad):
        m, k = np.argwhere(bad)[0]
        raise DegenerateLinkError(f"zero estimated energy on serving link ({m}, {k})")
    scale = np.zeros_like(norm_const)
    scale[mask] = 1.0 / np.sqrt(norm_const[mask])
    return h_hat * scale[..., None]


@dataclass
class PrecodingStatistics:
    """Moments of the effective downlink channels under conjugate beamforming.

    C[k, i] is the second-moment matrix of the per-AP effective channels from
    UE k's beamformers to victim UE i; the k == i entry holds the
    variance-only diagonal (coherent mean removed).  c_nc[s, i] holds per-AP
    second moments for independently encoded streams.  Standard errors se_b /
    se_C are populated when requested from the estimator.
    """

    b: np.ndarray             # (M, K) real >= 0
    C: np.ndarray             # (K, K, M, M) real symmetric PSD
    c_nc: np.ndarray          # (K, K, M) real >= 0, indexed [s, i, m]
    var_nc: np.ndarray        # (M, K) real >= 0
    sigma2_dl_W: float
    mc_trials: int
    low_trial_warning: bool = False
    b_check_rel_max: float = 0.0
    se_b: np.ndarray | None = None
    se_C: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.b.shape[0]

    @property
    def K(self) -> int:
        return self.b.shape[1]


def _psd_clip(mats: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues of a stack of real matrices."""
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


def estimate_statistics(spatial: SpatialModel, pilots: PilotAssignment,
                        topology: Topology, config: SystemConfig,
                        seed: int | None = None,
                        with_se: bool = False) -> PrecodingStatistics:
    """Monte Carlo estimate of all precoding statistics.

    Draws config.mc_trials independent (channel, pilot noise) realizations,
    forms the conjugate beamformers exactly as the downlink would, and
    averages the effective-channel moments.  Deterministic for a fixed seed
    and trial count; trials are vectorized in fixed-size batches.
    """
    M, K, N, _ = spatial.covariances.shape
    T = int(config.mc_trials)
    sd = config.seed if seed is None else seed
    sigma2 = config.sigma2_W

    a = spatial.sqrt_factors()
    nc = norm_constants(spatial, pilots, config)
    mask = topology.serving_mask
    bad = mask & ~(nc > 0)
    if np.any(bad):
        m, k = np.argwhere(bad)[0]
        raise DegenerateLinkError(f"zero estimated energy on serving link ({m}, {k})")

    # precoder map: w_{m,k} = West[m, k] @ y_{m, t_k}, zero off the serving set
    west = _estimator_matrices(spatial, pilots, config)
    scale = np.zeros((M, K))
    scale[mask] = 1.0 / np.sqrt(nc[mask])
    west = west * scale[..., None, None]

    # pilot mixing matrix: y_{m,t} = sum_k pm[t, k] h_{m,k} + noise
    pm = np.zeros((pilots.tau_p, K))
    pm[pilots.pilot_index, np.arange(K)] = np.sqrt(config.pilot_power_W) * config.tau_p

    rng = substream(sd, _STREAM_MC)
    acc_b = np.zeros((M, K))
    acc_b2 = np.zeros((M, K))
    acc_s = np.zeros((K, K, M, M), dtype=complex)
    acc_s2 = np.zeros((K, K, M, M)) if with_se else None
    kk = np.arange(K)

    done = 0
    while done < T:
        B = min(_MC_BATCH, T - done)
        z = rng.standard_normal((B, M, K, N)) + 1j * rng.standard_normal((B, M, K, N))
        z *= np.sqrt(0.5)
        h = (a @ z[..., None])[..., 0]                       # (B, M, K, N)

        noise = rng.standard_normal((B, M, pilots.tau_p, N)) + \
            1j * rng.standard_normal((B, M, pilots.tau_p, N))
        noise *= np.sqrt(0.5 * config.tau_p * sigma2)
        y = np.einsum("tk,bmka->bmta", pm, h) + noise
        y_k = y[:, :, pilots.pilot_index]                    # (B, M, K, N)
        w = (west @ y_k[..., None])[..., 0]

        # g[b, m, i, k] = h_{m,i}^H w_{m,k}
        g = np.conj(h) @ np.swapaxes(w, -1, -2)
        g_self = g[:, :, kk, kk]                             # (B, M, K)
        acc_b += g_self.real.sum(axis=0)
        acc_b2 += (g_self.real ** 2).sum(axis=0)

        x = g.transpose(3, 2, 1, 0)                          # (K, I, M, B)
        acc_s += x @ np.conj(x.transpose(0, 1, 3, 2))
        if with_se:
            u, v = x.real, x.imag
            uu, vv, uv = u * u, v * v, u * v
            acc_s2 += uu @ uu.transpose(0, 1, 3, 2)
            acc_s2 += vv @ vv.transpose(0, 1, 3, 2)
            acc_s2 += 2.0 * (uv @ uv.transpose(0, 1, 3, 2))
        done += B

    b_raw = acc_b / T
    s = acc_s.real / T                                        # (K, I, M, M)
    if not (np.all(np.isfinite(b_raw)) and np.all(np.isfinite(s))):
        raise NumericalError("non-finite Monte Carlo moments")

    b = np.clip(b_raw, 0.0, None) * mask
    c_nc = np.clip(np.diagonal(s, axis1=-2, axis2=-1), 0.0, None)   # (K, I, M)
    m2_self = c_nc[kk, kk].T                                  # (M, K)
    var_nc = np.clip(m2_self - b ** 2, 0.0, None)

    # cross matrices keep the full second moment; own blocks keep variance only
    c = _psd_clip(s)
    for k in range(K):
        c[k, k] = np.diag(var_nc[:, k])

    se_b = None
    se_c = None
    if with_se:
        se_b = np.sqrt(np.clip(acc_b2 / T - b_raw ** 2, 0.0, None) / T)
        se_c = np.sqrt(np.clip(acc_s2 / T - s ** 2, 0.0, None) / T)

    b_cf = np.sqrt(np.clip(nc, 0.0, None)) * mask
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(b - b_cf)[mask] / b_cf[mask]
    b_check = float(rel.max()) if rel.size else 0.0
    # noise floor of the max over links scales like 1/sqrt(T); only warn
    # above what honest Monte Carlo scatter can produce
    if b_check > max(0.1, 5.0 / math.sqrt(T)):
        warnings.warn(f"Monte Carlo coherent gains deviate {b_check:.1%} from closed form")

    return PrecodingStatistics(
        b=b, C=c, c_nc=c_nc, var_nc=var_nc, sigma2_dl_W=sigma2, mc_trials=T,
        low_trial_warning=T < _MIN_TRIALS, b_check_rel_max=b_check,
        se_b=se_b, se_C=se_c,
    )
