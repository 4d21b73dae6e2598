"""Achievable-rate evaluation for hybrid serving modes.

Each UE is served either coherently (all serving APs beamform the same
symbol, amplitudes add across APs) or non-coherently (each serving AP sends
its own stream, decoded successively in ascending AP order).  Rates use the
channel-hardening lower bound: only statistical knowledge at the UE, means in
the signal term, full residual moments in the interference term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chanstat import PrecodingStatistics
from .netgen import SystemConfig, Topology

CJT = "CJT"
NCJT = "NCJT"


@dataclass
class ModeAssignment:
    """Per-UE serving mode: True = coherent (CJT), False = non-coherent (NCJT)."""

    is_cjt: np.ndarray    # (K,) bool

    def __post_init__(self):
        self.is_cjt = np.asarray(self.is_cjt, dtype=bool)

    @property
    def K(self) -> int:
        return self.is_cjt.size

    @property
    def g_coh(self) -> np.ndarray:
        return np.flatnonzero(self.is_cjt)

    @property
    def g_nc(self) -> np.ndarray:
        return np.flatnonzero(~self.is_cjt)

    @property
    def n_cjt(self) -> int:
        return int(self.is_cjt.sum())

    @classmethod
    def from_string(cls, text: str) -> "ModeAssignment":
        """Parse a UE-indexed flag string, '1' = CJT, '0' = NCJT."""
        if not text or set(text) - {"0", "1"}:
            raise ValueError(f"mode string must be over {{0,1}}, got {text!r}")
        return cls(is_cjt=np.array([c == "1" for c in text]))

    def to_string(self) -> str:
        return "".join("1" if f else "0" for f in self.is_cjt)

    def mode_of(self, ue: int) -> str:
        return CJT if self.is_cjt[ue] else NCJT


@dataclass
class PowerSolution:
    """Downlink power allocation p[m, k] in watts."""

    p: np.ndarray         # (M, K) nonnegative

    @property
    def p_tilde(self) -> np.ndarray:
        return np.sqrt(self.p)

    def validate(self, topology: Topology, config: SystemConfig,
                 atol: float = 0.0) -> "PowerSolution":
        if np.any(self.p < 0):
            raise ValueError("negative transmit power")
        if np.any(self.p[~topology.serving_mask] != 0):
            raise ValueError("power allocated outside a serving set")
        sums = self.p.sum(axis=1)
        if np.any(sums > config.max_ap_power_W + atol):
            worst = int(np.argmax(sums))
            raise ValueError(f"AP {worst} exceeds power budget: {sums[worst]!r}")
        return self


@dataclass
class RateReport:
    """Rates, SINRs, and fronthaul loads for one (power, mode) operating point."""

    rate_bpsHz: np.ndarray       # (K,) per-UE rate
    sinr_coh: np.ndarray         # (K,) NaN for non-coherent UEs
    sinr_nc: np.ndarray          # (M, K) per-stream SINR, 0 where no stream
    rate_nc: np.ndarray          # (M, K) per-stream rate, 0 where no stream
    fronthaul_bpsHz: np.ndarray  # (M,) serving-cost totals per AP
    sum_rate_bpsHz: float
    prelog: float
    modes: ModeAssignment = field(repr=False)


def rate_from_sinr(sinr, config: SystemConfig):
    """Spectral efficiency of the downlink phase: prelog * log2(1 + SINR)."""
    sinr = np.asarray(sinr, dtype=float)
    if np.any(sinr < 0):
        raise ValueError("SINR must be nonnegative")
    out = config.prelog * np.log2(1.0 + sinr)
    return float(out) if out.ndim == 0 else out


def _coherent_interference(stats: PrecodingStatistics, p: np.ndarray,
                           p_tilde: np.ndarray, modes: ModeAssignment,
                           victim: int) -> float:
    """Interference-plus-noise at a victim UE, excluding any own-stream handling."""
    total = stats.sigma2_dl_W
    for k in modes.g_coh:
        v = p_tilde[:, k]
        total += float(v @ stats.C[k, victim] @ v)
    for s in modes.g_nc:
        if s != victim:
            total += float(stats.c_nc[s, victim] @ p[:, s])
    return total


def sinr_cjt(stats: PrecodingStatistics, power: PowerSolution,
             modes: ModeAssignment, ue: int) -> float:
    """Hardening-bound SINR of a coherently served UE."""
    if not modes.is_cjt[ue]:
        raise ValueError(f"UE {ue} is not coherently served")
    pt = power.p_tilde
    num = float(pt[:, ue] @ stats.b[:, ue]) ** 2
    den = _coherent_interference(stats, power.p, pt, modes, ue)
    # own coherent block already uses the variance-only matrix C[ue, ue]
    return num / den


def sinr_ncjt(stats: PrecodingStatistics, power: PowerSolution,
              modes: ModeAssignment, ap: int, ue: int) -> float:
    """Hardening-bound SINR of stream (ap, ue) under successive decoding.

    Streams are decoded in ascending AP index; already-decoded own streams
    (and the stream being decoded) keep only their variance in the
    denominator, later own streams keep their full second moment.
    """
    if modes.is_cjt[ue]:
        raise ValueError(f"UE {ue} is not non-coherently served")
    p = power.p
    den = _coherent_interference(stats, p, power.p_tilde, modes, ue)
    coef = stats.c_nc[ue, ue].copy()
    coef[:ap + 1] = stats.var_nc[:ap + 1, ue]
    den += float(coef @ p[:, ue])
    num = p[ap, ue] * stats.b[ap, ue] ** 2
    return num / den


def fronthaul_load(rate_coh: np.ndarray, rate_nc: np.ndarray,
                   modes: ModeAssignment, topology: Topology) -> np.ndarray:
    """Per-AP serving cost.

    A coherent UE costs its full rate at every serving AP (the same symbol
    stream is shipped to each of them); a non-coherent UE costs each serving
    AP only that AP's own stream rate.
    """
    m_count = topology.M
    load = np.zeros(m_count)
    for m in range(m_count):
        for k in topology.served_sets[m]:
            load[m] += rate_coh[k] if modes.is_cjt[k] else rate_nc[m, k]
    return load


def evaluate(stats: PrecodingStatistics, power: PowerSolution,
             modes: ModeAssignment, topology: Topology,
             config: SystemConfig) -> RateReport:
    """Full rate report for one operating point."""
    M, K = stats.M, stats.K
    power.validate(topology, config, atol=math.inf)   # structure only, not the cap
    sinr_coh = np.full(K, np.nan)
    sinr_nc = np.zeros((M, K))
    rate_nc = np.zeros((M, K))
    rate = np.zeros(K)

    for i in modes.g_coh:
        sinr_coh[i] = sinr_cjt(stats, power, modes, i)
        rate[i] = rate_from_sinr(sinr_coh[i], config)
    for s in modes.g_nc:
        for m in topology.serving_sets[s]:
            sinr_nc[m, s] = sinr_ncjt(stats, power, modes, m, s)
            rate_nc[m, s] = rate_from_sinr(sinr_nc[m, s], config)
        rate[s] = rate_nc[:, s].sum()

    rate_coh = np.where(modes.is_cjt, rate, 0.0)
    load = fronthaul_load(rate_coh, rate_nc, modes, topology)
    return RateReport(rate_bpsHz=rate, sinr_coh=sinr_coh, sinr_nc=sinr_nc,
                      rate_nc=rate_nc, fronthaul_bpsHz=load,
                      sum_rate_bpsHz=float(rate.sum()), prelog=config.prelog,
                      modes=modes)
