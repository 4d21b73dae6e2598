"""Network generation: geometry, large-scale fading, spatial correlation, pilots.

Builds the deterministic scenario layer of the simulator: AP/UE placement on a
wrap-around square, distance-based path loss with optional log-normal
shadowing, per-link spatial correlation matrices for half-wavelength uniform
linear arrays, UE-centric serving sets, and pilot assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, NumericalError
from .seeding import substream

# physical constants
BOLTZMANN_J_PER_K = 1.381e-23
NOISE_TEMP_K = 290.0

# path-loss model: beta_dB = -30.5 - 36.7*log10(d_m) + shadowing
PATHLOSS_OFFSET_DB = -30.5
PATHLOSS_EXPONENT_DB = 36.7
MIN_DISTANCE_M = 1.0

# internal stream tags
_STREAM_AP = 0
_STREAM_UE = 1
_STREAM_SHADOW = 2


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SystemConfig:
    """Scenario parameters.  Field names double as config-file keys.

    Units are embedded in the names: W for powers, Hz for bandwidth, m for
    lengths, dB where noted.  tau_c / tau_p are in symbols per coherence
    block; the downlink fraction is (tau_c - tau_p) / tau_c.
    """

    M: int = 14                         # number of APs
    N: int = 8                          # antennas per AP
    K: int = 15                         # number of UEs
    serving_set_size: int = 8           # APs serving each UE
    tau_c: int = 200                    # coherence block length, symbols
    tau_p: int = 10                     # pilot symbols per block
    pilot_power_W: float = 0.1
    max_ap_power_W: float = 0.2
    fronthaul_cap_bpsHz: float = 15.0   # per-AP fronthaul budget
    area_m: float = 600.0               # side of the wrap-around square
    bandwidth_Hz: float = 20e6
    noise_figure_dB: float = 9.0
    asd_deg: float = 15.0               # angular standard deviation
    shadowing_std_dB: float = 4.0       # 0 disables shadowing
    mc_trials: int = 10000              # Monte Carlo trials for statistics
    seed: int = 1

    @property
    def tau_d(self) -> int:
        return self.tau_c - self.tau_p

    @property
    def prelog(self) -> float:
        return self.tau_d / self.tau_c

    @property
    def sigma2_W(self) -> float:
        """Thermal noise power over the full band, same for both link directions."""
        nf = 10.0 ** (self.noise_figure_dB / 10.0)
        return self.bandwidth_Hz * BOLTZMANN_J_PER_K * NOISE_TEMP_K * nf

    def validate(self) -> "SystemConfig":
        if self.M < 1 or self.N < 1 or self.K < 1:
            raise ConfigError("M, N, K must be positive")
        if not 1 <= self.serving_set_size <= self.M:
            raise ConfigError("serving_set_size must be in [1, M]")
        if not 1 <= self.tau_p < self.tau_c:
            raise ConfigError("need 1 <= tau_p < tau_c")
        if self.pilot_power_W <= 0 or self.max_ap_power_W < 0:
            raise ConfigError("powers must be positive (max_ap_power_W may be 0)")
        if self.fronthaul_cap_bpsHz <= 0:
            raise ConfigError("fronthaul_cap_bpsHz must be positive")
        if self.area_m <= 0 or self.bandwidth_Hz <= 0:
            raise ConfigError("area_m and bandwidth_Hz must be positive")
        if self.asd_deg < 0 or self.shadowing_std_dB < 0:
            raise ConfigError("asd_deg and shadowing_std_dB must be nonnegative")
        if self.mc_trials < 1:
            raise ConfigError("mc_trials must be >= 1")
        return self

    def replace(self, **kwargs) -> "SystemConfig":
        return replace(self, **kwargs).validate()


def parse_config(text: str) -> SystemConfig:
    """Parse flat 'key = value' lines ('#' starts a comment) into a config."""
    types = {f.name: f.type for f in fields(SystemConfig)}
    casts = {"int": int, "float": float}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = casts[types[key]](float(val)) if types[key] == "int" else float(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return SystemConfig(**values).validate()


def load_config(path: str) -> SystemConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def format_config(config: SystemConfig) -> str:
    """Inverse of parse_config, for dumping reproducible run configs."""
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(SystemConfig))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def wrap_displacement(from_xy: np.ndarray, to_xy: np.ndarray, area_m: float):
    """Shortest displacement on the wrap-around square, per (from, to) pair.

    Considers the nine shifted images of the destination points; the zero
    shift wins distance ties.  Returns (distance, angle) arrays of shape
    (len(from_xy), len(to_xy)); angle is the direction from -> to in radians.
    """
    from_xy = np.atleast_2d(np.asarray(from_xy, dtype=float))
    to_xy = np.atleast_2d(np.asarray(to_xy, dtype=float))
    shifts = [(0, 0), (-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    offsets = area_m * np.array(shifts, dtype=float)          # (9, 2)
    # delta[s, a, b, :] = to_b + offset_s - from_a
    delta = to_xy[None, None, :, :] + offsets[:, None, None, :] - from_xy[None, :, None, :]
    dist = np.hypot(delta[..., 0], delta[..., 1])             # (9, A, B)
    best = np.argmin(dist, axis=0)                            # first minimum wins ties
    take = np.take_along_axis
    d = take(dist, best[None], axis=0)[0]
    dx = take(delta[..., 0], best[None], axis=0)[0]
    dy = take(delta[..., 1], best[None], axis=0)[0]
    return d, np.arctan2(dy, dx)


def large_scale_gain(distance_m: np.ndarray, shadow_dB: np.ndarray | float = 0.0) -> np.ndarray:
    """Linear large-scale channel gain at the given distances.

    Distances are floored at MIN_DISTANCE_M so the model stays bounded for
    co-located nodes.
    """
    d = np.maximum(np.asarray(distance_m, dtype=float), MIN_DISTANCE_M)
    beta_db = PATHLOSS_OFFSET_DB - PATHLOSS_EXPONENT_DB * np.log10(d) + shadow_dB
    return 10.0 ** (beta_db / 10.0)


@dataclass
class Topology:
    """Placement, large-scale gains, and UE-centric serving structure."""

    ap_pos: np.ndarray        # (M, 2) m
    ue_pos: np.ndarray        # (K, 2) m
    distance_m: np.ndarray    # (M, K) wrap-around distances
    angle_rad: np.ndarray     # (M, K) AP->UE direction of the closest image
    beta: np.ndarray          # (M, K) linear large-scale gain, shadowing included
    serving_sets: list        # per UE, ascending AP indices
    served_sets: list         # per AP, ascending UE indices
    serving_mask: np.ndarray  # (M, K) bool, serving_mask[m, k] == (m in serving_sets[k])

    @property
    def M(self) -> int:
        return self.ap_pos.shape[0]

    @property
    def K(self) -> int:
        return self.ue_pos.shape[0]


def build_topology(config: SystemConfig, seed: int) -> Topology:
    """Drop APs and UEs uniformly at random and derive the serving structure.

    Serving sets are the serving_set_size APs with the largest shadowed
    large-scale gain per UE; gain ties break toward the lower AP index.
    """
    config.validate()
    M, K = config.M, config.K
    ap_pos = substream(seed, _STREAM_AP).uniform(0.0, config.area_m, size=(M, 2))
    ue_pos = substream(seed, _STREAM_UE).uniform(0.0, config.area_m, size=(K, 2))
    if config.shadowing_std_dB > 0:
        shadow = substream(seed, _STREAM_SHADOW).normal(0.0, config.shadowing_std_dB, size=(M, K))
    else:
        shadow = np.zeros((M, K))

    distance_m, angle_rad = wrap_displacement(ap_pos, ue_pos, config.area_m)
    beta = large_scale_gain(distance_m, shadow)

    S = config.serving_set_size
    serving_mask = np.zeros((M, K), dtype=bool)
    serving_sets = []
    for k in range(K):
        order = np.argsort(-beta[:, k], kind="stable")    # stable: ties to lower index
        chosen = np.sort(order[:S])
        serving_sets.append(chosen)
        serving_mask[chosen, k] = True
    served_sets = [np.flatnonzero(serving_mask[m, :]) for m in range(M)]

    return Topology(ap_pos=ap_pos, ue_pos=ue_pos, distance_m=distance_m,
                    angle_rad=angle_rad, beta=beta, serving_sets=serving_sets,
                    served_sets=served_sets, serving_mask=serving_mask)


# ---------------------------------------------------------------------------
# spatial correlation
# ---------------------------------------------------------------------------

def local_scattering_covariance(beta: float, angle_rad: float, asd_deg: float,
                                n_antennas: int) -> np.ndarray:
    """Covariance of a half-wavelength ULA under Gaussian local scattering.

    Entry (l, r) is beta * exp(j*pi*(l-r)*sin(phi)) *
    exp(-(sigma_phi^2 / 2) * (pi*(l-r)*cos(phi))^2) with sigma_phi in radians.
    Hermitian with trace N*beta; tends to a rank-one steering outer product
    as the angular spread goes to zero.
    """
    sigma_phi = math.radians(asd_deg)
    d = np.subtract.outer(np.arange(n_antennas), np.arange(n_antennas))
    phase = np.pi * d * math.sin(angle_rad)
    spread = 0.5 * (sigma_phi * np.pi * d * math.cos(angle_rad)) ** 2
    return beta * np.exp(1j * phase - spread)


@dataclass
class SpatialModel:
    """Per-link covariance matrices, with cached factor for channel sampling."""

    covariances: np.ndarray   # (M, K, N, N) complex Hermitian PSD
    _sqrt: np.ndarray | None = None

    @property
    def beta(self) -> np.ndarray:
        """(M, K) linear gains recovered as trace/N."""
        n = self.covariances.shape[-1]
        return np.real(np.trace(self.covariances, axis1=-2, axis2=-1)) / n

    def sqrt_factors(self) -> np.ndarray:
        """A with A @ A^H = R per link, for drawing correlated channels."""
        if self._sqrt is None:
            w, v = np.linalg.eigh(self.covariances)
            tr = np.sum(w, axis=-1, keepdims=True)
            if np.any(w < -1e-12 * np.maximum(tr, 1e-300)):
                raise NumericalError("covariance matrix is not PSD")
            w = np.clip(w, 0.0, None)
            self._sqrt = v * np.sqrt(w)[..., None, :] @ np.conj(np.swapaxes(v, -1, -2))
        return self._sqrt


def build_spatial_model(topology: Topology, config: SystemConfig) -> SpatialModel:
    """Closed-form covariance for every (AP, UE) link of the topology."""
    N = config.N
    sigma_phi = math.radians(config.asd_deg)
    d = np.subtract.outer(np.arange(N), np.arange(N))
    sin_phi = np.sin(topology.angle_rad)[..., None, None]
    cos_phi = np.cos(topology.angle_rad)[..., None, None]
    phase = np.pi * d * sin_phi
    spread = 0.5 * (sigma_phi * np.pi * d * cos_phi) ** 2
    cov = topology.beta[..., None, None] * np.exp(1j * phase - spread)
    if not np.all(np.isfinite(cov)):
        raise NumericalError("non-finite covariance entries")
    return SpatialModel(covariances=cov)


# ---------------------------------------------------------------------------
# pilots
# ---------------------------------------------------------------------------

@dataclass
class PilotAssignment:
    """Pilot indices per UE (0-based) and the induced co-pilot cohorts."""

    pilot_index: np.ndarray   # (K,) ints in [0, tau_p)
    tau_p: int

    def cohort(self, k: int) -> np.ndarray:
        """UEs sharing UE k's pilot, k included, ascending."""
        return np.flatnonzero(self.pilot_index == self.pilot_index[k])

    def cohorts(self) -> list:
        """Per pilot index t, the ascending UE indices assigned to t."""
        return [np.flatnonzero(self.pilot_index == t) for t in range(self.tau_p)]


def assign_pilots(K: int, tau_p: int, seed: int) -> PilotAssignment:
    """Random pilot assignment.

    With K <= tau_p every UE gets a distinct pilot; otherwise a uniformly
    random subset of tau_p UEs gets the distinct pilots and each remaining
    UE draws one uniformly at random.
    """
    if K < 1 or tau_p < 1:
        raise ConfigError("K and tau_p must be positive")
    rng = substream(seed, 0)
    if K <= tau_p:
        idx = rng.permutation(tau_p)[:K]
    else:
        idx = np.empty(K, dtype=np.int64)
        distinct = np.sort(rng.choice(K, size=tau_p, replace=False))
        idx[distinct] = rng.permutation(tau_p)
        rest = np.setdiff1d(np.arange(K), distinct)
        idx[rest] = rng.integers(0, tau_p, size=rest.size)
    return PilotAssignment(pilot_index=idx.astype(np.int64), tau_p=tau_p)
