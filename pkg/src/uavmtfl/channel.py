"""Air-to-ground link, FDMA rate and per-UAV time/energy accounting.

The link uses the sigmoid line-of-sight probability model: the expected path
loss mixes free-space loss plus a LOS or NLOS excess loss, weighted by the
LOS probability at the UAV's elevation angle as seen from the EV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


@dataclass(frozen=True)
class ChannelParams:
    a: float = 9.61
    b: float = 0.16
    eta_los: float = 1.0
    eta_nlos: float = 20.0
    carrier_hz: float = 2e9
    n0_dbm_hz: float = -174.0
    bandwidth_hz: float = 2e6

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("sigmoid constants a, b must be positive")
        if self.eta_nlos < self.eta_los:
            raise ValueError("eta_nlos must be at least eta_los")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def n0(self) -> float:
        """Noise power spectral density in W/Hz."""
        return dbm_to_watts(self.n0_dbm_hz)


@dataclass(frozen=True)
class Topology:
    ev_positions: np.ndarray
    uav_positions: np.ndarray
    altitude: float = 100.0
    radius: float = 500.0

    def __post_init__(self):
        if self.altitude <= 0:
            raise ValueError("UAV altitude must be positive")
        for pts in (self.ev_positions, self.uav_positions):
            if len(pts) and np.max(np.hypot(pts[:, 0], pts[:, 1])) > self.radius + 1e-9:
                raise ValueError(f"node outside the {self.radius} m cell")

    @property
    def n_evs(self) -> int:
        return len(self.ev_positions)

    @property
    def n_uavs(self) -> int:
        return len(self.uav_positions)

    def horizontal(self, ev: int, uav: int) -> float:
        d = self.ev_positions[ev] - self.uav_positions[uav]
        return float(math.hypot(d[0], d[1]))

    def distances(self) -> np.ndarray:
        """Horizontal EV-UAV distances, shape (M, N)."""
        diff = self.ev_positions[:, None, :] - self.uav_positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])


def _uniform_disk(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    t = 2 * np.pi * rng.random(n)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def random_topology(n_evs: int, n_uavs: int, rng: np.random.Generator,
                    radius: float = 500.0, altitude: float = 100.0) -> Topology:
    ev = _uniform_disk(n_evs, radius, rng)
    uav = _uniform_disk(n_uavs, radius, rng)
    return Topology(ev, uav, altitude, radius)


def los_probability(elevation_deg, params: ChannelParams = ChannelParams()):
    """``1 / (1 + a exp(-b (theta - a)))`` with theta in degrees."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + params.a * np.exp(-params.b * (np.asarray(elevation_deg) - params.a)))


def free_space_loss_db(distance_m, carrier_hz: float):
    return 20.0 * np.log10(4.0 * np.pi * carrier_hz * np.asarray(distance_m) / SPEED_OF_LIGHT)


def path_gain(horizontal_m, altitude_m, params: ChannelParams = ChannelParams()):
    """Linear power gain from the LOS-probability-weighted expected path loss."""
    horizontal_m = np.asarray(horizontal_m, dtype=float)
    dist = np.hypot(horizontal_m, altitude_m)
    if np.any(dist <= 0):
        raise ValueError("zero EV-UAV distance")
    elev = np.degrees(np.arctan2(altitude_m, horizontal_m))
    p_los = los_probability(elev, params)
    fspl = free_space_loss_db(dist, params.carrier_hz)
    pl = p_los * (fspl + params.eta_los) + (1.0 - p_los) * (fspl + params.eta_nlos)
    return 10.0 ** (-pl / 10.0)


def channel_gain(topology: Topology, params: ChannelParams, ev: int, uav: int) -> float:
    return float(path_gain(topology.horizontal(ev, uav), topology.altitude, params))


def gain_matrix(topology: Topology, params: ChannelParams) -> np.ndarray:
    """Gains h[m, n] for every EV m and UAV n."""
    return path_gain(topology.distances(), topology.altitude, params)


def rate(gamma, p, gain, params: ChannelParams = ChannelParams()):
    """FDMA uplink rate ``gamma B log2(1 + p h / (gamma B N0))`` in bit/s."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("bandwidth fraction must be positive for a scheduled UAV")
    bw = gamma * params.bandwidth_hz
    return bw * np.log2(1.0 + np.asarray(p) * np.asarray(gain) / (bw * params.n0))


@dataclass(frozen=True)
class ComputeProfile:
    cycles_per_sample: np.ndarray  # C[m, n]
    cpu_hz: np.ndarray  # f[n]
    energy_coeff: float = 1e-28
    local_steps: int = 5
    batch_size: int = 500

    def __post_init__(self):
        if np.any(np.asarray(self.cycles_per_sample) <= 0) or np.any(np.asarray(self.cpu_hz) <= 0):
            raise ValueError("cycles and CPU frequencies must be positive")
        if self.energy_coeff < 0 or self.local_steps < 0 or self.batch_size <= 0:
            raise ValueError("invalid compute profile")


def comp_time_energy(profile: ComputeProfile, task: int, uav: int) -> tuple[float, float]:
    work = profile.local_steps * profile.batch_size * float(profile.cycles_per_sample[task][uav])
    f = float(profile.cpu_hz[uav])
    return work / f, profile.energy_coeff * work * f * f


def comm_time_energy(q_bits: float, r: float, p: float) -> tuple[float, float]:
    if r <= 0:
        raise ValueError("unreachable link: zero rate")
    t = q_bits / r
    return t, p * t


@dataclass(frozen=True)
class CostReport:
    t_comp: float
    t_comm: float
    e_comp: float
    e_comm: float

    @property
    def energy(self) -> float:
        return self.e_comp + self.e_comm


def check_energy(report: CostReport, e_max: float) -> tuple[bool, float]:
    """(passes, margin) for the per-round energy budget."""
    margin = e_max - (report.e_comp + report.e_comm)
    return margin >= 0, margin


def max_feasible_power(q_bits, gamma, gain, e_budget, p_max, params: ChannelParams = ChannelParams(),
                       iters: int = 200) -> float | None:
    """Largest p <= p_max whose transmit energy fits ``e_budget``; None if none does.

    Transmit energy ``p Q / r(gamma, p)`` grows with p, so bisection applies.
    """
    def energy(p):
        return p * q_bits / float(rate(gamma, p, gain, params))

    if e_budget <= 0:
        return None
    if energy(p_max) <= e_budget:
        return p_max
    # limit as p -> 0 is Q N0 ln2 / h
    floor = q_bits * params.n0 * math.log(2) / gain
    if floor >= e_budget:
        return None
    lo, hi = 0.0, p_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if energy(mid) <= e_budget:
            lo = mid
        else:
            hi = mid
    return lo if lo > 0 else None


def write_gains_csv(path, gains_by_round) -> None:
    """Rows ``round, ev, uav, gain`` for each (round, M x N gain matrix) pair."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "ev", "uav", "gain"])
        for t, g in gains_by_round:
            for m in range(g.shape[0]):
                for n in range(g.shape[1]):
                    w.writerow([t, m, n, repr(float(g[m, n]))])
