"""Min-max FDMA bandwidth allocation.

For a fixed association every UAV n needs ``d_n`` bits delivered by
``T - t_comp_n``. Writing ``a = P h / N0`` and ``chi = d N0 ln2 / ((T - t_comp) P h)``,
the bandwidth that finishes exactly at T is

    gamma B = (d ln2 / (T - t_comp)) / (-(W_{-1}(-chi e^{-chi}) + chi))

which exists only for ``chi < 1``: even unlimited bandwidth caps the rate at
``a / ln2``. The optimal T* is the root of ``sum_n gamma_n(T) = 1``, found by
bisection (the sum is strictly decreasing in T).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelParams

INV_E = math.exp(-1.0)
_LN2 = math.log(2.0)


class AllocationError(ValueError):
    pass


def _halley(w, x, max_iter=100):
    for _ in range(max_iter):
        ew = np.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        safe = np.where(wp1 == 0.0, 1.0, wp1)
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * safe)
        dw = np.where((wp1 == 0.0) | (denom == 0.0), 0.0, f / np.where(denom == 0.0, 1.0, denom))
        w = w - dw
        if np.all(np.abs(dw) <= 1e-15 * (1.0 + np.abs(w))):
            break
    return w


def _branch_series(x, sign):
    p = sign * np.sqrt(np.maximum(2.0 * (math.e * x + 1.0), 0.0))
    return -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3


def lambert_w0(x):
    """Principal branch of the Lambert W function for real ``x >= -1/e``."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < -INV_E - 1e-15) or np.any(np.isnan(xa)):
        raise ValueError("lambert_w0 is real only for x >= -1/e")
    xa = np.maximum(xa, -INV_E)
    l1 = np.log1p(np.maximum(xa, -0.25))
    guess = np.where(xa < -0.25, _branch_series(xa, 1.0), l1 * (1.0 - np.log1p(l1) / (2.0 + l1)))
    w = _halley(guess, xa)
    return float(w) if np.ndim(x) == 0 else w


def lambert_wm1(x):
    """Lower real branch W_{-1} for ``-1/e <= x < 0``."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < -INV_E - 1e-15) or np.any(xa >= 0) or np.any(np.isnan(xa)):
        raise ValueError("lambert_wm1 is real only for -1/e <= x < 0")
    xa = np.maximum(xa, -INV_E)
    l1 = np.log(-np.minimum(xa, -1e-300))
    l2 = np.log(-np.minimum(l1, -1e-300))
    asym = l1 - l2 + l2 / l1
    guess = np.where(xa < -0.25, _branch_series(xa, -1.0), asym)
    w = _halley(guess, xa)
    return float(w) if np.ndim(x) == 0 else w


@dataclass(frozen=True)
class UavLoad:
    d_bits: float
    t_comp: float
    p: float
    gain: float
    n0: float = ChannelParams().n0
    bandwidth_hz: float = ChannelParams().bandwidth_hz

    def __post_init__(self):
        if self.d_bits <= 0:
            raise ValueError("payload must be positive")
        if self.t_comp < 0:
            raise ValueError("computation time must be non-negative")

    @property
    def snr_scale(self) -> float:
        """``P h / N0`` in Hz; the rate limit as bandwidth grows is this over ln 2."""
        return self.p * self.gain / self.n0

    def rate(self, gamma) -> float:
        bw = gamma * self.bandwidth_hz
        return bw * math.log2(1.0 + self.p * self.gain / (bw * self.n0))

    def completion(self, gamma) -> float:
        return self.t_comp + self.d_bits / self.rate(gamma)


def _arrays(loads):
    d = np.array([ld.d_bits for ld in loads], dtype=float)
    tc = np.array([ld.t_comp for ld in loads], dtype=float)
    a = np.array([ld.snr_scale for ld in loads], dtype=float)
    bw = np.array([ld.bandwidth_hz for ld in loads], dtype=float)
    return d, tc, a, bw


def _gammas(d, tc, a, bw, t):
    """Vectorised bandwidth fractions finishing exactly at ``t``; inf where impossible."""
    tau = t - tc
    out = np.full(len(d), np.inf)
    ok = tau > 0
    need = np.zeros_like(d)
    need[ok] = d[ok] * _LN2 / tau[ok]  # required rate in nats/s
    chi = np.full(len(d), np.inf)
    chi[ok] = need[ok] / a[ok]
    ok &= chi < 1.0
    if np.any(ok):
        c = chi[ok]
        w = lambert_wm1(np.atleast_1d(-c * np.exp(-c)))
        x = need[ok] / (-(w + c))
        # one Newton polish on x ln(1 + a/x) = need; the closed form loses digits as chi -> 1
        aa = a[ok]
        g = x * np.log1p(aa / x) - need[ok]
        dg = np.log1p(aa / x) - aa / (x + aa)
        x = np.where(dg > 0, x - g / np.where(dg > 0, dg, 1.0), x)
        out[ok] = x / bw[ok]
    return out


def gamma_for(load: UavLoad, t_candidate: float) -> float:
    """Bandwidth fraction that makes ``load`` finish exactly at ``t_candidate``.

    Returns ``inf`` when no bandwidth suffices (``chi >= 1``).
    """
    if t_candidate <= load.t_comp:
        raise ValueError("candidate time must exceed the computation time")
    return float(_gammas(*_arrays([load]), t_candidate)[0])


@dataclass
class AllocationResult:
    gammas: np.ndarray
    t_star: float
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def gamma_sum(self) -> float:
        return float(np.sum(self.gammas))


def _validate(loads):
    if not loads:
        raise AllocationError("no UAVs to allocate")
    for n, ld in enumerate(loads):
        vals = (ld.d_bits, ld.t_comp, ld.p, ld.gain, ld.n0, ld.bandwidth_hz)
        if not all(math.isfinite(v) for v in vals):
            raise AllocationError(f"UAV {n}: non-finite load parameters")
        if ld.p * ld.gain <= 0:
            raise AllocationError(f"UAV {n}: zero transmit power or channel gain, link unusable")


def solve(loads: list[UavLoad], tol: float = 1e-6, max_iter: int = 200, trace: bool = False) -> AllocationResult:
    """Minimise the slowest UAV's completion time subject to ``sum gamma <= 1``."""
    _validate(loads)
    d, tc, a, bw = _arrays(loads)
    log = []

    def residual(t):
        r = float(np.sum(_gammas(d, tc, a, bw, t))) - 1.0
        if trace:
            log.append((t, r))
        return r

    lo = float(tc.max()) + 1e-9
    hi = 2.0 * lo
    it = 0
    while residual(hi) >= 0:
        hi *= 2.0
        it += 1
        if it > 2000:
            raise AllocationError("could not bracket the optimal round time")
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        r = residual(mid)
        if r > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4e-16 * hi:
            break
    gammas = _gammas(d, tc, a, bw, hi)
    res = AllocationResult(gammas, hi, it, log)
    if abs(res.gamma_sum - 1.0) > tol:
        raise AllocationError(f"bisection stalled with sum(gamma) = {res.gamma_sum!r}")
    return res


def equal_allocation(loads: list[UavLoad]) -> AllocationResult:
    """Baseline: every UAV gets ``1/N`` of the band."""
    _validate(loads)
    g = np.full(len(loads), 1.0 / len(loads))
    t = max(ld.completion(gi) for ld, gi in zip(loads, g))
    return AllocationResult(g, t, 0)


def completion_times(loads: list[UavLoad], gammas) -> np.ndarray:
    return np.array([ld.completion(g) for ld, g in zip(loads, gammas)])


def write_trace_csv(path, result: AllocationResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_candidate", "residual"])
        for t, r in result.trace:
            w.writerow([repr(t), repr(r)])
