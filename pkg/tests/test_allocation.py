import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavmtfl import allocation as al

N0 = 10 ** (-17.4) * 1e-3


def newton_w(x, w=0.5):
    for _ in range(100):
        w -= (w * math.exp(w) - x) / (math.exp(w) * (w + 1))
    return w


def bisect(f, lo, hi, iters=300):
    """Root of an increasing f on [lo, hi]."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_load(rng, **kw):
    base = dict(
        d_bits=rng.uniform(2e5, 2e6),
        t_comp=rng.uniform(0.01, 0.5),
        p=0.1,
        gain=10 ** rng.uniform(-11, -8.5),
        n0=N0,
        bandwidth_hz=2e6,
    )
    base.update(kw)
    return al.UavLoad(**base)


def test_lambert_w0_fixed_points():
    assert al.lambert_w0(0.0) == 0.0
    assert al.lambert_w0(math.e) == pytest.approx(1.0, abs=1e-15)
    assert al.lambert_w0(1.0) == pytest.approx(newton_w(1.0), abs=1e-15)
    assert al.lambert_w0(1.0) == pytest.approx(0.5671432904, abs=1e-10)
    assert al.lambert_w0(-1 / math.e) == pytest.approx(-1.0, abs=1e-7)


def test_lambert_w0_domain_error():
    with pytest.raises(ValueError):
        al.lambert_w0(-0.5)
    with pytest.raises(ValueError):
        al.lambert_w0(float("nan"))


def test_lambert_w0_round_trip_log_spaced():
    x = np.concatenate([-np.logspace(-12, math.log10(1 / math.e - 1e-9), 300), [0.0], np.logspace(-12, 8, 700)])
    w = al.lambert_w0(x)
    assert np.all(w >= -1)
    assert np.all(np.abs(w * np.exp(w) - x) <= 1e-12 * np.maximum(1, np.abs(x)))


def test_lambert_wm1_branch():
    x = -np.logspace(-300, math.log10(1 / math.e - 1e-12), 500)
    w = al.lambert_wm1(x)
    assert np.all(w <= -1 + 1e-6)
    assert np.all(np.abs(w * np.exp(w) - x) <= 1e-12 * np.maximum(1e-300, np.abs(x)) + 1e-300)
    assert al.lambert_wm1(-0.1) == pytest.approx(-3.577152063957297, rel=1e-14)
    with pytest.raises(ValueError):
        al.lambert_wm1(0.1)


def test_gamma_for_matches_implicit_bisection(rng):
    for _ in range(20):
        ld = random_load(rng)
        t = ld.t_comp + rng.uniform(0.5, 5.0)
        g = al.gamma_for(ld, t)
        if not math.isfinite(g):
            continue
        oracle = bisect(lambda x: ld.rate(x) * (t - ld.t_comp) - ld.d_bits, 1e-12, 1e6)
        assert g == pytest.approx(oracle, rel=1e-8)
        assert ld.completion(g) == pytest.approx(t, rel=1e-8)


def test_gamma_for_monotone_and_symmetric(rng):
    ld = random_load(rng, gain=1e-9)
    ts = ld.t_comp + np.logspace(-1, 3, 50)
    gs = [al.gamma_for(ld, t) for t in ts]
    assert all(a > b for a, b in zip(gs, gs[1:]))
    assert gs[-1] < 1e-3
    twin = al.UavLoad(ld.d_bits, ld.t_comp, ld.p, ld.gain, ld.n0, ld.bandwidth_hz)
    assert al.gamma_for(twin, ts[3]) == gs[3]
    with pytest.raises(ValueError):
        al.gamma_for(ld, ld.t_comp)


def test_gamma_for_unreachable_time_is_infinite():
    ld = al.UavLoad(1e6, 0.0, 0.1, 1e-12, N0, 2e6)
    limit = ld.snr_scale / math.log(2)  # rate cap as bandwidth grows without bound
    assert al.gamma_for(ld, 0.99 * ld.d_bits / limit) == math.inf
    assert math.isfinite(al.gamma_for(ld, 1.01 * ld.d_bits / limit))


def test_single_uav_takes_whole_band(rng):
    ld = random_load(rng)
    res = al.solve([ld])
    assert res.gammas[0] == pytest.approx(1.0, abs=1e-9)
    assert res.t_star == pytest.approx(ld.t_comp + ld.d_bits / ld.rate(1.0), rel=1e-9)


def test_identical_uavs_split_evenly(rng):
    ld = random_load(rng)
    res = al.solve([ld] * 5)
    np.testing.assert_allclose(res.gammas, 0.2, rtol=1e-9)


def test_heterogeneous_fixture_matches_grid_search():
    loads = [
        al.UavLoad(8e5, 0.05, 0.1, 3e-10, N0, 2e6),
        al.UavLoad(1.2e6, 0.20, 0.1, 5e-11, N0, 2e6),
        al.UavLoad(5e5, 0.10, 0.1, 1e-9, N0, 2e6),
    ]
    res = al.solve(loads)
    lo = max(ld.t_comp for ld in loads)

    def total(t):
        return sum(al.gamma_for(ld, t) for ld in loads)

    # coarse scan to bracket, then a 1e-5 s grid
    t = lo + 1e-3
    while total(t) > 1:
        t += 0.01
    grid = np.arange(max(lo + 1e-6, t - 0.01), t + 1e-5, 1e-5)
    first = next(g for g in grid if total(g) <= 1)
    assert abs(res.t_star - first) <= 1e-5


def test_solution_is_equalising_and_beats_random_splits(rng):
    loads = [random_load(rng) for _ in range(6)]
    res = al.solve(loads)
    times = al.completion_times(loads, res.gammas)
    assert abs(res.gamma_sum - 1) <= 1e-6
    assert np.max(times) - np.min(times) <= 1e-6 * res.t_star
    assert res.t_star > max(ld.t_comp for ld in loads)
    for _ in range(200):
        g = rng.dirichlet(np.ones(6))
        assert np.max(al.completion_times(loads, g)) >= res.t_star - 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_residual_strictly_decreasing(seed, n):
    rng = np.random.default_rng(seed)
    loads = [random_load(rng) for _ in range(n)]
    d, tc, a, bw = al._arrays(loads)
    ts = np.max(tc) + np.logspace(-2, 3, 60)
    r = np.array([np.sum(al._gammas(d, tc, a, bw, t)) for t in ts])
    finite = np.isfinite(r)
    assert np.all(np.diff(r[finite]) < 0)
    # once feasible, stays feasible
    assert np.all(finite[np.argmax(finite):])


def test_invalid_loads_name_the_uav(rng):
    good = random_load(rng)
    with pytest.raises(al.AllocationError, match="UAV 1"):
        al.solve([good, al.UavLoad(1e6, 0.1, 0.0, 1e-10, N0, 2e6)])
    with pytest.raises(al.AllocationError):
        al.solve([])
    with pytest.raises(ValueError):
        al.UavLoad(0.0, 0.1, 0.1, 1e-10)


def test_equal_allocation_baseline(rng):
    loads = [random_load(rng) for _ in range(4)]
    eq = al.equal_allocation(loads)
    np.testing.assert_allclose(eq.gammas, 0.25)
    assert eq.t_star == pytest.approx(max(al.completion_times(loads, eq.gammas)))
    assert al.solve(loads).t_star <= eq.t_star


def test_trace_csv(tmp_path, rng):
    res = al.solve([random_load(rng) for _ in range(3)], trace=True)
    assert res.trace
    al.write_trace_csv(tmp_path / "t.csv", res)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t_candidate,residual" and len(lines) == len(res.trace) + 1
