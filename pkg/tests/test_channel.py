import math

import numpy as np
import pytest

from uavmtfl import channel as ch

P = ch.ChannelParams()


def test_noise_density_conversion():
    assert P.n0 == pytest.approx(10 ** (-17.4) * 1e-3, rel=1e-12)
    assert ch.dbm_to_watts(30.0) == pytest.approx(1.0)


def test_los_probability_shape():
    assert ch.los_probability(90.0) > 0.99
    expected = 1.0 / (1.0 + 9.61 * math.exp(-0.16 * (90.0 - 9.61)))
    assert ch.los_probability(90.0) == pytest.approx(expected, rel=1e-14)
    p = ch.los_probability(np.array([30.0, 60.0, 89.0]))
    assert p[0] < p[1] < p[2]
    huge = ch.ChannelParams(a=1e6, b=0.16)
    assert ch.los_probability(45.0, huge) < 1e-6
    assert np.all((0 < ch.los_probability(np.linspace(0.1, 90, 50))) & (ch.los_probability(np.linspace(0.1, 90, 50)) < 1))


def test_channel_params_validation():
    with pytest.raises(ValueError):
        ch.ChannelParams(a=0.0)
    with pytest.raises(ValueError):
        ch.ChannelParams(eta_los=30.0, eta_nlos=20.0)
    with pytest.raises(ValueError):
        ch.ChannelParams(bandwidth_hz=0.0)


def test_gain_fixture_matches_hand_calculation():
    d, H = 200.0, 100.0
    horiz = math.sqrt(d * d - H * H)
    theta = math.degrees(math.asin(H / d))  # 30 degrees
    plos = 1.0 / (1.0 + 9.61 * math.exp(-0.16 * (theta - 9.61)))
    fspl = 20 * math.log10(4 * math.pi * 2e9 * d / 299_792_458.0)
    loss = fspl + plos * 1.0 + (1 - plos) * 20.0
    assert float(ch.path_gain(horiz, H)) == pytest.approx(10 ** (-loss / 10), rel=1e-9)


def test_inverse_square_law_at_fixed_elevation():
    g1 = float(ch.path_gain(20.0, 100.0))
    g2 = float(ch.path_gain(40.0, 200.0))
    assert g2 / g1 == pytest.approx(0.25, rel=0.05)


def test_overhead_is_best_and_gain_falls_with_distance():
    horiz = np.linspace(0, 500, 101)
    g = ch.path_gain(horiz, 100.0)
    assert np.argmax(g) == 0
    assert np.all(np.diff(g) < 0)


def test_topology_and_gain_matrix(rng):
    topo = ch.random_topology(2, 5, rng)
    assert topo.distances().shape == (2, 5)
    assert np.all(np.hypot(*topo.uav_positions.T) <= 500)
    G = ch.gain_matrix(topo, P)
    assert G[1, 3] == pytest.approx(ch.channel_gain(topo, P, 1, 3), rel=1e-15)
    assert np.all(np.isfinite(G)) and np.all(G > 0)
    with pytest.raises(ValueError):
        ch.Topology(np.array([[600.0, 0.0]]), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        ch.Topology(np.zeros((1, 2)), np.zeros((1, 2)), altitude=0.0)


def test_rate_examples():
    h = 1e-10
    assert float(ch.rate(1.0, 0.0, h)) == 0.0
    p = P.bandwidth_hz * P.n0 / h  # p h / (B N0) = 1
    assert float(ch.rate(1.0, p, h)) == pytest.approx(2e6, rel=1e-12)
    with pytest.raises(ValueError):
        ch.rate(0.0, 0.1, h)


def test_rate_increasing_in_power_by_finite_differences(rng):
    for _ in range(10):
        g, p, h = rng.uniform(0.05, 1), rng.uniform(0.01, 0.2), 10 ** rng.uniform(-11, -8)
        dp = 1e-7
        deriv = (float(ch.rate(g, p + dp, h)) - float(ch.rate(g, p - dp, h))) / (2 * dp)
        assert deriv > 0


def test_rate_concave_increasing_in_gamma(rng):
    for _ in range(10):
        p, h = rng.uniform(0.01, 0.2), 10 ** rng.uniform(-11, -8)
        gam = np.linspace(0.05, 1.0, 40)
        r = ch.rate(gam, p, h)
        assert np.all(np.diff(r) > 0)
        assert np.all(np.diff(r, 2) < 1e-9 * r.max())


def test_computation_cost():
    prof = ch.ComputeProfile(np.array([[1e4]]), np.array([1e9]), 1e-28, 5, 500)
    t, e = ch.comp_time_energy(prof, 0, 0)
    assert t == pytest.approx(0.025)
    assert e == pytest.approx(2.5e-3)
    fast = ch.ComputeProfile(np.array([[1e4]]), np.array([2e9]), 1e-28, 5, 500)
    t2, e2 = ch.comp_time_energy(fast, 0, 0)
    assert t2 == pytest.approx(t / 2) and e2 == pytest.approx(4 * e)
    double_k = ch.ComputeProfile(np.array([[1e4]]), np.array([1e9]), 1e-28, 10, 500)
    assert ch.comp_time_energy(double_k, 0, 0)[0] == pytest.approx(2 * t)
    with pytest.raises(ValueError):
        ch.ComputeProfile(np.array([[0.0]]), np.array([1e9]))


def test_communication_cost():
    assert ch.comm_time_energy(2e6, 2e6, 0.1) == pytest.approx((1.0, 0.1))
    with pytest.raises(ValueError):
        ch.comm_time_energy(1e6, 0.0, 0.1)
    h, p, Q = 1e-10, 0.1, 1e6
    t_full = Q / float(ch.rate(0.5, p, h))
    t_half = Q / float(ch.rate(0.25, p, h))
    assert 1.0 < t_half / t_full < 2.0


def test_check_energy(rng):
    ok, margin = ch.check_energy(ch.CostReport(0, 0, 0, 0), 1.0)
    assert ok and margin == 1.0
    ok, margin = ch.check_energy(ch.CostReport(0, 0, 0.4, 0.6), 1.0)
    assert ok and margin == pytest.approx(0.0, abs=1e-15)
    for _ in range(50):
        rep = ch.CostReport(*rng.uniform(0, 1, 4))
        e_max = rng.uniform(0, 2)
        assert ch.check_energy(rep, e_max)[0] == (rep.e_comp + rep.e_comm <= e_max)
        assert rep.energy == rep.e_comp + rep.e_comm


def test_max_feasible_power():
    h, gamma, Q = 1e-11, 0.2, 1e6

    def e_tx(p):
        return p * Q / float(ch.rate(gamma, p, h))

    assert ch.max_feasible_power(Q, gamma, h, 10.0, 0.1) == 0.1
    budget = 0.5 * e_tx(0.1)
    floor = Q * P.n0 * math.log(2) / h
    if budget > floor:
        p = ch.max_feasible_power(Q, gamma, h, budget, 0.1)
        assert 0 < p < 0.1
        assert e_tx(p) <= budget * (1 + 1e-12)
        assert e_tx(p * (1 + 1e-6)) > budget * (1 - 1e-9)
    assert ch.max_feasible_power(Q, gamma, h, floor * 0.5, 0.1) is None
    assert ch.max_feasible_power(Q, gamma, h, 0.0, 0.1) is None


def test_gains_csv(tmp_path):
    ch.write_gains_csv(tmp_path / "g.csv", [(0, np.array([[1e-10, 2e-10]]))])
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "round,ev,uav,gain"
    assert lines[2] == "0,0,1,2e-10"
