import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from leofl.channel import (LinkBudgetParams, NoiseParams, ShadowedRicianParams, noise_power, shl_budget,
                           sr_cdf)
from leofl.constellation import SatelliteId
from leofl.noma import (BerUser, NomaGroup, NomaUser, OutageMethod, OutageScenario, PowerMode,
                        allocate_power, capacity_sweep, gamma_threshold, oma_exchange_time, oma_rates,
                        order_by_gain, outage_closed_form, outage_fs_closed, outage_monte_carlo,
                        outage_ns_closed, outage_system_closed, qpsk_awgn_ber, qpsk_ber_monte_carlo,
                        sinr, sum_rate, with_power)
from leofl.units import dbm_to_watts


def _user(i, gain, a=0.0, d=None):
    return NomaUser(SatelliteId(0, 0, i), gain=gain, power_coeff=a, distance_m=d)


def _group(gains, coeffs, rho):
    return NomaGroup(tuple(_user(i, g, a) for i, (g, a) in enumerate(zip(gains, coeffs))), rho)


def test_gamma_threshold_forms():
    assert gamma_threshold(1.0) == 3.0
    assert gamma_threshold(1.0, "shannon") == 1.0


def test_order_by_gain():
    g = order_by_gain([_user(0, 0.5), _user(1, 1.0), _user(2, 0.7)])
    assert [u.gain for u in g.users] == [1.0, 0.7, 0.5]
    tie = order_by_gain([_user(2, 1.0), _user(0, 1.0), _user(1, 1.0)])
    assert [u.sat.slot_index for u in tie.users] == [0, 1, 2]
    assert len(order_by_gain([_user(0, 0.3)])) == 1


def test_allocation_examples():
    assert allocate_power([_user(0, 1.0)]) == [1.0]
    assert allocate_power([_user(0, 1.0), _user(1, 0.5)]) == [0.25, 0.75]
    a = allocate_power([_user(0, 4.0), _user(1, 2.0), _user(2, 1.0)])
    assert a == pytest.approx([1 / 7, 2 / 7, 4 / 7])
    assert allocate_power([_user(0, 0.0), _user(1, 0.0), _user(2, 0.0)]) == pytest.approx([1 / 3] * 3)
    with pytest.raises(ValueError):
        allocate_power([])
    with pytest.raises(ValueError):
        NomaGroup((_user(0, 1.0, 0.7), _user(1, 1.0, 0.7)), 1.0)


@settings(max_examples=100, deadline=None)
@given(gains=st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=10),
       dists=st.lists(st.floats(1e5, 3e6), min_size=10, max_size=10), scale=st.floats(0.1, 10.0))
def test_allocation_properties(gains, dists, scale):
    users = list(order_by_gain([_user(i, g, d=d) for i, (g, d) in enumerate(zip(gains, dists))]).users)
    a = allocate_power(users, PowerMode.STATIC)
    assert sum(a) <= 1 + 1e-12
    # weaker users never get less power than stronger ones
    assert all(x <= y + 1e-12 for x, y in zip(a, a[1:]))
    b = allocate_power(users, PowerMode.DYNAMIC)
    assert sum(b) <= 1 + 1e-12
    scaled = [NomaUser(u.sat, u.gain, distance_m=u.distance_m * scale) for u in users]
    assert allocate_power(scaled, PowerMode.DYNAMIC) == pytest.approx(b, rel=1e-12)


def test_sinr_and_sum_rate_hand_example():
    assert sinr(_group([1.0], [1.0], 10.0), 0) == pytest.approx(10.0)
    g = _group([1.0, 0.5], [0.25, 0.75], 10.0)
    assert sinr(g, 0) == pytest.approx(2.5)
    assert sinr(g, 1) == pytest.approx(3.75 / 3.5)
    r = sum_rate(g)
    assert r.per_user == pytest.approx((math.log2(3.5), math.log2(1 + 3.75 / 3.5)))
    assert r.per_user[0] == pytest.approx(1.8074, abs=1e-4)
    assert r.per_user[1] == pytest.approx(1.0507, abs=1e-4)
    assert r.total == pytest.approx(math.log2(7.25))
    assert sum(r.per_user) == pytest.approx(r.total, abs=1e-12)
    with pytest.raises(IndexError):
        sinr(g, 2)


def test_sinr_decreases_with_stronger_user_power():
    lo = _group([1.0, 0.5], [0.2, 0.75], 10.0)
    hi = _group([1.0, 0.5], [0.25, 0.75], 10.0)
    assert sinr(hi, 1) < sinr(lo, 1)


def test_high_snr_limit():
    g = _group([1.0, 0.3], [0.25, 0.75], 1e6)
    assert abs(sum_rate(g, high_snr=True).total - sum_rate(g).total) < 1e-5


@settings(max_examples=300, deadline=None)
@given(gains=st.lists(st.floats(1e-4, 1e2), min_size=1, max_size=10), log_rho=st.floats(-3, 8))
def test_telescoping_identity(gains, log_rho):
    group = order_by_gain([_user(i, g) for i, g in enumerate(gains)], snr_rho=10**log_rho)
    group = with_power(group, allocate_power(group.users))
    r = sum_rate(group)
    assert math.fsum(r.per_user) == pytest.approx(r.total, abs=1e-10)


def test_single_user_noma_equals_oma():
    g = _group([0.8], [1.0], 5.0)
    assert oma_rates(g)[0] == pytest.approx(sum_rate(g).total)


def test_noma_beats_oma_for_unequal_gains():
    rng = np.random.default_rng(5)
    for _ in range(100):
        group = order_by_gain([_user(i, g) for i, g in enumerate(rng.exponential(1.0, 4))], snr_rho=100.0)
        group = with_power(group, allocate_power(group.users))
        assert sum_rate(group).total >= sum(oma_rates(group)) - 1e-12


def test_outage_closed_forms_structure(sr_params):
    p = sr_params
    assert outage_ns_closed(p, 50.0, 0.25, 3.0) == pytest.approx(float(sr_cdf(3.0 / (0.25 * 50.0), p)),
                                                                  abs=1e-12)
    assert outage_fs_closed(p, 50.0, 0.75, 3.0) == pytest.approx(outage_ns_closed(p, 50.0, 0.75, 3.0))
    assert outage_fs_closed(p, 50.0, 0.75, 3.0, [(1e9, 0.25)]) == pytest.approx(1.0)
    assert outage_ns_closed(p, 1e12, 0.25, 3.0) < 1e-10
    assert outage_system_closed(0.0, 0.0) == 0.0
    assert outage_system_closed(0.01, 0.02) == pytest.approx(0.0298)
    sc = OutageScenario(p, p, 40.0, 20.0, interferer_terms=((0.5, 0.25),))
    cf = outage_closed_form(sc)
    assert cf.op_system >= max(cf.op_ns, cf.op_fs)
    assert cf.method is OutageMethod.CLOSED_FORM


@settings(max_examples=60, deadline=None)
@given(rho=st.floats(1e-2, 1e6), k=st.floats(1.01, 100.0), a=st.floats(0.05, 0.9), gam=st.floats(0.1, 10.0))
def test_ns_outage_monotone(sr_params, rho, k, a, gam):
    p = sr_params
    base = outage_ns_closed(p, rho, a, gam)
    assert 0.0 <= base <= 1.0
    assert outage_ns_closed(p, rho * k, a, gam) <= base + 1e-15
    assert outage_ns_closed(p, rho, min(1.0, a * k), gam) <= base + 1e-15


def test_monte_carlo_zero_threshold_and_determinism(sr_params):
    sc0 = OutageScenario(sr_params, sr_params, 10.0, 10.0, gamma_ns=0.0, gamma_fs=0.0)
    mc = outage_monte_carlo(sc0, 20_000, seed=1)
    assert mc.op_ns == mc.op_fs == mc.op_system == 0.0
    sc = OutageScenario(sr_params, sr_params, 30.0, 10.0, interferer_terms=((0.5, 0.25),))
    a = outage_monte_carlo(sc, 150_000, seed=4)
    assert a == outage_monte_carlo(sc, 150_000, seed=4)
    # batches are seeded by index, so threading does not change the counts
    assert a == outage_monte_carlo(sc, 150_000, seed=4, workers=3)
    assert a.method is OutageMethod.MONTE_CARLO and a.trials == 150_000


@pytest.mark.parametrize("rho", [3.0, 10.0, 30.0, 100.0, 300.0])
def test_conditional_monte_carlo_matches_closed_form(sr_params, rho):
    sc = OutageScenario(sr_params, sr_params, rho, rho, 0.25, 0.75, 3.0, 3.0, ((0.4, 0.25),))
    cf = outage_closed_form(sc)
    mc = outage_monte_carlo(sc, 200_000, seed=9)
    for p_cf, p_mc in ((cf.op_ns, mc.op_ns), (cf.op_fs, mc.op_fs), (cf.op_system, mc.op_system)):
        se = math.sqrt(max(p_cf * (1 - p_cf), 1e-12) / mc.trials)
        assert abs(p_mc - p_cf) <= 3 * se


def test_unconditional_fs_outage_exceeds_zero_interference(sr_params):
    sc = OutageScenario(sr_params, sr_params, 100.0, 100.0)
    mc = outage_monte_carlo(sc, 100_000, seed=2, conditional=False)
    assert mc.op_fs > outage_fs_closed(sr_params, 100.0, 0.75, 3.0)


def test_exchange_time():
    bits = 528e6 * 8
    assert oma_exchange_time(bits, 140e6, 0.0) == pytest.approx(30.17, rel=5e-3)
    assert oma_exchange_time(bits, 160e6, 0.0) == pytest.approx(26.4, rel=5e-3)
    assert oma_exchange_time(0.0, 1e6, 1000e3) == pytest.approx(3.336e-3, rel=1e-3)


def test_qpsk_noiseless_and_awgn():
    assert qpsk_ber_monte_carlo([BerUser(1.0)], 10.0, 10_000, seed=0, noiseless=True) == [0.0]
    for rho in (1.0, 4.0):
        trials = 200_000
        ber = qpsk_ber_monte_carlo([BerUser(1.0)], rho, trials, seed=0)[0]
        ref = qpsk_awgn_ber(rho)
        assert ref == pytest.approx(stats.norm.sf(math.sqrt(rho)))
        assert abs(ber - ref) <= 3 * math.sqrt(ref * (1 - ref) / (2 * trials))


def test_qpsk_ber_nonincreasing_in_power(sr_params):
    users = [BerUser(0.25, sr_params), BerUser(0.75, sr_params)]
    trials = 20_000
    sweep = np.linspace(-40.0, 40.0, 10)
    curves = np.array([qpsk_ber_monte_carlo(users, 10 ** (p / 10), trials, seed=6) for p in sweep])
    se = np.sqrt(np.maximum(curves * (1 - curves), 1e-6) / (2 * trials))
    for k in range(2):
        assert np.all(curves[1:, k] <= curves[:-1, k] + 3 * se[:-1, k])
    assert curves[-1].max() < curves[0].min()


def test_capacity_single_user_and_monotone_in_rho(sr_params):
    one = capacity_sweep([1], [sr_params], [100.0], target_rate=0.0, seed=0, trials=50)[0]
    assert one.served == 1.0
    lo = capacity_sweep([4], [sr_params], [10.0], 1.0, seed=0, trials=50, enforce_feasibility=False)[0]
    hi = capacity_sweep([4], [sr_params], [1000.0], 1.0, seed=0, trials=50, enforce_feasibility=False)[0]
    assert hi.sum_rate >= lo.sum_rate


def test_capacity_example_at_30_dbm(sr_params):
    """At 30 dBm the network should serve at least 10 satellites at >= 10 (+-4) bps/Hz.

    Under the inverse-gain ladder every served user after the first sees an
    SINR of at most 1/(k-1), below gamma_th = 3, so this example cannot be met;
    it is kept as stated.
    """
    link = LinkBudgetParams(20e9, 6.98, 6.98, 0.0, 0.5, 1e-3)
    sigma2 = noise_power(NoiseParams(354.81, 50e6))
    rhos = [dbm_to_watts(30.0) * shl_budget(link, alt) / sigma2 for alt in (500e3, 1000e3, 1500e3)]
    points = capacity_sweep([10, 12, 14], [sr_params] * 3, rhos, 1.0, seed=0, trials=100)
    best = max(points, key=lambda pt: pt.served)
    assert best.served >= 10 and best.sum_rate >= 10.0 - 4.0
