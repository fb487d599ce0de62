import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leofl.constellation import (ContactPlan, GroundNode, SatelliteId, ShellSpec, build_walker_delta,
                                 circular_speed, distance, elevation_deg, horizon_range, is_visible,
                                 node_position, orbital_period, propagate_satellite, slant_range,
                                 visibility_windows, windows_to_csv)
from leofl.units import EARTH_RADIUS, SIDEREAL_DAY


def test_paper_constellation_has_60_satellites(paper_constellation):
    assert len(paper_constellation) == 60
    assert len(set(paper_constellation.ids)) == 60
    assert paper_constellation.ids == sorted(paper_constellation.ids)
    assert len(paper_constellation.orbits()) == 6


def test_single_satellite_constellation():
    c = build_walker_delta([ShellSpec(500e3, 70.0, 1, 1)])
    assert c.ids == [SatelliteId(0, 0, 0)]
    assert c.true_anomaly_deg(SatelliteId(0, 0, 0)) == pytest.approx(0.0)


def test_equal_spacing_in_true_anomaly():
    c = build_walker_delta([ShellSpec(500e3, 70.0, 1, 4)])
    angles = [c.true_anomaly_deg(s) for s in c.ids]
    assert angles == pytest.approx([0.0, 90.0, 180.0, 270.0])


@pytest.mark.parametrize("bad", [dict(num_orbits=0), dict(sats_per_orbit=0), dict(altitude_m=0.0),
                                 dict(raan_offsets_deg=(0.0,), num_orbits=2)])
def test_shell_spec_rejects_invalid(bad):
    args = dict(altitude_m=500e3, inclination_deg=70.0, num_orbits=1, sats_per_orbit=1)
    args.update(bad)
    with pytest.raises(ValueError):
        ShellSpec(**args)


def test_orbital_speed_and_period():
    # v = sqrt(GM / r), T = 2 pi r / v with GM = 3.98e14 and r_E = 6371 km
    r500 = 6371e3 + 500e3
    assert circular_speed(500e3) == pytest.approx(math.sqrt(3.98e14 / r500), rel=1e-12)
    assert circular_speed(500e3) == pytest.approx(7610.9, abs=0.2)
    assert orbital_period(500e3) == pytest.approx(5672.0, abs=1.0)
    # closed form 2 pi sqrt(r^3 / GM) evaluated independently
    r1500 = 6371e3 + 1500e3
    assert orbital_period(1500e3) == pytest.approx(2 * math.pi * math.sqrt(r1500**3 / 3.98e14), rel=1e-12)
    assert orbital_period(1500e3) == pytest.approx(6954.8, abs=0.5)


def test_propagation_is_periodic_and_circular(paper_constellation):
    c = paper_constellation
    for sat in c.ids[::7]:
        period = c.period(sat)
        a = propagate_satellite(c, sat, 123.0)
        b = propagate_satellite(c, sat, 123.0 + period)
        assert np.linalg.norm(a.position - b.position) <= 1e-6 * np.linalg.norm(a.position)
        r = EARTH_RADIUS + [500e3, 1000e3, 1500e3][sat.shell_index]
        ts = np.linspace(0.0, period, 17)
        radii = np.linalg.norm(c.positions(ts, [sat])[0], axis=1)
        assert np.allclose(radii, r, rtol=1e-9, atol=0)
        assert np.linalg.norm(a.velocity) == pytest.approx(circular_speed(r - EARTH_RADIUS), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 3 * 86400.0), idx=st.integers(0, 59))
def test_periodicity_property(paper_constellation, t, idx):
    c = paper_constellation
    sat = c.ids[idx]
    p0 = c.position(sat, t)
    p1 = c.position(sat, t + c.period(sat))
    assert np.linalg.norm(p0 - p1) <= 1e-6 * np.linalg.norm(p0)


def test_node_position_conventions():
    pole = GroundNode("pole", 90.0, 0.0)
    p0, p1 = node_position(pole, 0.0), node_position(pole, 5000.0)
    assert np.allclose(p0, p1, atol=1e-6)
    assert abs(p0[0]) < 1e-6 and abs(p0[1]) < 1e-6
    eq = GroundNode("eq", 0.0, 0.0, altitude_m=25e3)
    assert np.allclose(node_position(eq, 0.0), [EARTH_RADIUS + 25e3, 0.0, 0.0], atol=1e-6)
    n = GroundNode("x", 37.95, -91.77)
    a, b = node_position(n, 1000.0), node_position(n, 1000.0 + SIDEREAL_DAY)
    assert np.linalg.norm(a - b) <= 1e-9 * np.linalg.norm(a)
    # circle of radius (r_E + alt) cos(lat) about the z axis
    assert math.hypot(a[0], a[1]) == pytest.approx(EARTH_RADIUS * math.cos(math.radians(37.95)), rel=1e-12)


def _equatorial_sat():
    c = build_walker_delta([ShellSpec(500e3, 0.0, 1, 1)])
    return c, c.ids[0]


def test_zenith_visible_and_antipode_not():
    c, sat = _equatorial_sat()
    under = GroundNode("under", 0.0, 0.0)
    opposite = GroundNode("opposite", 0.0, 180.0)
    assert is_visible(c, sat, under, 0.0)
    assert float(elevation_deg(c.position(sat, 0.0), node_position(under, 0.0))) == pytest.approx(90.0)
    assert not is_visible(c, sat, opposite, 0.0)


def test_slant_range_examples():
    c, sat = _equatorial_sat()
    under = GroundNode("under", 0.0, 0.0)
    assert slant_range(c, sat, under, 0.0) == pytest.approx(500e3, rel=1e-12)
    a, b = c.position(sat, 100.0), node_position(under, 100.0)
    assert distance(a, b) == distance(b, a)
    assert horizon_range(500e3) == pytest.approx(2574e3, abs=1e3)
    # law of cosines: r^2 = rE^2 + s^2 + 2 rE s sin(el)
    s = horizon_range(500e3, 0.0, 10.0)
    r = EARTH_RADIUS + 500e3
    assert r**2 == pytest.approx(EARTH_RADIUS**2 + s**2 + 2 * EARTH_RADIUS * s * math.sin(math.radians(10.0)))


def test_polar_orbit_over_pole_has_one_window_per_period():
    c = build_walker_delta([ShellSpec(800e3, 90.0, 1, 1)])
    pole = GroundNode("pole", 90.0, 0.0)
    period = c.period(c.ids[0])
    windows = visibility_windows(c, pole, 0.0, 3 * period, 60.0)
    assert len(windows) == 3
    centers = [(w.start_s + w.end_s) / 2 for w in windows]
    assert np.allclose(np.diff(centers), period, rtol=1e-6)


def test_empty_satellite_set_gives_no_windows(rolla_gs, paper_constellation):
    assert visibility_windows(paper_constellation, rolla_gs, 0.0, 3600.0, 10.0, sats=[]) == []


def test_refined_windows_do_not_depend_on_step(paper_constellation, rolla_gs):
    coarse = visibility_windows(paper_constellation, rolla_gs, 0.0, 43200.0, 10.0)
    fine = visibility_windows(paper_constellation, rolla_gs, 0.0, 43200.0, 1.0)
    assert [(w.sat, w.node) for w in coarse] == [(w.sat, w.node) for w in fine]
    for a, b in zip(coarse, fine):
        assert a.start_s == pytest.approx(b.start_s, abs=2e-3)
        assert a.end_s == pytest.approx(b.end_s, abs=2e-3)


def test_windows_are_sorted_disjoint_and_visible_inside(paper_constellation, rolla_gs):
    c = paper_constellation
    windows = visibility_windows(c, rolla_gs, 0.0, 86400.0, 30.0)
    assert [w.start_s for w in windows] == sorted(w.start_s for w in windows)
    per_sat = {}
    for w in windows:
        assert w.start_s < w.end_s
        per_sat.setdefault(w.sat, []).append(w)
    for sat, ws in per_sat.items():
        for a, b in zip(ws, ws[1:]):
            assert a.end_s < b.start_s
        for w in ws[:3]:
            for t in np.linspace(w.start_s + 0.01, w.end_s - 0.01, 7):
                assert is_visible(c, sat, rolla_gs, t)
            # maximal: just outside the window the satellite is below the mask
            if w.start_s > 0.0:
                assert not is_visible(c, sat, rolla_gs, w.start_s - 0.01)
            assert not is_visible(c, sat, rolla_gs, w.end_s + 0.01)


def test_every_satellite_contacts_rolla_within_48h(paper_constellation, rolla_gs):
    windows = visibility_windows(paper_constellation, rolla_gs, 0.0, 48 * 3600.0, 30.0)
    assert {w.sat for w in windows} == set(paper_constellation.ids)
    durations = np.array([w.duration_s for w in windows])
    # contacts last minutes, gaps between them are irregular
    assert durations.max() < 30 * 60 and np.median(durations) > 60
    starts = sorted(w.start_s for w in windows)
    assert np.std(np.diff(starts)) > 60.0


def test_windows_csv_header(paper_constellation, rolla_gs):
    text = windows_to_csv(visibility_windows(paper_constellation, rolla_gs, 0.0, 7200.0, 30.0))
    assert text.splitlines()[0] == "sat_shell,sat_orbit,sat_slot,node,start_s,end_s"


def test_contact_plan_resumes_interrupted_transfer():
    from leofl.constellation import VisibilityWindow

    sat = SatelliteId(0, 0, 0)
    plan = ContactPlan([VisibilityWindow(sat, "h", 0.0, 10.0), VisibilityWindow(sat, "h", 100.0, 200.0)], 1000.0)
    assert plan.finish_time(sat, "h", 5.0, 3.0) == (5.0, 8.0)
    # 5 s left in the first window, 7 s more after the gap
    assert plan.finish_time(sat, "h", 5.0, 12.0) == (5.0, 107.0)
    assert plan.finish_time(sat, "h", 150.0, 500.0) is None
    assert plan.next_contact(sat, "h", 50.0) == (100.0, 200.0)
