"""Walker-delta constellations, circular-orbit propagation and ground/HAP visibility.

Frame convention: inertial frame whose x-axis points at the Greenwich meridian
at t = 0 and whose z-axis is the Earth's rotation axis. The Earth is a sphere
of radius ``EARTH_RADIUS`` rotating at the sidereal rate.
"""
from __future__ import annotations

import bisect
import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .units import EARTH_MU, EARTH_RADIUS, EARTH_ROTATION_RATE, SIDEREAL_DAY


class SatelliteId(NamedTuple):
    shell_index: int
    orbit_index: int
    slot_index: int

    def __str__(self):
        return f"{self.shell_index}.{self.orbit_index}.{self.slot_index}"


class NodeKind(str, enum.Enum):
    GS = "GS"
    HAP = "HAP"


@dataclass(frozen=True)
class ShellSpec:
    """One shell of a Walker-delta constellation.

    ``raan_offsets_deg`` defaults to equal spacing over 360 degrees and
    ``phase_offset_deg`` (slot phase shift between adjacent orbits) defaults
    to Walker phasing with F = 1.
    """

    altitude_m: float
    inclination_deg: float
    num_orbits: int
    sats_per_orbit: int
    raan_offsets_deg: tuple | None = None
    phase_offset_deg: float | None = None

    def __post_init__(self):
        if self.num_orbits < 1 or self.sats_per_orbit < 1:
            raise ValueError("a shell needs at least one orbit and one satellite per orbit")
        if not self.altitude_m > 0:
            raise ValueError(f"altitude_m must be positive, got {self.altitude_m}")
        if not 0.0 <= self.inclination_deg <= 180.0:
            raise ValueError(f"inclination_deg out of range: {self.inclination_deg}")
        if self.raan_offsets_deg is None:
            raans = tuple(360.0 * l / self.num_orbits for l in range(self.num_orbits))
            object.__setattr__(self, "raan_offsets_deg", raans)
        else:
            object.__setattr__(self, "raan_offsets_deg", tuple(float(r) for r in self.raan_offsets_deg))
        if len(self.raan_offsets_deg) != self.num_orbits:
            raise ValueError("raan_offsets_deg must have one entry per orbit")
        if self.phase_offset_deg is None:
            phase = 360.0 / (self.num_orbits * self.sats_per_orbit)
            object.__setattr__(self, "phase_offset_deg", phase)

    @property
    def radius_m(self) -> float:
        return EARTH_RADIUS + self.altitude_m


@dataclass(frozen=True)
class GroundNode:
    name: str
    latitude_deg: float
    longitude_deg: float
    altitude_m: float = 0.0
    min_elevation_deg: float = 10.0
    kind: NodeKind = NodeKind.GS

    def __post_init__(self):
        if not -90.0 <= self.latitude_deg <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude_deg}")
        if not 0.0 <= self.min_elevation_deg < 90.0:
            raise ValueError(f"min_elevation_deg must lie in [0, 90): {self.min_elevation_deg}")
        object.__setattr__(self, "kind", NodeKind(self.kind))


@dataclass(frozen=True)
class StateVector:
    position: np.ndarray
    velocity: np.ndarray
    epoch_s: float


@dataclass(frozen=True)
class VisibilityWindow:
    sat: SatelliteId
    node: str
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def circular_speed(altitude_m: float) -> float:
    return math.sqrt(EARTH_MU / (EARTH_RADIUS + altitude_m))


def orbital_period(altitude_m: float) -> float:
    r = EARTH_RADIUS + altitude_m
    return 2.0 * math.pi * r / circular_speed(altitude_m)


@dataclass
class Constellation:
    """Satellites with their circular-orbit elements, indexed in SatelliteId order."""

    shells: tuple
    ids: list = field(default_factory=list)
    radius: np.ndarray = None  # m
    inclination: np.ndarray = None  # rad
    raan: np.ndarray = None  # rad
    anomaly0: np.ndarray = None  # argument of latitude at t=0, rad
    mean_motion: np.ndarray = None  # rad/s

    def __post_init__(self):
        self._index = {sat: i for i, sat in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def index(self, sat: SatelliteId) -> int:
        return self._index[sat]

    def orbits(self) -> list[tuple[int, int]]:
        seen = []
        for sat in self.ids:
            key = (sat.shell_index, sat.orbit_index)
            if not seen or seen[-1] != key:
                seen.append(key)
        return seen

    def orbit_members(self, shell_index: int, orbit_index: int) -> list[SatelliteId]:
        """Satellites of one orbit in slot order, i.e. along the direction of motion."""
        return [s for s in self.ids if s.shell_index == shell_index and s.orbit_index == orbit_index]

    def true_anomaly_deg(self, sat: SatelliteId) -> float:
        return math.degrees(self.anomaly0[self.index(sat)]) % 360.0

    def period(self, sat: SatelliteId) -> float:
        return 2.0 * math.pi / self.mean_motion[self.index(sat)]

    def positions(self, t, sats: Sequence[SatelliteId] | None = None) -> np.ndarray:
        """Inertial positions, shape ``(n_sats, n_times, 3)`` for array ``t``."""
        idx = slice(None) if sats is None else [self.index(s) for s in sats]
        t = np.atleast_1d(np.asarray(t, dtype=float))
        r = self.radius[idx][:, None]
        inc = self.inclination[idx][:, None]
        raan = self.raan[idx][:, None]
        u = self.anomaly0[idx][:, None] + self.mean_motion[idx][:, None] * t[None, :]
        cu, su = np.cos(u), np.sin(u)
        co, so = np.cos(raan), np.sin(raan)
        ci, si = np.cos(inc), np.sin(inc)
        x = r * (co * cu - so * su * ci)
        y = r * (so * cu + co * su * ci)
        z = r * (su * si)
        return np.stack([x, y, z], axis=-1)

    def position(self, sat: SatelliteId, t: float) -> np.ndarray:
        i = self.index(sat)
        r, inc, raan = self.radius[i], self.inclination[i], self.raan[i]
        u = self.anomaly0[i] + self.mean_motion[i] * t
        cu, su = math.cos(u), math.sin(u)
        co, so = math.cos(raan), math.sin(raan)
        ci, si = math.cos(inc), math.sin(inc)
        return np.array([r * (co * cu - so * su * ci), r * (so * cu + co * su * ci), r * su * si])


def build_walker_delta(specs: Sequence[ShellSpec]) -> Constellation:
    """Place satellites equally spaced in argument of latitude within each orbit."""
    ids, radius, inc, raan, anom, motion = [], [], [], [], [], []
    for s_idx, spec in enumerate(specs):
        r = spec.radius_m
        n = circular_speed(spec.altitude_m) / r
        for o_idx in range(spec.num_orbits):
            for k in range(spec.sats_per_orbit):
                ids.append(SatelliteId(s_idx, o_idx, k))
                radius.append(r)
                inc.append(math.radians(spec.inclination_deg))
                raan.append(math.radians(spec.raan_offsets_deg[o_idx]))
                u0 = 360.0 * k / spec.sats_per_orbit + o_idx * spec.phase_offset_deg
                anom.append(math.radians(u0 % 360.0))
                motion.append(n)
    return Constellation(
        shells=tuple(specs),
        ids=ids,
        radius=np.array(radius),
        inclination=np.array(inc),
        raan=np.array(raan),
        anomaly0=np.array(anom),
        mean_motion=np.array(motion),
    )


def propagate_satellite(constellation: Constellation, sat: SatelliteId, t: float) -> StateVector:
    if t < 0:
        raise ValueError("t must be non-negative")
    i = constellation.index(sat)
    r = constellation.radius[i]
    n = constellation.mean_motion[i]
    inc, raan = constellation.inclination[i], constellation.raan[i]
    u = constellation.anomaly0[i] + n * t
    cu, su = math.cos(u), math.sin(u)
    co, so = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inc), math.sin(inc)
    pos = np.array([r * (co * cu - so * su * ci), r * (so * cu + co * su * ci), r * su * si])
    v = r * n
    vel = v * np.array([-co * su - so * cu * ci, -so * su + co * cu * ci, cu * si])
    return StateVector(position=pos, velocity=vel, epoch_s=float(t))


def node_position(node: GroundNode, t):
    """Inertial position of an Earth-fixed node; vectorized over ``t``."""
    lat = math.radians(node.latitude_deg)
    radius = EARTH_RADIUS + node.altitude_m
    theta = math.radians(node.longitude_deg) + EARTH_ROTATION_RATE * np.asarray(t, dtype=float)
    rho = radius * math.cos(lat)
    z = radius * math.sin(lat) * np.ones_like(theta)
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=-1)


def elevation_deg(sat_pos: np.ndarray, node_pos: np.ndarray) -> np.ndarray:
    """Elevation of ``sat_pos`` above the local horizon of ``node_pos`` (broadcasts)."""
    d = sat_pos - node_pos
    up = node_pos / np.linalg.norm(node_pos, axis=-1, keepdims=True)
    s = np.sum(d * up, axis=-1) / np.linalg.norm(d, axis=-1)
    return np.degrees(np.arcsin(np.clip(s, -1.0, 1.0)))


def _elevation_at(constellation: Constellation, sat: SatelliteId, node: GroundNode, t: float) -> float:
    return float(elevation_deg(constellation.position(sat, t), node_position(node, t)))


def is_visible(constellation: Constellation, sat: SatelliteId, node: GroundNode, t: float) -> bool:
    return _elevation_at(constellation, sat, node, t) >= node.min_elevation_deg


def slant_range(constellation: Constellation, sat: SatelliteId, node: GroundNode, t: float) -> float:
    return distance(constellation.position(sat, t), node_position(node, t))


def distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def horizon_range(altitude_m: float, node_altitude_m: float = 0.0, elevation: float = 0.0) -> float:
    """Slant range to a satellite seen at ``elevation`` degrees (law of cosines)."""
    rs = EARTH_RADIUS + altitude_m
    rn = EARTH_RADIUS + node_altitude_m
    el = math.radians(elevation)
    # rs^2 = rn^2 + d^2 + 2 rn d sin(el)
    return -rn * math.sin(el) + math.sqrt((rn * math.sin(el)) ** 2 + rs**2 - rn**2)


def _bisect_crossing(f, lo: float, hi: float, tol: float) -> float:
    """Crossing of f from f(lo) < 0 to f(hi) >= 0 (or reverse); returns the visible side."""
    flo = f(lo) >= 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if (f(mid) >= 0) == flo:
            lo = mid
        else:
            hi = mid
    return hi if not flo else lo


def visibility_windows(
    constellation: Constellation,
    node: GroundNode,
    t0: float,
    t1: float,
    dt: float,
    refine: bool = True,
    tol: float = 1e-3,
    sats: Sequence[SatelliteId] | None = None,
) -> list[VisibilityWindow]:
    """Maximal contact windows of every satellite with ``node`` in ``[t0, t1]``.

    The elevation is sampled every ``dt`` seconds. With ``refine`` the window
    edges are located by bisection to ``tol`` seconds, and passes that fall
    entirely between two samples are recovered by maximizing the elevation
    around each sampled local maximum.
    """
    if not t0 < t1:
        raise ValueError("t0 must be smaller than t1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    sats = list(constellation.ids if sats is None else sats)
    if not sats:
        return []
    n = int(math.floor((t1 - t0) / dt))
    times = t0 + dt * np.arange(n + 1)
    if times[-1] < t1:
        times = np.append(times, t1)
    el = elevation_deg(constellation.positions(times, sats), node_position(node, times)[None, :, :])
    thr = node.min_elevation_deg
    windows = []
    for row, sat in enumerate(sats):
        f = lambda t, sat=sat: _elevation_at(constellation, sat, node, t) - thr
        e = el[row]
        vis = e >= thr
        intervals = _runs(times, vis)
        if refine:
            intervals = [_refine_edges(f, times, i, j, t0, t1, tol) for i, j in intervals]
            intervals.extend(_hidden_passes(f, times, e, vis, tol))
            intervals = _split_dips(f, intervals, times, e, vis, tol)
        else:
            intervals = [(times[i], times[j]) for i, j in intervals]
        for start, end in sorted(intervals):
            if end > start:
                windows.append(VisibilityWindow(sat, node.name, float(start), float(end)))
    windows.sort(key=lambda w: (w.start_s, w.sat))
    return windows


def _runs(times, vis):
    """Index pairs (first, last) of maximal runs of True samples."""
    runs = []
    i, n = 0, len(vis)
    while i < n:
        if vis[i]:
            j = i
            while j + 1 < n and vis[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def _refine_edges(f, times, i, j, t0, t1, tol):
    start = times[i] if i == 0 else _bisect_crossing(f, times[i - 1], times[i], tol)
    end = times[j] if j == len(times) - 1 else _bisect_crossing(f, times[j], times[j + 1], tol)
    return (max(start, t0), min(end, t1))


def _local_extrema(e, vis, maxima: bool):
    mid = e[1:-1]
    if maxima:
        ext = (mid >= e[:-2]) & (mid >= e[2:]) & ~vis[1:-1] & ~vis[:-2] & ~vis[2:]
    else:
        ext = (mid <= e[:-2]) & (mid <= e[2:]) & vis[1:-1] & vis[:-2] & vis[2:]
    return np.nonzero(ext)[0] + 1


def _hidden_passes(f, times, e, vis, tol):
    found = []
    for i in _local_extrema(e, vis, maxima=True):
        res = minimize_scalar(lambda t: -f(t), bounds=(times[i - 1], times[i + 1]), method="bounded",
                              options={"xatol": tol})
        peak = res.x
        if f(peak) >= 0:
            found.append((_bisect_crossing(f, times[i - 1], peak, tol), _bisect_crossing(f, peak, times[i + 1], tol)))
    return found


def _split_dips(f, intervals, times, e, vis, tol):
    """Split windows whose elevation dips below threshold between two visible samples."""
    cuts = []
    for i in _local_extrema(e, vis, maxima=False):
        res = minimize_scalar(f, bounds=(times[i - 1], times[i + 1]), method="bounded", options={"xatol": tol})
        if f(res.x) < 0:
            cuts.append((_bisect_crossing(f, times[i - 1], res.x, tol), _bisect_crossing(f, res.x, times[i + 1], tol)))
    out = []
    for start, end in intervals:
        lo = start
        for a, b in cuts:
            if start < a and b < end:
                out.append((lo, a))
                lo = b
        out.append((lo, end))
    return out


WINDOW_CSV_HEADER = ["sat_shell", "sat_orbit", "sat_slot", "node", "start_s", "end_s"]


def windows_to_csv(windows: Sequence[VisibilityWindow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(WINDOW_CSV_HEADER)
    for w in windows:
        writer.writerow([w.sat.shell_index, w.sat.orbit_index, w.sat.slot_index, w.node,
                         f"{w.start_s:.3f}", f"{w.end_s:.3f}"])
    return buf.getvalue()


class ContactPlan:
    """Precomputed contact windows per (satellite, node) for fast lookups."""

    def __init__(self, windows: Sequence[VisibilityWindow], horizon_s: float):
        self.horizon_s = horizon_s
        self._windows: dict = {}
        for w in windows:
            self._windows.setdefault((w.sat, w.node), []).append((w.start_s, w.end_s))
        for v in self._windows.values():
            v.sort()
        self._starts = {k: [a for a, _ in v] for k, v in self._windows.items()}

    @classmethod
    def build(cls, constellation: Constellation, nodes: Sequence[GroundNode], horizon_s: float,
              dt: float = 30.0) -> "ContactPlan":
        windows = []
        for node in nodes:
            windows.extend(visibility_windows(constellation, node, 0.0, horizon_s, dt))
        return cls(windows, horizon_s)

    def windows(self, sat: SatelliteId, node: str) -> list:
        return self._windows.get((sat, node), [])

    def visible(self, sat: SatelliteId, node: str, t: float) -> bool:
        return self.current_window(sat, node, t) is not None

    def current_window(self, sat, node, t):
        wins = self._windows.get((sat, node))
        if not wins:
            return None
        i = bisect.bisect_right(self._starts[(sat, node)], t) - 1
        if i >= 0 and wins[i][0] <= t < wins[i][1]:
            return wins[i]
        return None

    def next_contact(self, sat, node, t):
        """Window containing ``t`` or the first one after it, or None."""
        wins = self._windows.get((sat, node))
        if not wins:
            return None
        i = bisect.bisect_right(self._starts[(sat, node)], t) - 1
        if i >= 0 and t < wins[i][1]:
            return wins[i]
        if i + 1 < len(wins):
            return wins[i + 1]
        return None

    def finish_time(self, sat, node, t_start: float, duration: float):
        """Completion time of a transfer that needs ``duration`` s of contact.

        Interrupted transfers resume at the next contact. Returns
        ``(begin, end)`` or None if the horizon runs out first.
        """
        t = t_start
        remaining = duration
        begin = None
        while True:
            w = self.next_contact(sat, node, t)
            if w is None:
                return None
            t = max(t, w[0])
            if begin is None:
                begin = t
            avail = w[1] - t
            if remaining <= avail:
                return begin, t + remaining
            remaining -= avail
            t = w[1]


__all__ = [
    "SatelliteId", "NodeKind", "ShellSpec", "GroundNode", "StateVector", "VisibilityWindow",
    "Constellation", "ContactPlan", "build_walker_delta", "propagate_satellite", "node_position",
    "elevation_deg", "is_visible", "slant_range", "distance", "horizon_range", "visibility_windows",
    "circular_speed", "orbital_period", "windows_to_csv", "SIDEREAL_DAY",
]
