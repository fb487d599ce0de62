"""Discrete-event simulation of synchronous FL rounds over a ring of HAPs.

A round has three phases:

1. the source HAP forwards the global model around the ring; every HAP
   broadcasts it to the satellites it sees at that moment (these become
   chain *heads*; an orbit with no visible satellite gets its head at its
   first later contact);
2. each head trains and starts a chain along its orbit; every following
   satellite up to the next head trains, adds its data-weighted model to
   the running sum and forwards it over the intra-orbit link; the finished
   sum is uplinked with NOMA by the last satellite if it is visible,
   otherwise by the next head;
3. every HAP forwards what it received back to the source along the ring;
   the source deduplicates by contributor IDs, waits until every satellite
   is covered and aggregates.
"""
from __future__ import annotations

import enum
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channel import NoiseParams, LinkBudgetParams, ShadowedRicianParams, noise_power, shl_budget
from .constellation import (
    Constellation,
    ContactPlan,
    GroundNode,
    NodeKind,
    SatelliteId,
    distance,
    node_position,
)
from .fl import Dataset, DatasetShard, TrainConfig, evaluate, fedavg, local_train, payload_bits
from .noma import NomaUser, PowerMode, allocate_power, gamma_threshold, order_by_gain, sinr, with_power
from .seeding import derive_rng
from .units import SPEED_OF_LIGHT, dbm_to_watts


class ScenarioError(RuntimeError):
    """The scenario cannot complete a round (e.g. an orbit is never visible)."""


# ---------------------------------------------------------------------------
# HAP ring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HapRing:
    haps: tuple  # node names in ring order
    source_index: int
    sink_index: int
    ihl_rate_bps: float
    hop_delay_s: tuple = ()  # propagation delay of hop i -> i+1 (mod H)

    def __len__(self):
        return len(self.haps)

    def path(self, src: int, dst: int) -> list[int]:
        """Node indices from src to dst along the shorter ring direction (ties go forward)."""
        h = len(self.haps)
        fwd = (dst - src) % h
        step = 1 if fwd <= h - fwd else -1
        out = [src]
        while out[-1] != dst:
            out.append((out[-1] + step) % h)
        return out

    def hops(self, src: int, dst: int) -> int:
        return len(self.path(src, dst)) - 1

    def path_time(self, src: int, dst: int, bits: float, instant: bool = False) -> float:
        if instant:
            return 0.0
        p = self.path(src, dst)
        h = len(self.haps)
        t = 0.0
        for a, b in zip(p, p[1:]):
            delay = self.hop_delay_s[a] if (b - a) % h == 1 else self.hop_delay_s[b]
            t += bits / self.ihl_rate_bps + delay
        return t


def build_ring(nodes: Sequence[GroundNode], ihl_rate_bps: float) -> HapRing:
    """Ring ordered by longitude; the first configured node is the source."""
    if not nodes:
        raise ScenarioError("at least one parameter-server node is required")
    ordered = sorted(nodes, key=lambda n: (n.longitude_deg, n.name))
    names = tuple(n.name for n in ordered)
    src = names.index(nodes[0].name)
    h = len(names)
    sink = max(range(h), key=lambda i: (min((i - src) % h, (src - i) % h), -((i - src) % h)))
    delays = []
    for i in range(h):
        a, b = ordered[i], ordered[(i + 1) % h]
        delays.append(distance(node_position(a, 0.0), node_position(b, 0.0)) / SPEED_OF_LIGHT)
    return HapRing(names, src, sink, ihl_rate_bps, tuple(delays))


def propagate_global(ring: HapRing, model_bits: float, t0: float, instant: bool = False) -> dict:
    """Receipt time of the global model at each HAP when the source sends at ``t0``."""
    return {name: t0 + ring.path_time(ring.source_index, i, model_bits, instant)
            for i, name in enumerate(ring.haps)}


# ---------------------------------------------------------------------------
# Sub-orbital models and aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubOrbitalModel:
    """Running sum of data-weighted local models of one chain.

    ``weights`` already carries the factors |D_k| / |D_orbit|.
    """

    weights: np.ndarray
    contributors: frozenset
    orbit: tuple
    round: int
    carried_size: int

    def __post_init__(self):
        if not self.contributors:
            raise ValueError("a sub-orbital model needs at least one contributor")
        if any((s.shell_index, s.orbit_index) != self.orbit for s in self.contributors):
            raise ValueError("contributors must all belong to the model's orbit")


@dataclass(frozen=True)
class InboxEntry:
    model: SubOrbitalModel
    hap: str
    received_s: float


def reverse_propagate(ring: HapRing, collected: dict, bits_of: Callable[[SubOrbitalModel], float],
                      instant: bool = False) -> list[InboxEntry]:
    """Forward each HAP's collected (model, time) pairs to the source; returns the source inbox."""
    inbox = []
    for hap, items in collected.items():
        idx = ring.haps.index(hap)
        for model, t in items:
            arrival = t + ring.path_time(idx, ring.source_index, bits_of(model), instant)
            inbox.append(InboxEntry(model, hap, arrival))
    inbox.sort(key=lambda e: e.received_s)
    return inbox


@dataclass(frozen=True)
class AggregationResult:
    global_model: np.ndarray | None
    waited: bool
    kept: tuple
    missing: frozenset
    orbit_weights: dict


def dedup_orbit(entries: Sequence[InboxEntry]) -> list[InboxEntry]:
    """Keep models with the largest contributor sets first, earliest receipt on ties."""
    ranked = sorted(entries, key=lambda e: (-len(e.model.contributors), e.received_s,
                                            sorted(e.model.contributors)))
    kept, covered = [], set()
    for e in ranked:
        if covered.isdisjoint(e.model.contributors):
            kept.append(e)
            covered |= e.model.contributors
    return kept


def aggregate_round(inbox: Sequence[InboxEntry], sizes: dict, round_index: int) -> AggregationResult:
    """Sort by orbit, filter redundant models, check balance and aggregate.

    ``sizes`` maps every satellite of the constellation to its data size.
    The result is ``sum_l (|D_l| / |D|) * sum_U w_U``; since each ``w_U``
    carries |D_k| / |D_l| weights, every satellite ends up with weight
    |D_k| / |D|, the same as plain FedAvg over the whole constellation.
    """
    by_orbit: dict = {}
    for sat in sizes:
        by_orbit.setdefault((sat.shell_index, sat.orbit_index), [])
    for e in inbox:
        if e.model.round == round_index:
            by_orbit.setdefault(e.model.orbit, []).append(e)
    kept, missing = [], set()
    for orbit, entries in sorted(by_orbit.items()):
        chosen = dedup_orbit(entries)
        kept.extend(chosen)
        members = {s for s in sizes if (s.shell_index, s.orbit_index) == orbit}
        covered = set().union(*(e.model.contributors for e in chosen)) if chosen else set()
        missing |= members - covered
    orbit_sizes = {}
    for sat, n in sizes.items():
        key = (sat.shell_index, sat.orbit_index)
        orbit_sizes[key] = orbit_sizes.get(key, 0) + n
    total = float(sum(orbit_sizes.values()))
    weights = {o: n / total for o, n in orbit_sizes.items()}
    if missing:
        return AggregationResult(None, True, tuple(kept), frozenset(missing), weights)
    out = None
    for orbit in sorted(orbit_sizes):
        orbit_sum = None
        for e in kept:
            if e.model.orbit == orbit:
                orbit_sum = e.model.weights.copy() if orbit_sum is None else orbit_sum + e.model.weights
        term = weights[orbit] * orbit_sum
        out = term if out is None else out + term
    return AggregationResult(out, False, tuple(kept), frozenset(), weights)


def effective_weights(kept: Sequence[InboxEntry], sizes: dict) -> dict:
    """Per-satellite weight inside its orbit implied by the kept models."""
    orbit_sizes = {}
    for sat, n in sizes.items():
        key = (sat.shell_index, sat.orbit_index)
        orbit_sizes[key] = orbit_sizes.get(key, 0) + n
    out = {}
    for e in kept:
        for sat in e.model.contributors:
            out[sat] = out.get(sat, 0.0) + sizes[sat] / orbit_sizes[e.model.orbit]
    return out


# ---------------------------------------------------------------------------
# Event engine
# ---------------------------------------------------------------------------


def uplink_duration(model_bits: float, rate_bps_hz: float, bandwidth_hz: float, slant_range_m: float) -> float:
    """Transmission time at the NOMA rate plus propagation delay."""
    if model_bits < 0 or slant_range_m < 0:
        raise ValueError("model size and range must be non-negative")
    if model_bits == 0:
        return slant_range_m / SPEED_OF_LIGHT
    if rate_bps_hz <= 0 or bandwidth_hz <= 0:
        raise ValueError("rate and bandwidth must be positive")
    return model_bits / (rate_bps_hz * bandwidth_hz) + slant_range_m / SPEED_OF_LIGHT


class EventKind(enum.IntEnum):
    # value doubles as the tie-break rank at equal timestamps
    HAP_FORWARD = 0
    HAP_BROADCAST = 1
    DOWNLINK_DONE = 2
    SAT_TRAIN_DONE = 3
    ISL_HOP = 4
    UPLINK_START = 5
    UPLINK_DONE = 6
    REVERSE_FORWARD = 7
    AGGREGATE_READY = 8


@dataclass(order=True)
class SimEvent:
    at_s: float
    kind: EventKind
    key: tuple
    seq: int
    payload: dict = field(compare=False, default_factory=dict)


class EventQueue:
    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0.0

    def push(self, at_s: float, kind: EventKind, key: tuple = (), **payload):
        if at_s < self.now - 1e-9:
            raise RuntimeError(f"event {kind.name} scheduled in the past ({at_s} < {self.now})")
        heapq.heappush(self._heap, SimEvent(float(at_s), kind, key, self._seq, payload))
        self._seq += 1

    def pop(self) -> SimEvent:
        ev = heapq.heappop(self._heap)
        self.now = ev.at_s
        return ev

    def __len__(self):
        return len(self._heap)


class AlwaysVisible:
    """Contact plan in which every satellite sees every node at all times."""

    horizon_s = math.inf

    def visible(self, sat, node, t):
        return True

    def next_contact(self, sat, node, t):
        return (t, math.inf)

    def finish_time(self, sat, node, t_start, duration):
        return t_start, t_start + duration

    def windows(self, sat, node):
        return [(0.0, math.inf)]


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkSetup:
    """Radio parameters used to turn NOMA SINRs into uplink durations."""

    fading: tuple  # ShadowedRicianParams per shell
    noise: NoiseParams
    link: LinkBudgetParams | None  # None: rho = P_s / sigma^2 without path loss
    p_s_dbm: float = 40.0
    power_mode: PowerMode = PowerMode.STATIC
    outage_retry: bool = False
    target_rate: float = 1.0
    gamma_form: str = "paper"
    retry_backoff_s: float = 1.0


@dataclass(frozen=True)
class Termination:
    target_accuracy: float | None = None
    target_loss: float | None = None
    max_rounds: int = 50
    max_sim_time_s: float = 3 * 86400.0


@dataclass(frozen=True)
class ProtocolParams:
    isl_rate_bps: float = 100e6
    ihl_rate_bps: float = 500e6
    broadcast_rate_bps: float = 100e6
    direction: int = 1  # +1 follows increasing slot index, -1 the opposite
    train_s_per_sample: float = 0.01  # per local epoch
    payload_override_bits: int | None = None
    instant_links: bool = False


@dataclass
class RoundRecord:
    round: int
    global_model: np.ndarray
    sim_time_s: float
    bytes_transmitted: int
    contributors_count: int
    loss: float
    accuracy: float
    deferrals: int = 0  # aggregation passes deferred while every orbit had reported something


ROUND_CSV_HEADER = ["round", "sim_time_s", "loss", "accuracy", "bytes_tx", "contributors"]


def rounds_to_csv(records: Sequence[RoundRecord]) -> str:
    import csv

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_CSV_HEADER)
    for r in records:
        w.writerow([r.round, f"{r.sim_time_s:.6f}", f"{r.loss:.12g}", f"{r.accuracy:.6f}",
                    r.bytes_transmitted, r.contributors_count])
    return buf.getvalue()


class Simulation:
    """Runs FL rounds as discrete events; see the module docstring for the phases."""

    def __init__(self, constellation: Constellation, nodes: Sequence[GroundNode],
                 shards: dict, classes: int, train: TrainConfig, params: ProtocolParams,
                 termination: Termination, seed: int, test_set: Dataset | None = None,
                 link: LinkSetup | None = None, contacts=None, initial_model: np.ndarray | None = None,
                 trace: list | None = None):
        if len(constellation) == 0:
            raise ScenarioError("the constellation has no satellites")
        missing = [s for s in constellation.ids if s not in shards]
        if missing:
            raise ScenarioError(f"satellites without a data shard: {missing[:5]}")
        self.const = constellation
        self.nodes = {n.name: n for n in nodes}
        self.node_order = [n.name for n in nodes]
        self.ring = build_ring(nodes, params.ihl_rate_bps)
        self.shards = shards
        self.classes = classes
        self.train_cfg = train
        self.params = params
        self.term = termination
        self.seed = seed
        self.test_set = test_set
        self.link = link
        self.trace = trace
        self.sizes = {s: len(shards[s]) for s in constellation.ids}
        self.orbit_size = {}
        for s, n in self.sizes.items():
            key = (s.shell_index, s.orbit_index)
            self.orbit_size[key] = self.orbit_size.get(key, 0) + n
        dim = next(iter(shards.values())).features.shape[1]
        self.model_size = (dim + 1) * classes
        self.w0 = np.zeros(self.model_size) if initial_model is None else np.asarray(initial_model, float)
        if contacts is None:
            contacts = ContactPlan.build(constellation, nodes, termination.max_sim_time_s)
        self.contacts = contacts
        self._check_reachable()

    # -- helpers -------------------------------------------------------------

    def _check_reachable(self):
        for orbit in self.const.orbits():
            members = self.const.orbit_members(*orbit)
            if not any(self.contacts.windows(s, n) for s in members for n in self.node_order):
                raise ScenarioError(
                    f"orbit {orbit} is never visible to any parameter server within "
                    f"{self.contacts.horizon_s:.0f} s; its satellites cannot contribute")

    def _bits(self, contributors: int = 1) -> int:
        return payload_bits(self.model_size, contributors, self.params.payload_override_bits)

    def _log(self, t, kind, src, dst, nbytes):
        if self.trace is not None:
            self.trace.append({"t": round(t, 9), "kind": kind, "src": str(src), "dst": str(dst),
                               "bytes": int(nbytes)})

    def _range(self, sat, node_name, t) -> float:
        return distance(self.const.position(sat, t), node_position(self.nodes[node_name], t))

    def _train_time(self, sat) -> float:
        if self.params.instant_links:
            return 0.0
        return self.params.train_s_per_sample * self.train_cfg.local_epochs * self.sizes[sat]

    def _isl_time(self, sat, bits) -> float:
        if self.params.instant_links:
            return 0.0
        i = self.const.index(sat)
        k = len(self.const.orbit_members(sat.shell_index, sat.orbit_index))
        chord = 2.0 * self.const.radius[i] * math.sin(math.pi / k) if k > 1 else 0.0
        return bits / self.params.isl_rate_bps + chord / SPEED_OF_LIGHT

    def _successor(self, sat):
        members = self.const.orbit_members(sat.shell_index, sat.orbit_index)
        pos = members.index(sat)
        return members[(pos + self.params.direction) % len(members)]

    def _uplink_rate(self, hap: str, sat, t: float) -> float:
        """NOMA rate (bits/s/Hz) of ``sat`` within the group currently uplinking to ``hap``."""
        active = [s for s, (b, e) in self._active[hap].items() if b <= t < e and s != sat]
        users = []
        rho = dbm_to_watts(self.link.p_s_dbm) / noise_power(self.link.noise)
        for s in active + [sat]:
            gain = self.link.fading[s.shell_index].mean
            d = self._range(s, hap, t)
            if self.link.link is not None:
                gain *= shl_budget(self.link.link, d)
            users.append(NomaUser(s, gain=gain, shell_index=s.shell_index, distance_m=d))
        group = order_by_gain(users, snr_rho=rho)
        group = with_power(group, allocate_power(group.users, self.link.power_mode))
        k = [u.sat for u in group.users].index(sat)
        return math.log2(1.0 + sinr(group, k))

    def _uplink_fails(self, sat, t, attempt) -> bool:
        if self.link is None or not self.link.outage_retry:
            return False
        rng = derive_rng(self.seed, "uplink", self._round, tuple(sat), attempt)
        from .channel import sr_sample

        h = float(sr_sample(self.link.fading[sat.shell_index], rng))
        rho = dbm_to_watts(self.link.p_s_dbm) / noise_power(self.link.noise)
        gain = h
        if self.link.link is not None:
            best = min(self.node_order, key=lambda n: self._range(sat, n, t))
            gain *= shl_budget(self.link.link, self._range(sat, best, t))
        return rho * gain < gamma_threshold(self.link.target_rate, self.link.gamma_form)

    # -- main loop -----------------------------------------------------------

    def run(self) -> list[RoundRecord]:
        records = []
        w = self.w0.copy()
        t = 0.0
        for beta in range(self.term.max_rounds):
            w, t, rec = self._run_round(w, t, beta)
            records.append(rec)
            if self._done(rec):
                break
        return records

    def _done(self, rec: RoundRecord) -> bool:
        if self.term.target_accuracy is not None and rec.accuracy >= self.term.target_accuracy:
            return True
        if self.term.target_loss is not None and rec.loss <= self.term.target_loss:
            return True
        return rec.sim_time_s >= self.term.max_sim_time_s

    def _run_round(self, w_global, t_start, beta):
        self._round = beta
        q = EventQueue()
        q.now = t_start
        instant = self.params.instant_links
        bits = self._bits()
        self._bytes = 0
        self._active = {n: {} for n in self.node_order}
        heads: dict = {}  # sat -> (time it got the model from a HAP, hap)
        holders: set = set()  # satellites that hold w^beta
        local: dict = {}
        chains: dict = {}  # sat -> partial SubOrbitalModel it carries
        inbox: list = []
        collected = {n: [] for n in self.node_order}
        pending_broadcasts = len(self.ring.haps)
        deferrals = 0
        recv_times = propagate_global(self.ring, bits, t_start, instant)
        for i, name in enumerate(self.ring.haps):
            q.push(recv_times[name], EventKind.HAP_FORWARD, (i,), hap=name)
            self._bytes += (bits // 8) * self.ring.hops(self.ring.source_index, i)
            if i != self.ring.source_index:
                self._log(recv_times[name], "HapForward", self.ring.haps[self.ring.source_index], name, bits // 8)

        def give_model(sat, hap, t):
            if sat in holders:
                return
            holders.add(sat)
            heads[sat] = (t, hap)
            dur = 0.0 if instant else bits / self.params.broadcast_rate_bps + self._range(sat, hap, t) / SPEED_OF_LIGHT
            fin = self.contacts.finish_time(sat, hap, t, dur)
            if fin is None:
                raise ScenarioError(f"downlink to {sat} from {hap} cannot finish within the horizon")
            self._bytes += bits // 8
            self._log(fin[1], "HapBroadcast", hap, sat, bits // 8)
            q.push(fin[1], EventKind.DOWNLINK_DONE, tuple(sat), sat=sat)

        def broadcast(hap, t):
            for sat in self.const.ids:
                if sat not in holders and self.contacts.visible(sat, hap, t):
                    give_model(sat, hap, t)

        def cover_dark_orbits(t_ready):
            for orbit in self.const.orbits():
                members = self.const.orbit_members(*orbit)
                if any(s in holders for s in members):
                    continue
                best = None
                for s in members:
                    for hap in self.node_order:
                        w_ = self.contacts.next_contact(s, hap, t_ready[hap])
                        if w_ is not None:
                            start = max(w_[0], t_ready[hap])
                            cand = (start, self.node_order.index(hap), hap)
                            best = cand if best is None or cand < best else best
                if best is None:
                    raise ScenarioError(f"orbit {orbit} has no contact with any HAP before the horizon")
                q.push(best[0], EventKind.HAP_BROADCAST, (best[1],), hap=best[2], orbit=orbit)

        def start_uplink(sat, model, t, attempt=0):
            nbits = self._bits(len(model.contributors))
            options = []
            for hap in self.node_order:
                nxt = self.contacts.next_contact(sat, hap, t)
                if nxt is None:
                    continue
                begin = max(t, nxt[0])
                if instant:
                    dur = 0.0
                elif self.link is None:
                    dur = self._range(sat, hap, begin) / SPEED_OF_LIGHT
                else:
                    dur = uplink_duration(nbits, self._uplink_rate(hap, sat, begin),
                                          self.link.noise.bandwidth_hz, self._range(sat, hap, begin))
                fin = self.contacts.finish_time(sat, hap, begin, dur)
                if fin is None:
                    continue
                idx = self.ring.haps.index(hap)
                at_source = fin[1] + self.ring.path_time(idx, self.ring.source_index, nbits, instant)
                options.append((at_source, self.node_order.index(hap), hap, fin))
            if not options:
                raise ScenarioError(f"{sat} cannot reach any HAP before the horizon (round {beta})")
            _, _, hap, (begin, end) = min(options)
            if begin > t:
                q.push(begin, EventKind.UPLINK_START, tuple(sat), sat=sat, model=model, attempt=attempt)
                return
            if self._uplink_fails(sat, begin, attempt):
                q.push(end + self.link.retry_backoff_s, EventKind.UPLINK_START, tuple(sat), sat=sat,
                       model=model, attempt=attempt + 1)
                return
            self._active[hap][sat] = (begin, end)
            self._bytes += nbits // 8
            receivers = [hap] + [h for h in self.node_order if h != hap
                                 and self.contacts.visible(sat, h, begin) and self.contacts.visible(sat, h, end)]
            for h in receivers:
                q.push(end, EventKind.UPLINK_DONE, (self.node_order.index(h),) + tuple(sat),
                       hap=h, sat=sat, model=model)

        def finish_chain(sat, model, t):
            """``sat`` holds a completed chain sum: uplink it or hand it to the next head."""
            if heads.get(sat) is not None and model.contributors == {sat}:
                start_uplink(sat, model, t)
                return
            if any(self.contacts.visible(sat, h, t) for h in self.node_order):
                start_uplink(sat, model, t)
                return
            nxt = self._successor(sat)
            nbits = self._bits(len(model.contributors))
            arrive = t + self._isl_time(sat, nbits)
            self._bytes += nbits // 8
            self._log(arrive, "IslHop", sat, nxt, nbits // 8)
            q.push(arrive, EventKind.ISL_HOP, tuple(nxt), sat=nxt, model=model, relay=True)

        while True:
            if not len(q):
                raise ScenarioError(f"round {beta} stalled; missing satellites never reported")
            ev = q.pop()
            t = ev.at_s
            if t > self.contacts.horizon_s:
                raise ScenarioError(f"round {beta} did not finish within the contact horizon")
            p = ev.payload
            if ev.kind is EventKind.HAP_FORWARD:
                q.push(t, EventKind.HAP_BROADCAST, ev.key, hap=p["hap"])
            elif ev.kind is EventKind.HAP_BROADCAST:
                if "orbit" in p:
                    for s in self.const.orbit_members(*p["orbit"]):
                        if any(self.contacts.visible(s, h, t) for h in self.node_order if recv_times[h] <= t):
                            give_model(s, min((h for h in self.node_order if recv_times[h] <= t
                                               and self.contacts.visible(s, h, t)), key=self.node_order.index), t)
                else:
                    broadcast(p["hap"], t)
                    pending_broadcasts -= 1
                    if pending_broadcasts == 0:
                        cover_dark_orbits(recv_times)
            elif ev.kind is EventKind.DOWNLINK_DONE:
                sat = p["sat"]
                q.push(t + self._train_time(sat), EventKind.SAT_TRAIN_DONE, tuple(sat), sat=sat)
            elif ev.kind is EventKind.ISL_HOP:
                sat, model = p["sat"], p["model"]
                if p.get("relay"):
                    start_uplink(sat, model, t)
                else:
                    holders.add(sat)
                    chains[sat] = model
                    q.push(t + self._train_time(sat), EventKind.SAT_TRAIN_DONE, tuple(sat), sat=sat)
            elif ev.kind is EventKind.SAT_TRAIN_DONE:
                sat = ev.payload["sat"]
                w_k = local_train(w_global, self.shards[sat], self.train_cfg, self.classes, beta, self.seed)
                local[sat] = w_k
                orbit = (sat.shell_index, sat.orbit_index)
                incoming = chains.pop(sat, None)
                acc = (self.sizes[sat] / self.orbit_size[orbit]) * w_k
                if incoming is not None:
                    acc = acc + incoming.weights
                    contributors = incoming.contributors | {sat}
                    carried = incoming.carried_size + self.sizes[sat]
                else:
                    contributors = frozenset({sat})
                    carried = self.sizes[sat]
                model = SubOrbitalModel(acc, frozenset(contributors), orbit, beta, carried)
                nxt = self._successor(sat)
                if nxt in heads or nxt in model.contributors or nxt in holders:
                    finish_chain(sat, model, t)
                else:
                    nbits = 2 * self._bits(len(model.contributors))
                    arrive = t + self._isl_time(sat, nbits)
                    self._bytes += nbits // 8
                    self._log(arrive, "IslHop", sat, nxt, nbits // 8)
                    q.push(arrive, EventKind.ISL_HOP, tuple(nxt), sat=nxt, model=model)
            elif ev.kind is EventKind.UPLINK_START:
                start_uplink(p["sat"], p["model"], t, p.get("attempt", 0))
            elif ev.kind is EventKind.UPLINK_DONE:
                hap, model = p["hap"], p["model"]
                collected[hap].append((model, t))
                self._log(t, "UplinkDone", p["sat"], hap, self._bits(len(model.contributors)) // 8)
                idx = self.ring.haps.index(hap)
                nbits = self._bits(len(model.contributors))
                arrive = t + self.ring.path_time(idx, self.ring.source_index, nbits, instant)
                self._bytes += (nbits // 8) * self.ring.hops(idx, self.ring.source_index)
                q.push(arrive, EventKind.REVERSE_FORWARD, (idx,), hap=hap, model=model)
            elif ev.kind is EventKind.REVERSE_FORWARD:
                inbox.append(InboxEntry(p["model"], p["hap"], t))
                if p["hap"] != self.ring.haps[self.ring.source_index]:
                    self._log(t, "ReverseForward", p["hap"], self.ring.haps[self.ring.source_index],
                              self._bits(len(p["model"].contributors)) // 8)
                q.push(t, EventKind.AGGREGATE_READY, ())
            elif ev.kind is EventKind.AGGREGATE_READY:
                result = aggregate_round(inbox, self.sizes, beta)
                if result.waited:
                    reported = {e.model.orbit for e in result.kept}
                    if reported >= set(self.orbit_size):
                        deferrals += 1
                    continue
                self._log(t, "Aggregate", self.ring.haps[self.ring.source_index], "*", 0)
                contributors = set().union(*(e.model.contributors for e in result.kept))
                assert contributors == set(self.const.ids), "aggregation without full participation"
                w_new = result.global_model
                metrics = evaluate(w_new, self.test_set, self.train_cfg.l2_reg) if self.test_set is not None \
                    else None
                rec = RoundRecord(
                    round=beta + 1,
                    global_model=w_new,
                    sim_time_s=t,
                    bytes_transmitted=int(self._bytes),
                    contributors_count=len(contributors),
                    loss=metrics.loss if metrics else float("nan"),
                    accuracy=metrics.accuracy if metrics else float("nan"),
                    deferrals=deferrals,
                )
                return w_new, t, rec


def run_training(sim: Simulation) -> list[RoundRecord]:
    return sim.run()


def fedavg_reference(shards: dict, train: TrainConfig, classes: int, rounds: int, seed: int,
                     initial_model: np.ndarray) -> list[np.ndarray]:
    """Plain FedAvg over all satellites with the same local-training seeds."""
    sats = sorted(shards)
    w = np.asarray(initial_model, dtype=float).copy()
    out = []
    for beta in range(rounds):
        models = [local_train(w, shards[s], train, classes, beta, seed) for s in sats]
        w = fedavg(models, [len(shards[s]) for s in sats])
        out.append(w)
    return out


def time_to_target(records: Sequence[RoundRecord], target_loss: float) -> float:
    for r in records:
        if r.loss <= target_loss:
            return r.sim_time_s
    return math.inf


def trace_to_jsonl(trace: Sequence[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in trace)
