"""Downlink NOMA: SIC ordering, power allocation, SINR/rates and outage probability.

Users are indexed from 0 in SIC order (strongest channel first). The SINR of
user k only sees interference from the users decoded before it, following the
receiver model used throughout this package.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import erfc

from .channel import ShadowedRicianParams, sr_cdf, sr_sample
from .constellation import SatelliteId
from .seeding import derive_rng
from .units import SPEED_OF_LIGHT

MC_BATCH = 1 << 16


@dataclass(frozen=True)
class NomaUser:
    sat: SatelliteId
    gain: float
    power_coeff: float = 0.0  # set by allocate_power
    target_rate: float = 0.0
    shell_index: int = 0
    distance_m: float | None = None

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError("channel gain must be non-negative")


@dataclass(frozen=True)
class NomaGroup:
    users: tuple
    snr_rho: float

    def __post_init__(self):
        sum_a = sum(u.power_coeff for u in self.users)
        if sum_a > 1.0 + 1e-12:
            raise ValueError(f"power coefficients sum to {sum_a} > 1")

    def __len__(self):
        return len(self.users)

    @property
    def gains(self) -> np.ndarray:
        return np.array([u.gain for u in self.users])

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([u.power_coeff for u in self.users])


class PowerMode(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class GammaForm(str, enum.Enum):
    PAPER = "paper"  # 2**(2R) - 1
    SHANNON = "shannon"  # 2**R - 1


def gamma_threshold(rate: float, form: GammaForm | str = GammaForm.PAPER) -> float:
    """SINR needed to support ``rate`` bits/s/Hz."""
    form = GammaForm(form)
    exponent = 2.0 * rate if form is GammaForm.PAPER else rate
    return 2.0**exponent - 1.0


def order_by_gain(users: Sequence[NomaUser], snr_rho: float = 1.0) -> NomaGroup:
    ordered = sorted(users, key=lambda u: (-u.gain, u.sat))
    return NomaGroup(tuple(ordered), snr_rho)


def allocate_power(users: Sequence[NomaUser], mode: PowerMode | str = PowerMode.STATIC) -> list[float]:
    """Power coefficients for users given in SIC order (strongest first).

    Static: the two-user split is 25 % near / 75 % far; larger groups use a
    ladder proportional to 1/gain. Dynamic: proportional to squared distance.
    """
    mode = PowerMode(mode)
    n = len(users)
    if n == 0:
        raise ValueError("cannot allocate power to an empty group")
    if n == 1:
        return [1.0]
    gains = np.array([u.gain for u in users], dtype=float)
    if mode is PowerMode.STATIC:
        if np.all(gains == 0):
            return [1.0 / n] * n
        if n == 2:
            return [0.25, 0.75]
        inv = np.where(gains > 0, 1.0 / np.where(gains > 0, gains, 1.0), 0.0)
        if np.any(gains == 0):
            # a dead channel gets the largest share of the remaining ladder
            inv[gains == 0] = inv.max() if inv.max() > 0 else 1.0
        weights = inv
    else:
        if any(u.distance_m is None for u in users):
            raise ValueError("dynamic allocation needs user distances")
        weights = np.array([u.distance_m for u in users], dtype=float) ** 2
        if np.all(weights == 0):
            return [1.0 / n] * n
    a = weights / weights.sum()
    return [float(x) for x in a]


def with_power(group: NomaGroup, coeffs: Sequence[float]) -> NomaGroup:
    users = tuple(replace(u, power_coeff=float(a)) for u, a in zip(group.users, coeffs))
    return NomaGroup(users, group.snr_rho)


def sinr(group: NomaGroup, k: int) -> float:
    if not 0 <= k < len(group):
        raise IndexError(k)
    g, a, rho = group.gains, group.coeffs, group.snr_rho
    interference = rho * float(np.dot(g[:k], a[:k]))
    return a[k] * rho * g[k] / (interference + 1.0)


@dataclass(frozen=True)
class RateReport:
    per_user: tuple
    total: float


def sum_rate(group: NomaGroup, high_snr: bool = False) -> RateReport:
    per_user = tuple(math.log2(1.0 + sinr(group, k)) for k in range(len(group)))
    received = group.snr_rho * float(np.dot(group.gains, group.coeffs))
    total = math.log2(received) if high_snr else math.log2(1.0 + received)
    return RateReport(per_user, total)


def oma_rates(group: NomaGroup) -> tuple:
    """Per-user rates (bits/s/Hz of the whole band) for an equal orthogonal split.

    Each user keeps its power share a_k and gets B/n of the band, so the noise
    in its sub-band is sigma^2/n.
    """
    n = len(group)
    return tuple(math.log2(1.0 + n * group.snr_rho * u.power_coeff * u.gain) / n for u in group.users)


# ---------------------------------------------------------------------------
# Outage probability
# ---------------------------------------------------------------------------


class OutageMethod(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class OutageReport:
    op_ns: float
    op_fs: float
    op_system: float
    method: OutageMethod
    trials: int = 0
    std_err: float = 0.0
    std_err_ns: float = 0.0
    std_err_fs: float = 0.0


@dataclass(frozen=True)
class OutageScenario:
    """Two-class NOMA link seen by one HAP: nearest (NS) and farthest (FS) satellite.

    ``interferer_terms`` are (gain, power_coeff) pairs of the users decoded
    before the FS, expressed against ``rho_fs``; they condition the FS outage.
    """

    ns: ShadowedRicianParams
    fs: ShadowedRicianParams
    rho_ns: float
    rho_fs: float
    a_ns: float = 0.25
    a_fs: float = 0.75
    gamma_ns: float = 3.0
    gamma_fs: float = 3.0
    interferer_terms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not (0 < self.a_ns <= 1 and 0 < self.a_fs <= 1):
            raise ValueError("power coefficients must lie in (0, 1]")
        if self.rho_ns <= 0 or self.rho_fs <= 0:
            raise ValueError("rho must be positive")


def outage_ns_closed(p: ShadowedRicianParams, rho: float, a_ns: float, gamma_th: float) -> float:
    if not 0 < a_ns <= 1:
        raise ValueError("a_ns must lie in (0, 1]")
    if rho <= 0:
        raise ValueError("rho must be positive")
    threshold = (gamma_th / a_ns) * (1.0 / rho)
    return float(sr_cdf(threshold, p))


def outage_fs_closed(p: ShadowedRicianParams, rho: float, a_fs: float, gamma_th: float,
                     interferer_terms: Sequence[tuple] = ()) -> float:
    """FS outage conditional on the realized gains of the stronger users."""
    if not 0 < a_fs <= 1:
        raise ValueError("a_fs must lie in (0, 1]")
    omega2 = (rho * sum(g * a for g, a in interferer_terms) + 1.0) / rho
    return float(sr_cdf((gamma_th / a_fs) * omega2, p))


def outage_system_closed(op_ns: float, op_fs: float) -> float:
    return 1.0 - (1.0 - op_ns) * (1.0 - op_fs)


def outage_closed_form(sc: OutageScenario) -> OutageReport:
    op_ns = outage_ns_closed(sc.ns, sc.rho_ns, sc.a_ns, sc.gamma_ns)
    op_fs = outage_fs_closed(sc.fs, sc.rho_fs, sc.a_fs, sc.gamma_fs, sc.interferer_terms)
    return OutageReport(op_ns, op_fs, outage_system_closed(op_ns, op_fs), OutageMethod.CLOSED_FORM)


def _outage_batch(sc: OutageScenario, n: int, seed: int, batch: int, conditional: bool):
    rng = derive_rng(seed, "outage", batch)
    h_ns = sr_sample(sc.ns, rng, n)
    h_fs = sr_sample(sc.fs, rng, n)
    ok_ns = sc.a_ns * sc.rho_ns * h_ns >= sc.gamma_ns
    if conditional:
        interference = sc.rho_fs * sum(g * a for g, a in sc.interferer_terms)
    else:
        interference = sc.rho_ns * sc.a_ns * h_ns
    ok_fs = sc.a_fs * sc.rho_fs * h_fs >= sc.gamma_fs * (interference + 1.0)
    return int(np.count_nonzero(~ok_ns)), int(np.count_nonzero(~ok_fs)), int(np.count_nonzero(~(ok_ns & ok_fs)))


def outage_monte_carlo(sc: OutageScenario, trials: int, seed: int, conditional: bool = True,
                       workers: int = 1) -> OutageReport:
    """Monte-Carlo outage estimate used as an oracle for the closed forms.

    Trials are split into fixed batches of ``MC_BATCH`` draws; batch ``i``
    uses the stream ``derive_rng(seed, "outage", i)``. Counts are integers,
    so any partition of batches across workers gives bit-identical results.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    sizes = [MC_BATCH] * (trials // MC_BATCH)
    if trials % MC_BATCH:
        sizes.append(trials % MC_BATCH)
    jobs = [(sc, n, seed, i, conditional) for i, n in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(lambda j: _outage_batch(*j), jobs))
    else:
        counts = [_outage_batch(*j) for j in jobs]
    f_ns, f_fs, f_sys = (sum(c[i] for c in counts) for i in range(3))
    p_ns, p_fs, p_sys = f_ns / trials, f_fs / trials, f_sys / trials
    se = lambda p: math.sqrt(p * (1.0 - p) / trials)
    return OutageReport(p_ns, p_fs, p_sys, OutageMethod.MONTE_CARLO, trials, se(p_sys), se(p_ns), se(p_fs))


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


def oma_exchange_time(model_bits: float, rate_bps: float, distance_m: float) -> float:
    """Transmission plus propagation time; processing delays are neglected."""
    if rate_bps <= 0:
        raise ValueError("rate must be positive")
    return model_bits / rate_bps + distance_m / SPEED_OF_LIGHT


# ---------------------------------------------------------------------------
# Symbol-level QPSK with SIC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BerUser:
    power_coeff: float
    fading: ShadowedRicianParams | None = None
    fixed_gain: float = 1.0


_QPSK_SCALE = 1.0 / math.sqrt(2.0)


def _qpsk(bits_i, bits_q):
    return _QPSK_SCALE * ((1 - 2 * bits_i) + 1j * (1 - 2 * bits_q))


def qpsk_ber_monte_carlo(users: Sequence[BerUser], rho: float, trials: int, seed: int,
                         noiseless: bool = False) -> list[float]:
    """Per-user bit error rate of superposed QPSK with successive cancellation.

    Each trial draws one symbol per user, a fading power gain per user (fixed
    when ``fading`` is None), a uniform phase and unit-variance complex noise.
    The receiver knows the channels, orders users by instantaneous gain,
    decides, re-modulates and subtracts, so decision errors propagate.
    """
    rng = derive_rng(seed, "qpsk")
    k = len(users)
    bits = rng.integers(0, 2, size=(k, 2, trials))
    gains = np.empty((k, trials))
    for i, u in enumerate(users):
        gains[i] = sr_sample(u.fading, rng, trials) if u.fading is not None else u.fixed_gain
    phase = np.exp(2j * np.pi * rng.random((k, trials)))
    noise = (rng.standard_normal(trials) + 1j * rng.standard_normal(trials)) * _QPSK_SCALE
    amp = np.sqrt(np.array([u.power_coeff for u in users])[:, None] * rho)
    h = np.sqrt(gains) * phase
    tx = amp * h * _qpsk(bits[:, 0], bits[:, 1])
    y = tx.sum(axis=0) + (0.0 if noiseless else noise)
    order = np.argsort(-gains, axis=0, kind="stable")
    errors = np.zeros(k)
    cols = np.arange(trials)
    for step in range(k):
        idx = order[step]
        chan = amp[idx, 0] * h[idx, cols]
        z = y / np.where(np.abs(chan) > 0, chan, 1.0)
        bi = (z.real < 0).astype(int)
        bq = (z.imag < 0).astype(int)
        np.add.at(errors, idx, (bi != bits[idx, 0, cols]).astype(float) + (bq != bits[idx, 1, cols]))
        y = y - chan * _qpsk(bi, bq)
    return [float(e / (2 * trials)) for e in errors]


def qpsk_awgn_ber(rho: float) -> float:
    """Analytic QPSK bit error rate at symbol SNR ``rho``: Q(sqrt(rho))."""
    return 0.5 * float(erfc(math.sqrt(rho) / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# Capacity sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CapacityPoint:
    user_count: int
    sum_rate: float
    served: float


def capacity_sweep(user_counts: Sequence[int], shell_fading: Sequence[ShadowedRicianParams],
                   shell_rho: Sequence[float], target_rate: float, seed: int, trials: int = 200,
                   gamma_form: GammaForm | str = GammaForm.PAPER,
                   enforce_feasibility: bool = True) -> list[CapacityPoint]:
    """Average NOMA sum rate versus the number of concurrently served satellites.

    Users are assigned to shells round-robin; each trial draws their fading
    gains, orders them, applies the static ladder and sums the rates. With
    ``enforce_feasibility`` a user whose SINR misses the threshold for
    ``target_rate`` contributes nothing.
    """
    gamma = gamma_threshold(target_rate, gamma_form)
    out = []
    for count in user_counts:
        rng = derive_rng(seed, "capacity", int(count))
        totals, served = [], []
        for _ in range(trials):
            users = []
            for j in range(count):
                s = j % len(shell_fading)
                g = float(sr_sample(shell_fading[s], rng)) * shell_rho[s]
                users.append(NomaUser(SatelliteId(s, 0, j), gain=g, shell_index=s))
            group = order_by_gain(users, snr_rho=1.0)
            group = with_power(group, allocate_power(group.users, PowerMode.STATIC))
            total, n_ok = 0.0, 0
            for k in range(len(group)):
                s_k = sinr(group, k)
                if enforce_feasibility and s_k < gamma:
                    continue
                total += math.log2(1.0 + s_k)
                n_ok += 1
            totals.append(total)
            served.append(n_ok)
        out.append(CapacityPoint(int(count), float(np.mean(totals)), float(np.mean(served))))
    return out
