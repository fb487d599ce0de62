"""Link budget terms and fading statistics for satellite-to-HAP links.

Everything here works in linear units; use :mod:`leofl.units` for dB.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .units import BOLTZMANN, SPEED_OF_LIGHT, db_to_linear

# ---------------------------------------------------------------------------
# Bessel functions of the first kind (integer order)
# ---------------------------------------------------------------------------

_SERIES_LIMIT = 12.0


def _bessel_scaled_series(n: int, x: float) -> float:
    """J_n(x) / x**n from the ascending series (no 0/0 at the origin)."""
    half_sq = 0.25 * x * x
    term = 1.0 / (2.0**n * math.factorial(n))
    total = term
    k = 0
    while True:
        k += 1
        term *= -half_sq / (k * (k + n))
        total += term
        if abs(term) <= 1e-17 * abs(total) and k > half_sq:
            return total


def _bessel_miller(n: int, x: float) -> float:
    """J_n(x) by Miller's downward recurrence normalized with J0 + 2*sum(J_2k) = 1."""
    start = 2 * ((max(n, int(x)) + 20 + int(math.sqrt(40.0 * max(n, x)))) // 2)
    j_next, j = 0.0, 1e-30
    result = 0.0
    norm = 0.0
    for k in range(start, 0, -1):
        j_prev = (2.0 * k / x) * j - j_next
        j_next, j = j, j_prev
        if abs(j) > 1e250:
            j *= 1e-250
            j_next *= 1e-250
            result *= 1e-250
            norm *= 1e-250
        if k - 1 == n:
            result = j
        if (k - 1) % 2 == 0 and k - 1 > 0:
            norm += 2.0 * j
    norm += j  # J0 term
    return result / norm


def bessel_j(n: int, x: float) -> float:
    """Bessel function of the first kind J_n(x) for integer n >= 0."""
    if n < 0:
        raise ValueError("order must be non-negative")
    sign = 1.0
    if x < 0:
        x = -x
        sign = -1.0 if n % 2 else 1.0
    if x == 0.0:
        return 1.0 if n == 0 else 0.0
    if x < _SERIES_LIMIT:
        return sign * _bessel_scaled_series(n, x) * x**n
    return sign * _bessel_miller(n, x)


def _bessel_over_power(n: int, x: float) -> float:
    x = abs(x)
    if x < _SERIES_LIMIT:
        return _bessel_scaled_series(n, x)
    return bessel_j(n, x) / x**n


# ---------------------------------------------------------------------------
# Deterministic link budget
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkBudgetParams:
    carrier_hz: float
    tx_antenna_gain_dbi: float  # satellite peak gain G_k
    rx_antenna_gain_dbi: float  # HAP gain G_h
    pointing_error_deg: float = 0.0
    aperture_diameter_m: float = 0.5
    beam_edge_constant: float = 1e-3

    def __post_init__(self):
        if self.carrier_hz <= 0:
            raise ValueError("carrier_hz must be positive")
        if self.aperture_diameter_m <= 0:
            raise ValueError("aperture_diameter_m must be positive")
        if self.beam_edge_constant <= 0:
            raise ValueError("beam_edge_constant must be positive")


@dataclass(frozen=True)
class NoiseParams:
    temperature_k: float
    bandwidth_hz: float

    def __post_init__(self):
        if self.temperature_k <= 0 or self.bandwidth_hz <= 0:
            raise ValueError("noise temperature and bandwidth must be positive")


def free_space_path_loss(distance_m, carrier_hz):
    if np.any(np.asarray(distance_m) <= 0):
        raise ValueError("distance must be positive")
    return (4.0 * math.pi * np.asarray(distance_m, dtype=float) * carrier_hz / SPEED_OF_LIGHT) ** 2


def pointing_loss(carrier_hz: float, pointing_error_deg: float, aperture_diameter_m: float) -> float:
    """Raw pointing-error loss factor; the pointing error is taken in degrees.

    The raw value can fall below one (it is exactly zero for a perfect
    pointing); :func:`shl_budget` clamps it to at least one.
    """
    return 2.7211e-20 * carrier_hz**2 * pointing_error_deg**2 * aperture_diameter_m**2


def beam_gain(peak_gain_linear: float, k_s: float) -> float:
    if k_s <= 0:
        raise ValueError("k_s must be positive")
    bracket = 0.5 * _bessel_over_power(1, k_s) + 36.0 * _bessel_over_power(3, k_s)
    return peak_gain_linear * bracket**2


def shl_budget(link: LinkBudgetParams, distance_m: float) -> float:
    """Satellite-to-HAP gain without small-scale fading (linear)."""
    g_h = db_to_linear(link.rx_antenna_gain_dbi)
    g_k = beam_gain(db_to_linear(link.tx_antenna_gain_dbi), link.beam_edge_constant)
    l_p = max(pointing_loss(link.carrier_hz, link.pointing_error_deg, link.aperture_diameter_m), 1.0)
    return g_h * g_k / (free_space_path_loss(distance_m, link.carrier_hz) * l_p)


def noise_power(noise: NoiseParams) -> float:
    return BOLTZMANN * noise.temperature_k * noise.bandwidth_hz


# ---------------------------------------------------------------------------
# Shadowed-Rician fading
# ---------------------------------------------------------------------------


def _pochhammer(a: float, i: int) -> float:
    out = 1.0
    for j in range(i):
        out *= a + j
    return out


def _kappa_coeffs(m: int) -> np.ndarray:
    """c_i with kappa(i) = c_i * z**i, i = 0..m-1."""
    return np.array([(-1) ** i * _pochhammer(1 - m, i) / math.factorial(i) ** 2 for i in range(m)])


def hyp1f1_finite(m: int, z):
    """1F1(m; 1; z) for integer m >= 1 via its terminating Kummer form."""
    if int(m) != m or m < 1:
        raise ValueError("m must be an integer >= 1")
    z = np.asarray(z, dtype=float)
    c = _kappa_coeffs(int(m))
    poly = np.polynomial.polynomial.polyval(z, c)
    return np.exp(z) * poly


@dataclass(frozen=True)
class ShadowedRicianParams:
    """Shadowed-Rician power-gain law; ``b`` is half the multipath power."""

    b: float
    m: int
    omega: float

    def __post_init__(self):
        if self.b <= 0 or self.omega <= 0:
            raise ValueError("b and omega must be positive")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be an integer >= 1")
        object.__setattr__(self, "m", int(self.m))

    @classmethod
    def from_two_b(cls, two_b: float, m: int, omega: float) -> "ShadowedRicianParams":
        return cls(b=two_b / 2.0, m=m, omega=omega)

    @property
    def mu(self) -> float:
        tb = 2.0 * self.b
        return (1.0 / tb) * (tb * self.m / (tb * self.m + self.omega)) ** self.m

    @property
    def beta(self) -> float:
        return 1.0 / (2.0 * self.b)

    @property
    def delta(self) -> float:
        tb = 2.0 * self.b
        return self.omega / (tb * (tb * self.m + self.omega))

    @property
    def mean(self) -> float:
        return 2.0 * self.b + self.omega


def sr_pdf(x, p: ShadowedRicianParams):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be non-negative")
    # exp(-beta x) * 1F1 = exp(-(beta - delta) x) * poly(delta x), avoids overflow
    poly = np.polynomial.polynomial.polyval(p.delta * x, _kappa_coeffs(p.m))
    return p.mu * np.exp(-(p.beta - p.delta) * x) * poly


def sr_cdf(x, p: ShadowedRicianParams):
    """Closed-form CDF; each kappa(i) contributes c_i * delta**i."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be non-negative")
    a = p.beta - p.delta
    c = _kappa_coeffs(p.m)
    tail = np.zeros_like(x)
    for i in range(p.m):
        inner = np.zeros_like(x)
        for j in range(i + 1):
            inner = inner + math.factorial(i) / math.factorial(j) * x**j * a ** (-(i - j + 1))
        tail = tail + c[i] * p.delta**i * inner
    out = 1.0 - p.mu * np.exp(-a * x) * tail
    out = np.clip(out, 0.0, 1.0)
    return np.where(x == 0.0, 0.0, out)


@lru_cache(maxsize=64)
def _inverse_table(p: ShadowedRicianParams):
    x_max = p.mean
    while 1.0 - float(sr_cdf(x_max, p)) > 1e-15:
        x_max *= 1.5
    # quadratic spacing resolves the steep region near zero
    grid = x_max * np.linspace(0.0, 1.0, 4097) ** 2
    return grid, sr_cdf(grid, p)


def sr_quantile(u, p: ShadowedRicianParams, tol: float = 1e-10):
    """Inverse CDF by table lookup followed by bracketed Newton iterations."""
    u = np.asarray(u, dtype=float)
    grid, cdf = _inverse_table(p)
    k = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(grid) - 2)
    lo = grid[k].copy()
    hi = grid[k + 1].copy()
    beyond = u > cdf[-1]
    if np.any(beyond):
        hi[beyond] = grid[-1] * 4.0
        lo[beyond] = grid[-1]
    span = cdf[k + 1] - cdf[k]
    frac = np.where(span > 0, (u - cdf[k]) / np.where(span > 0, span, 1.0), 0.5)
    x = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    for _ in range(100):
        err = sr_cdf(x, p) - u
        if np.all(np.abs(err) <= tol):
            break
        lo = np.where(err < 0, x, lo)
        hi = np.where(err > 0, x, hi)
        dens = sr_pdf(x, p)
        step = np.where(dens > 0, err / np.where(dens > 0, dens, 1.0), np.inf)
        cand = x - step
        ok = (cand > lo) & (cand < hi)
        x = np.where(ok, cand, 0.5 * (lo + hi))
    return x


def sr_sample(p: ShadowedRicianParams, rng: np.random.Generator, size=None):
    """Draw channel power gains |lambda|^2 by numerical inverse-CDF."""
    return sr_quantile(rng.random(size), p)


# ---------------------------------------------------------------------------
# Nakagami-m (HAP to GS)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NakagamiParams:
    m: int
    omega: float

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be an integer >= 1")
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        object.__setattr__(self, "m", int(self.m))


def nakagami_pdf(x, p: NakagamiParams):
    x = np.asarray(x, dtype=float)
    rate = p.m / p.omega
    return rate**p.m * x ** (p.m - 1) / math.gamma(p.m) * np.exp(-rate * x)


def nakagami_cdf(x, p: NakagamiParams):
    x = np.asarray(x, dtype=float)
    y = p.m / p.omega * x
    total = np.zeros_like(y)
    term = np.ones_like(y)
    for n in range(p.m):
        if n > 0:
            term = term * y / n
        total = total + term
    return np.clip(1.0 - np.exp(-y) * total, 0.0, 1.0)
