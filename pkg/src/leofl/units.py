"""Physical constants and dB/linear conversions used across the package."""
import math

SPEED_OF_LIGHT = 299_792_458.0  # m/s
BOLTZMANN = 1.38e-23  # J/K, value used by the noise model
EARTH_RADIUS = 6_371_000.0  # m
EARTH_MU = 3.98e14  # G_e * M, m^3/s^2
SIDEREAL_DAY = 86_164.1  # s
EARTH_ROTATION_RATE = 2.0 * math.pi / SIDEREAL_DAY  # rad/s


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


def linear_to_db(x):
    return 10.0 * math.log10(x)


def dbm_to_watts(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(w):
    return 10.0 * math.log10(w) + 30.0
