import pytest

from leofl.channel import ShadowedRicianParams
from leofl.constellation import GroundNode, NodeKind, ShellSpec, build_walker_delta

ROLLA = (37.95, -91.77)
CHINOOK = (48.59, -109.23)
PRIMORSKY = (45.0, 135.0)


@pytest.fixture(scope="session")
def sr_params():
    return ShadowedRicianParams.from_two_b(0.279, 2, 0.251)


@pytest.fixture(scope="session")
def paper_constellation():
    shells = [ShellSpec(alt, 70.0, 2, 10) for alt in (500e3, 1000e3, 1500e3)]
    return build_walker_delta(shells)


@pytest.fixture(scope="session")
def rolla_gs():
    return GroundNode("rolla", *ROLLA, altitude_m=0.0, min_elevation_deg=10.0, kind=NodeKind.GS)


def hap(name, latlon, altitude_m=25e3):
    return GroundNode(name, *latlon, altitude_m=altitude_m, min_elevation_deg=10.0, kind=NodeKind.HAP)
