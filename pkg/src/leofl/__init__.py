"""Federated learning over LEO constellations with HAP parameter servers and NOMA uplinks."""
from .constellation import (ContactPlan, GroundNode, NodeKind, SatelliteId, ShellSpec, build_walker_delta,
                            visibility_windows)
from .channel import LinkBudgetParams, NakagamiParams, NoiseParams, ShadowedRicianParams
from .noma import NomaGroup, NomaUser, OutageScenario, outage_closed_form, outage_monte_carlo
from .fl import Dataset, TrainConfig, fedavg, local_train
from .protocol import ScenarioError, Simulation, run_training

__version__ = "0.1.0"
