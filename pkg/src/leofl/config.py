"""Scenario configuration: YAML text validated against a strict schema.

Key names carry their units (``altitude_km``, ``p_s_dbm``) and unknown keys
are rejected, so a typo fails loudly instead of falling back to a default.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .channel import LinkBudgetParams, NoiseParams, ShadowedRicianParams
from .constellation import GroundNode, NodeKind, ShellSpec
from .fl import LrKind, PartitionMode, TrainConfig
from .noma import GammaForm, PowerMode
from .protocol import LinkSetup, ProtocolParams, Termination


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the offending field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ShellCfg(_Strict):
    altitude_km: float = Field(gt=0)
    inclination_deg: float = Field(ge=0, le=180)
    num_orbits: int = Field(ge=1)
    sats_per_orbit: int = Field(ge=1)
    raan_offsets_deg: list[float] | None = None
    phase_offset_deg: float | None = None

    def to_spec(self) -> ShellSpec:
        return ShellSpec(self.altitude_km * 1e3, self.inclination_deg, self.num_orbits, self.sats_per_orbit,
                         tuple(self.raan_offsets_deg) if self.raan_offsets_deg is not None else None,
                         self.phase_offset_deg)


class NodeCfg(_Strict):
    name: str = Field(min_length=1)
    latitude_deg: float = Field(ge=-90, le=90)
    longitude_deg: float = Field(ge=-180, le=360)
    altitude_km: float = Field(default=0.0, ge=0)
    min_elevation_deg: float = Field(default=10.0, ge=0, lt=90)
    kind: Literal["gs", "hap"] = "hap"

    def to_node(self) -> GroundNode:
        return GroundNode(self.name, self.latitude_deg, self.longitude_deg, self.altitude_km * 1e3,
                          self.min_elevation_deg, NodeKind(self.kind.upper()))


class FadingCfg(_Strict):
    two_b: float = Field(gt=0)
    m: int = Field(ge=1)
    omega: float = Field(gt=0)

    def to_params(self) -> ShadowedRicianParams:
        return ShadowedRicianParams.from_two_b(self.two_b, self.m, self.omega)


class NoiseCfg(_Strict):
    temperature_k: float = Field(gt=0)
    bandwidth_mhz: float = Field(gt=0)

    def to_params(self) -> NoiseParams:
        return NoiseParams(self.temperature_k, self.bandwidth_mhz * 1e6)


class LinkCfg(_Strict):
    carrier_ghz: float = Field(gt=0)
    tx_gain_dbi: float
    rx_gain_dbi: float
    pointing_error_deg: float = Field(default=0.0, ge=0)
    aperture_m: float = Field(default=0.5, gt=0)
    beam_edge_constant: float = Field(default=1e-3, gt=0)

    def to_params(self) -> LinkBudgetParams:
        return LinkBudgetParams(self.carrier_ghz * 1e9, self.tx_gain_dbi, self.rx_gain_dbi,
                                self.pointing_error_deg, self.aperture_m, self.beam_edge_constant)


class ChannelCfg(_Strict):
    fading: list[FadingCfg] = Field(min_length=1)  # one per shell, or a single entry shared by all
    noise: NoiseCfg
    link: LinkCfg | None = None
    fold_link_budget: bool = True  # rho includes path loss and antenna gains


class NomaCfg(_Strict):
    power_mode: Literal["static", "dynamic"] = "static"
    target_rate_bps_hz: float = Field(default=1.0, gt=0)
    gamma_form: Literal["paper", "shannon"] = "paper"
    p_s_dbm: float = 40.0
    a_ns: float = Field(default=0.25, gt=0, le=1)
    a_fs: float = Field(default=0.75, gt=0, le=1)
    outage_retry: bool = False


class OutageCfg(_Strict):
    ns_distance_km: float | None = Field(default=None, gt=0)  # default: lowest shell altitude
    fs_distance_km: float | None = Field(default=None, gt=0)  # default: highest shell altitude
    sweep_dbm: str = "-40:40:5"
    trials: int = Field(default=1_000_000, ge=1)
    conditional: bool = True


class RateCfg(_Strict):
    user_counts: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 14])
    sweep_dbm: str = "-40:40:10"
    draws: int = Field(default=200, ge=1)


class VisibilityCfg(_Strict):
    t0_s: float = 0.0
    t1_s: float = 172800.0
    dt_s: float = Field(default=30.0, gt=0)
    refine: bool = True


class DatasetCfg(_Strict):
    classes: int = Field(default=4, ge=2)
    dim: int = Field(default=10, ge=1)
    samples: int = Field(default=2000, ge=2)
    separation: float = Field(default=3.0, gt=0)
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    cache_path: str | None = None


class FlCfg(_Strict):
    dataset: DatasetCfg = DatasetCfg()
    partition: Literal["iid", "noniid"] = "iid"
    local_epochs: int = Field(default=1, ge=1)
    lr_kind: Literal["constant", "decaying"] = "constant"
    lr: float = Field(default=0.1, ge=0)
    lr_offset: float = Field(default=1.0, gt=0)
    batch_size: int = Field(default=32, ge=1)
    l2_reg: float = Field(default=1e-3, ge=0)

    def to_train(self) -> TrainConfig:
        return TrainConfig(self.local_epochs, LrKind(self.lr_kind), self.lr, self.lr_offset,
                           self.batch_size, self.l2_reg)


class TerminationCfg(_Strict):
    target_accuracy: float | None = Field(default=None, ge=0, le=1)
    target_loss: float | None = Field(default=None, ge=0)
    max_rounds: int = Field(default=50, ge=1)
    max_sim_time_h: float = Field(default=72.0, gt=0)

    def to_termination(self) -> Termination:
        return Termination(self.target_accuracy, self.target_loss, self.max_rounds, self.max_sim_time_h * 3600.0)


class ProtocolCfg(_Strict):
    direction: Literal[1, -1] = 1
    isl_rate_mbps: float = Field(default=100.0, gt=0)
    ihl_rate_mbps: float = Field(default=500.0, gt=0)
    broadcast_rate_mbps: float = Field(default=100.0, gt=0)
    train_s_per_sample: float = Field(default=0.01, ge=0)
    payload_override_bits: int | None = Field(default=None, ge=0)
    instant_links: bool = False
    contact_dt_s: float = Field(default=30.0, gt=0)
    termination: TerminationCfg = TerminationCfg()

    def to_params(self) -> ProtocolParams:
        return ProtocolParams(self.isl_rate_mbps * 1e6, self.ihl_rate_mbps * 1e6, self.broadcast_rate_mbps * 1e6,
                              self.direction, self.train_s_per_sample, self.payload_override_bits,
                              self.instant_links)


class BoundCfg(_Strict):
    satellites: int = Field(default=4, ge=1)
    classes: int = Field(default=3, ge=2)
    dim: int = Field(default=10, ge=1)
    samples: int = Field(default=800, ge=2)
    separation: float = Field(default=2.0, gt=0)
    partition: Literal["iid", "noniid"] = "noniid"
    l2_reg: float = Field(default=0.05, gt=0)
    local_steps: list[int] = Field(default_factory=lambda: [1, 5])
    steps: int = Field(default=200, ge=1)
    repetitions: int = Field(default=30, ge=1)
    batch_size: int = Field(default=16, ge=1)


class ScenarioConfig(_Strict):
    seed: int = Field(default=0, ge=0)
    constellation: list[ShellCfg] = Field(min_length=1)
    nodes: list[NodeCfg] = Field(min_length=1)
    channel: ChannelCfg
    noma: NomaCfg = NomaCfg()
    outage: OutageCfg = OutageCfg()
    rate: RateCfg = RateCfg()
    visibility: VisibilityCfg = VisibilityCfg()
    fl: FlCfg = FlCfg()
    protocol: ProtocolCfg = ProtocolCfg()
    bound: BoundCfg = BoundCfg()

    @field_validator("nodes")
    @classmethod
    def _unique_names(cls, nodes):
        names = [n.name for n in nodes]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ValueError(f"node names must be unique, repeated: {dup}")
        return nodes

    @model_validator(mode="after")
    def _fading_per_shell(self):
        n = len(self.channel.fading)
        if n not in (1, len(self.constellation)):
            raise ValueError(f"channel.fading needs 1 or {len(self.constellation)} entries, got {n}")
        return self

    # -- conversions ---------------------------------------------------------

    def shells(self) -> list[ShellSpec]:
        return [s.to_spec() for s in self.constellation]

    def ground_nodes(self) -> list[GroundNode]:
        return [n.to_node() for n in self.nodes]

    def fading(self) -> tuple:
        params = [f.to_params() for f in self.channel.fading]
        return tuple(params * len(self.constellation) if len(params) == 1 else params)

    def link_setup(self) -> LinkSetup:
        return LinkSetup(
            fading=self.fading(),
            noise=self.channel.noise.to_params(),
            link=self.channel.link.to_params() if (self.channel.link and self.channel.fold_link_budget) else None,
            p_s_dbm=self.noma.p_s_dbm,
            power_mode=PowerMode(self.noma.power_mode),
            outage_retry=self.noma.outage_retry,
            target_rate=self.noma.target_rate_bps_hz,
            gamma_form=GammaForm(self.noma.gamma_form).value,
        )


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{path}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: the configuration must be a mapping")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def loads(text: str) -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"<root>: not valid YAML ({err})") from None
    return parse_config(data)


def load(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror}") from None
    return loads(text)


def dumps(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def parse_sweep(text: str) -> list[float]:
    """``start:stop:step`` with an inclusive stop."""
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"sweep: expected start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise ConfigError(f"sweep: need step > 0 and stop >= start, got {text!r}")
    n = int(round((stop - start) / step))
    values = [start + i * step for i in range(n + 1)]
    if values[-1] > stop + 1e-9 * max(1.0, abs(stop)):
        values.pop()
    return [round(v, 12) for v in values]
