"""Configuration dataclasses and TOML loading.

A config file has one table per section (``[scenario]``, ``[transport]``,
``[cc]``, ``[sched]``, ``[gpasp]``, ``[monitor]``, ``[objective]``) plus an
array of tables ``[[scenario.links]]``, one entry per UAV path.  Every field
has a default, so an empty file is a valid config.  Unknown keys are an
error.  See ``data/default.toml`` for the shipped defaults with comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class LinkParams:
    """Channel and mobility parameters of one UAV relay path."""

    base_delay: float = 0.03  # one-way, seconds
    capacity: float = 8e6  # bits/s at SNR_max
    snr_max: float = 30.0  # dB
    snr_decay: float = 20.0  # dB per decade of distance
    d_ref: float = 50.0  # meters
    snr_noise: float = 1.0  # dB, uniform +/- amplitude
    loss_prob: float = 0.005
    burst_loss_prob: float = 0.3
    buffer_packets: int = 60
    waypoints: list = field(default_factory=lambda: [[250.0, 250.0], [750.0, 250.0]])
    speed: float = 40.0  # m/s along the waypoint loop


def _default_links() -> list[LinkParams]:
    # four heterogeneous relays patrolling different parts of the area
    return [
        LinkParams(base_delay=0.015, capacity=8e6, snr_max=28.0, loss_prob=0.02,
                   burst_loss_prob=0.35, buffer_packets=50,
                   waypoints=[[150.0, 150.0], [850.0, 150.0], [850.0, 450.0], [150.0, 450.0]],
                   speed=50.0),
        LinkParams(base_delay=0.03, capacity=10e6, snr_max=32.0, loss_prob=0.002,
                   burst_loss_prob=0.25, buffer_packets=80,
                   waypoints=[[300.0, 300.0], [700.0, 300.0], [700.0, 700.0], [300.0, 700.0]],
                   speed=30.0),
        LinkParams(base_delay=0.05, capacity=5e6, snr_max=26.0, loss_prob=0.01,
                   burst_loss_prob=0.3, buffer_packets=60,
                   waypoints=[[150.0, 550.0], [850.0, 550.0], [850.0, 850.0], [150.0, 850.0]],
                   speed=45.0),
        LinkParams(base_delay=0.04, capacity=6e6, snr_max=24.0, loss_prob=0.05,
                   burst_loss_prob=0.5, buffer_packets=40,
                   waypoints=[[100.0, 100.0], [900.0, 900.0]],
                   speed=60.0),
    ]


@dataclass
class ScenarioConfig:
    area_side: float = 1000.0  # L_E, meters
    num_ues: int = 9
    num_paths: int = 4
    sat_altitude: float = 550e3
    uav_altitude: float = 100.0
    sat_ground_span: float = 900e3  # SAT ground-track half sweep per pass, meters
    sat_pass_slots: int = 300  # slots per SAT pass; <= 0 freezes the SAT
    slot_length: float = 0.02  # tau, seconds
    slots_per_period: int = 300  # N_T
    uav_capacity: int = 5  # Y^U
    visibility_limit: float = 1.1e6  # d_max, UAV-SAT meters
    ue_uav_range: float = 650.0  # beyond this the UE-UAV link is down
    d_th: float = 450.0  # UE-UAV handover distance
    d_th_sat: float = 1.0e6  # UAV-SAT handover distance d'_th
    handover_burst_slots: int = 3
    switch_handover: bool = True  # a scheduled path switch starts a burst on the new path
    snr_loss_knee: float = 4.0  # dB; loss rises steeply below this SNR
    mss: int = 1200  # bytes
    rng_seed: int = 0
    ue_positions: list | None = None  # fixed positions; random per seed when None
    links: list = field(default_factory=_default_links)

    @property
    def period(self) -> float:
        return self.slots_per_period * self.slot_length

    def validate(self) -> None:
        if self.area_side <= 0 or self.num_ues < 1 or self.num_paths < 1:
            raise ConfigError("area_side > 0, num_ues >= 1 and num_paths >= 1 required")
        if self.slot_length <= 0 or self.slots_per_period < 1:
            raise ConfigError("slot_length > 0 and slots_per_period >= 1 required")
        if self.uav_capacity < 1 or self.visibility_limit <= 0:
            raise ConfigError("uav_capacity >= 1 and visibility_limit > 0 required")
        if len(self.links) != self.num_paths:
            raise ConfigError(f"{len(self.links)} link entries for {self.num_paths} paths")
        for i, lp in enumerate(self.links):
            for name in ("loss_prob", "burst_loss_prob"):
                v = getattr(lp, name)
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(f"links[{i}].{name}={v} outside [0, 1]")
            if lp.base_delay <= 0 or lp.capacity < 0 or lp.d_ref <= 0:
                raise ConfigError(f"links[{i}]: base_delay > 0, capacity >= 0, d_ref > 0")
            if len(lp.waypoints) < 1:
                raise ConfigError(f"links[{i}] needs at least one waypoint")
        if self.ue_positions is not None and len(self.ue_positions) != self.num_ues:
            raise ConfigError("ue_positions must list one position per UE")


@dataclass
class TransportConfig:
    app_rate: float = 0.0  # packets per slot offered per UE; 0 = saturating source
    t_max: float | None = None  # fixed timeout; None = 4 * srtt clamped to [0.2, 2] s
    t_max_min: float = 0.2
    t_max_max: float = 2.0
    idle_restart_rtts: float = 2.0  # idle longer than this many srtt => reconnect
    history_len: int = 64  # window history samples kept per subflow


@dataclass
class CcConfig:
    name: str = "phacc"
    gamma: float = 0.85  # handover-loss reduction factor
    delta_r: float = 0.01  # RTT allowance, seconds
    sigma: float = 0.5  # lambda smoothing
    rho: float = 1.0  # ceiling on lambda
    lambda_init: float = 1.0
    ss_a: float = 10.0
    ss_b: float = 0.5
    ss_boost: float = 1.0  # gamma in the boost term
    ss_decay: float = 50.0  # varrho
    ss_max_gain: float = 2.0  # M_max
    initial_sst: float = 64.0
    ema_weight: float = 0.25  # newest-sample weight of EMA{W}
    tp_ewma: float = 0.8  # weight of the old value in C
    rtt_window: int = 50  # samples for min/max RTT
    switch_memory_slots: int = 3  # a path switch counts as a handover this many slots

    def validate(self) -> None:
        if not 0.5 < self.gamma < 1.0:
            raise ConfigError(f"cc.gamma={self.gamma} must lie in (0.5, 1)")
        if self.ss_max_gain <= 1.0:
            raise ConfigError("cc.ss_max_gain must exceed 1")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError("cc.sigma must lie in [0, 1]")


@dataclass
class SchedConfig:
    name: str = "minrtt"
    ridge: float = 1e-6
    decay: float = 0.999  # per-slot forgetting of NNPE statistics; 1 disables
    srtt_cap: float = 0.5  # seconds, feature normalizer
    loss_memory_slots: int = 5


@dataclass
class GpaspConfig:
    history: int = 8  # L
    heads: int = 2  # K
    d_k: int = 16
    d_model: int = 32
    d_z: int = 16
    hidden: int = 64
    noise_channels: int = 0
    lr: float = 0.03
    momentum: float = 0.0
    gamma: float = 0.95
    lam_gae: float = 0.9
    clip: float = 0.2
    value_coef: float = 0.1
    entropy_coef: float = 0.01
    aux_lambda: float = 1.0
    aux_eta: float = 0.1
    aux_lambda_min: float = 0.01
    aux_lambda_max: float = 10.0
    aux_eps: float = 1e-8
    ema_beta: float = 0.5
    epochs: int = 4
    max_grad_norm: float = 1.0
    normalize_adv: bool = True
    decision_interval: int = 10  # slots a policy decision is held


@dataclass
class MonitorConfig:
    enabled: bool = False
    alpha0: float = 0.1
    mul0: float = 2.0
    thr0: float = 3.0
    n_min: int = 5
    window: int = 20
    beta: float = 0.1
    delta: float = 0.05
    severity: float = 0.5
    reward_shift: float = 5.0  # rewards are shifted by this before monitoring
    refit_steps: int = 1  # train_step calls scheduled on FullRetrain


@dataclass
class ObjectiveConfig:
    w_goodput: float = 1.0
    w_ofo: float = 1.0


@dataclass
class SimConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    cc: CcConfig = field(default_factory=CcConfig)
    sched: SchedConfig = field(default_factory=SchedConfig)
    gpasp: GpaspConfig = field(default_factory=GpaspConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def validate(self) -> None:
        self.scenario.validate()
        self.cc.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    return cls(**data)


_SECTIONS = {
    "transport": TransportConfig,
    "cc": CcConfig,
    "sched": SchedConfig,
    "gpasp": GpaspConfig,
    "monitor": MonitorConfig,
    "objective": ObjectiveConfig,
}


def from_dict(data: dict[str, Any]) -> SimConfig:
    data = dict(data)
    unknown = set(data) - set(_SECTIONS) - {"scenario", "experiment"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    scen = dict(data.get("scenario", {}))
    links = scen.pop("links", None)
    scenario = _build(ScenarioConfig, scen, "scenario")
    if links is not None:
        scenario.links = [_build(LinkParams, lp, "scenario.links") for lp in links]
        if "num_paths" not in scen:
            scenario.num_paths = len(scenario.links)
    elif scenario.num_paths != len(scenario.links):
        # default link table truncated or cycled to the requested path count
        base = _default_links()
        scenario.links = [base[i % len(base)] for i in range(scenario.num_paths)]
    cfg = SimConfig(scenario=scenario)
    for name, cls in _SECTIONS.items():
        if name in data:
            setattr(cfg, name, _build(cls, data[name], name))
    cfg.validate()
    return cfg


def load(path: str | Path) -> tuple[SimConfig, dict]:
    """Read a TOML config; returns the config and the raw ``[experiment]`` table."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with path.open("rb") as fh:
        raw = tomllib.load(fh)
    return from_dict(raw), dict(raw.get("experiment", {}))


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "default.toml"
