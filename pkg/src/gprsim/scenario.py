"""Parametric world model: UE/UAV/SAT geometry, per-slot link quality,
handover bursts and constraint checks.

UAVs follow closed piecewise-linear waypoint loops.  The serving SAT is
modelled by its ground-track offset sweeping ``[-span, span]`` once per
pass; when the sweep wraps, the next SAT of the orbit takes over.  Only
link-level quantities (delay, capacity, SNR, loss) reach the transport.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig

C_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class LinkState:
    ue: int
    path: int
    up: bool
    capacity: float  # bits/s
    delay: float  # one-way propagation, seconds
    snr: float  # dB
    d_ue_uav: float
    d_uav_sat: float
    loss_prob: float
    handover_active: bool


@dataclass(frozen=True)
class Violation:
    constraint: str  # "C1" | "C2" | "C3"
    entity: int
    detail: str


@dataclass
class WorldState:
    t: int
    seed: int
    ue_pos: np.ndarray  # (N, 2)
    uav_pos: np.ndarray  # (M, 2)
    uav_arc: np.ndarray  # (M,) distance travelled along each loop
    sat_offset: float
    sat_index: int
    # per-(n, m) link arrays
    up: np.ndarray
    capacity: np.ndarray
    delay: np.ndarray
    snr: np.ndarray
    d_ue_uav: np.ndarray
    d_uav_sat: np.ndarray  # (M,)
    loss_prob: np.ndarray
    handover: np.ndarray
    burst_left: np.ndarray  # slots of burst loss remaining
    switched: np.ndarray  # scheduled path switch this slot
    uav_load: np.ndarray  # (M,) admitted UEs this slot (s^m aggregate)
    events: list = field(default_factory=list)  # clamp / admission notes

    @property
    def num_ues(self) -> int:
        return self.ue_pos.shape[0]

    @property
    def num_paths(self) -> int:
        return self.uav_pos.shape[0]

    def link(self, n: int, m: int) -> LinkState:
        return LinkState(
            ue=n, path=m, up=bool(self.up[n, m]), capacity=float(self.capacity[n, m]),
            delay=float(self.delay[n, m]), snr=float(self.snr[n, m]),
            d_ue_uav=float(self.d_ue_uav[n, m]), d_uav_sat=float(self.d_uav_sat[m]),
            loss_prob=float(self.loss_prob[n, m]), handover_active=bool(self.handover[n, m]),
        )

    def to_bytes(self) -> bytes:
        parts = [np.array([self.t, self.sat_index], dtype=np.int64).tobytes(),
                 np.float64(self.sat_offset).tobytes()]
        for arr in (self.ue_pos, self.uav_pos, self.uav_arc, self.up, self.capacity,
                    self.delay, self.snr, self.d_ue_uav, self.d_uav_sat, self.loss_prob,
                    self.handover, self.burst_left, self.switched, self.uav_load):
            parts.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(parts)


# ------------------------------------------------------------------ geometry
def _loop_position(waypoints, arc: float) -> np.ndarray:
    pts = np.asarray(waypoints, dtype=float)
    if len(pts) == 1:
        return pts[0].copy()
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    perimeter = seg.sum()
    if perimeter == 0:
        return pts[0].copy()
    s = arc % perimeter
    for i, length in enumerate(seg):
        if s <= length or i == len(seg) - 1:
            frac = 0.0 if length == 0 else min(s / length, 1.0)
            return closed[i] + frac * (closed[i + 1] - closed[i])
        s -= length
    return pts[0].copy()  # pragma: no cover


def _sat_track(cfg: ScenarioConfig, t: int) -> tuple[float, int]:
    if cfg.sat_pass_slots <= 0:
        return 0.0, 0
    idx, pos = divmod(t, cfg.sat_pass_slots)
    span = cfg.sat_ground_span
    return -span + 2.0 * span * pos / cfg.sat_pass_slots, idx


def snr_model(distance, snr_max: float, decay: float, d_ref: float, noise=0.0):
    """SNR_max minus a log-distance decay plus bounded noise, never above SNR_max."""
    d = np.maximum(distance, d_ref)
    return np.minimum(snr_max - decay * np.log10(d / d_ref) + noise, snr_max)


def _compute_links(cfg: ScenarioConfig, w: WorldState, prev: WorldState | None) -> None:
    n_ue, n_path = w.num_ues, w.num_paths
    noise_rng = np.random.default_rng([w.seed, w.t, 7])
    noise = noise_rng.uniform(-1.0, 1.0, size=(n_ue, n_path))
    center = cfg.area_side / 2.0
    for m, lp in enumerate(cfg.links):
        dx = w.sat_offset - (w.uav_pos[m, 0] - center)
        dy = w.uav_pos[m, 1] - center
        w.d_uav_sat[m] = math.sqrt(cfg.sat_altitude**2 + dx * dx + dy * dy)
    diff = w.ue_pos[:, None, :] - w.uav_pos[None, :, :]
    w.d_ue_uav[:] = np.sqrt((diff**2).sum(axis=2) + cfg.uav_altitude**2)
    sat_switched = prev is not None and prev.sat_index != w.sat_index
    for m, lp in enumerate(cfg.links):
        d = w.d_ue_uav[:, m]
        snr = snr_model(d, lp.snr_max, lp.snr_decay, lp.d_ref, lp.snr_noise * noise[:, m])
        up = (d <= cfg.ue_uav_range) & (w.d_uav_sat[m] <= cfg.visibility_limit)
        lin, lin_max = 10 ** (snr / 10.0), 10 ** (lp.snr_max / 10.0)
        cap = lp.capacity * np.log2(1 + lin) / math.log2(1 + lin_max)
        w.snr[:, m] = snr
        w.up[:, m] = up
        w.capacity[:, m] = np.where(up, cap, 0.0)
        w.delay[:, m] = lp.base_delay + (d + w.d_uav_sat[m]) / C_LIGHT
        near_ue = d > cfg.d_th
        near_sat = w.d_uav_sat[m] > cfg.d_th_sat
        w.handover[:, m] = near_ue | near_sat
        # bursts start on the rising edge of a handover condition or a SAT change
        if prev is None:
            rising = np.zeros(n_ue, dtype=bool)
        else:
            rising = (near_ue & ~(prev.d_ue_uav[:, m] > cfg.d_th)) | (
                near_sat and not prev.d_uav_sat[m] > cfg.d_th_sat
            )
        if sat_switched:
            rising = np.ones(n_ue, dtype=bool)
        burst = w.burst_left[:, m]
        burst[:] = np.where(rising & up, cfg.handover_burst_slots, np.maximum(burst - 1, 0))
        base = lp.loss_prob + (1 - lp.loss_prob) / (1 + np.exp(snr - cfg.snr_loss_knee))
        w.loss_prob[:, m] = np.where(burst > 0, np.maximum(base, lp.burst_loss_prob), base)


def _clamp_ues(cfg: ScenarioConfig, w: WorldState) -> None:
    clipped = np.clip(w.ue_pos, 0.0, cfg.area_side)
    moved = np.any(clipped != w.ue_pos, axis=1)
    for n in np.flatnonzero(moved):
        w.events.append(("clamp", int(n)))
    w.ue_pos = clipped


def init_world(cfg: ScenarioConfig, seed: int | None = None) -> WorldState:
    """World at slot 0.  UE positions and UAV loop phases are drawn from ``seed``."""
    seed = cfg.rng_seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    n_ue, n_path = cfg.num_ues, cfg.num_paths
    if cfg.ue_positions is not None:
        ue_pos = np.asarray(cfg.ue_positions, dtype=float).reshape(n_ue, 2).copy()
    else:
        ue_pos = rng.uniform(0.0, cfg.area_side, size=(n_ue, 2))
    arc = rng.uniform(0.0, 1.0, size=n_path)
    uav_arc = np.zeros(n_path)
    for m, lp in enumerate(cfg.links):
        pts = np.asarray(lp.waypoints, dtype=float)
        if len(pts) > 1:
            closed = np.vstack([pts, pts[:1]])
            uav_arc[m] = arc[m] * np.linalg.norm(np.diff(closed, axis=0), axis=1).sum()
    offset, idx = _sat_track(cfg, 0)
    w = WorldState(
        t=0, seed=seed, ue_pos=ue_pos,
        uav_pos=np.array([_loop_position(lp.waypoints, uav_arc[m]) for m, lp in enumerate(cfg.links)]),
        uav_arc=uav_arc, sat_offset=offset, sat_index=idx,
        up=np.zeros((n_ue, n_path), dtype=bool), capacity=np.zeros((n_ue, n_path)),
        delay=np.zeros((n_ue, n_path)), snr=np.zeros((n_ue, n_path)),
        d_ue_uav=np.zeros((n_ue, n_path)), d_uav_sat=np.zeros(n_path),
        loss_prob=np.zeros((n_ue, n_path)), handover=np.zeros((n_ue, n_path), dtype=bool),
        burst_left=np.zeros((n_ue, n_path), dtype=np.int64),
        switched=np.zeros((n_ue, n_path), dtype=bool), uav_load=np.zeros(n_path, dtype=np.int64),
    )
    _clamp_ues(cfg, w)
    _compute_links(cfg, w, None)
    return w


def advance_slot(world: WorldState, cfg: ScenarioConfig) -> WorldState:
    """Return the world at slot ``t + 1``; the input is left untouched."""
    t = world.t + 1
    arc = world.uav_arc + np.array([lp.speed for lp in cfg.links]) * cfg.slot_length
    offset, idx = _sat_track(cfg, t)
    w = WorldState(
        t=t, seed=world.seed, ue_pos=world.ue_pos.copy(),
        uav_pos=np.array([_loop_position(lp.waypoints, arc[m]) for m, lp in enumerate(cfg.links)]),
        uav_arc=arc, sat_offset=offset, sat_index=idx,
        up=world.up.copy(), capacity=world.capacity.copy(), delay=world.delay.copy(),
        snr=world.snr.copy(), d_ue_uav=world.d_ue_uav.copy(), d_uav_sat=world.d_uav_sat.copy(),
        loss_prob=world.loss_prob.copy(), handover=world.handover.copy(),
        burst_left=world.burst_left.copy(), switched=np.zeros_like(world.switched),
        uav_load=np.zeros_like(world.uav_load),
    )
    _clamp_ues(cfg, w)
    _compute_links(cfg, w, world)
    return w


def apply_actions(world: WorldState, cfg: ScenarioConfig, actions, prev_actions) -> np.ndarray:
    """Admit the UEs' path choices for this slot (in place).

    UEs are admitted to a UAV in a per-slot shuffled order until ``Y^U`` is
    reached; the rest get ``-1`` (no transmission this slot).  A switch to a
    new path marks it ``switched`` and, when configured, starts a burst.
    """
    actions = np.asarray(actions, dtype=np.int64).copy()
    order = np.random.default_rng([world.seed, world.t, 11]).permutation(world.num_ues)
    load = np.zeros(world.num_paths, dtype=np.int64)
    for n in order:
        m = actions[n]
        if m < 0:
            continue
        if not world.up[n, m] or load[m] >= cfg.uav_capacity:
            world.events.append(("reject", int(n)))
            actions[n] = -1
            continue
        load[m] += 1
    world.uav_load[:] = load
    for n in range(world.num_ues):
        m, pm = actions[n], prev_actions[n]
        if m >= 0 and pm >= 0 and m != pm:
            world.switched[n, m] = True
            world.handover[n, m] = True
            if cfg.switch_handover and cfg.handover_burst_slots > 0:
                world.burst_left[n, m] = cfg.handover_burst_slots
                lp = cfg.links[m]
                world.loss_prob[n, m] = max(world.loss_prob[n, m], lp.burst_loss_prob)
    return actions


def handover_signal(n: int, m: int, world: WorldState, prev_action: int, cur_action: int,
                    cfg: ScenarioConfig, use_action: bool = True) -> bool:
    """Con_1: path m's scheduling indicator changed, or a distance threshold is exceeded."""
    changed = (prev_action == m) != (cur_action == m)
    return bool(
        (use_action and changed)
        or world.d_ue_uav[n, m] > cfg.d_th
        or world.d_uav_sat[m] > cfg.d_th_sat
    )


def constraints_ok(world: WorldState, cfg: ScenarioConfig) -> list[Violation]:
    out = []
    for n, (x, y) in enumerate(world.ue_pos):
        if not (0.0 <= x <= cfg.area_side and 0.0 <= y <= cfg.area_side):
            out.append(Violation("C1", n, f"UE at ({x:.1f}, {y:.1f}) outside [0, {cfg.area_side}]^2"))
    for m, load in enumerate(world.uav_load):
        if load > cfg.uav_capacity:
            out.append(Violation("C2", m, f"{load} UEs on UAV with capacity {cfg.uav_capacity}"))
    for m, d in enumerate(world.d_uav_sat):
        if d > cfg.visibility_limit:
            out.append(Violation("C3", m, f"UAV-SAT distance {d:.0f} m > {cfg.visibility_limit:.0f} m"))
    return out
