"""Episode loop and multi-seed experiments.

One slot of an episode:

1. every UE picks a path from what it can observe (links up, SRTTs,
   feature vectors, its observation window);
2. UAV admission is applied and each admitted UE sends up to its window,
   spread evenly over the slot;
3. the transport realizes drops and delivery and returns the ACKs due
   before the slot ends; expired packets time out;
4. ACKs and timeouts feed the scheduler's feedback and the congestion
   controller, which reacts once per subflow;
5. every UE's slot reward is goodput over its capacity bound minus a causal
   reorder penalty.

Outputs of :func:`run_experiment` go to one directory::

    episodes.csv              one metrics row per (scheme, seed, episode)
    aggregate.json            mean/std per metric per scheme, failures
    plot_convergence.csv      goodput per episode, averaged over seeds
    plot_loss_ofo.csv         PLR and OFO rate per scheme
    plot_delay_jitter_pdr.csv delay, jitter and PDR per scheme
    plot_ofo_degree.csv       per-UE reorder degrees (distribution samples)
    traces/                   packet and cwnd traces when exported
"""

from __future__ import annotations

import bisect
import copy
import csv
import hashlib
import math
import traceback
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as met
from .cc import CONTROLLERS, SlotEvents, make_controller
from .config import SimConfig
from .gpasp import PER_PATH_FEATURES, Learner, PolicyScheduler, Trajectory, obs_dim
from .rhrm import Decision, Monitor
from .scenario import advance_slot, apply_actions, init_world
from .sched import NO_PATH, SCHEDULERS, Nnpe, Scheduler, UeView, make_scheduler, path_features
from .transport import Transport, write_trace

CWND_HEADER = ("slot", "ue", "path", "cwnd", "sst", "phase", "event")
CWND_NORM = 64.0


@dataclass
class ExperimentSpec:
    config: SimConfig = field(default_factory=SimConfig)
    schemes: list = field(default_factory=lambda: [("minrtt", "phacc")])  # (scheduler, cc)
    episodes: int = 1
    seeds: list = field(default_factory=lambda: [0])
    train: bool = False
    train_episodes: int | None = None  # defaults to ``episodes``
    horizon: int | None = None  # slots; defaults to one SAT service period
    out_dir: str | None = None
    export_traces: bool = False
    checkpoint: str | None = None

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        n_t = self.config.scenario.slots_per_period
        if self.horizon is not None and not 1 <= self.horizon <= n_t:
            raise ValueError(f"horizon must lie in [1, {n_t}]")
        for sched, cc in self.schemes:
            if sched not in SCHEDULERS:
                raise ValueError(f"unknown scheduler {sched!r}; valid: {', '.join(SCHEDULERS)}")
            if cc not in CONTROLLERS:
                raise ValueError(f"unknown congestion controller {cc!r}; valid: {', '.join(CONTROLLERS)}")
        self.config.validate()

    @property
    def slots(self) -> int:
        return self.horizon or self.config.scenario.slots_per_period


def episode_seed(seed: int, episode: int) -> int:
    """World seed of one episode, stable across runs and platforms."""
    digest = hashlib.sha256(f"{seed}:{episode}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


class _OfoTracker:
    """Causal per-slot reorder penalty.

    When packet ``i`` arrives after some larger sequence numbers, it is
    credited with its rank minus the rank of the smallest such number.
    """

    def __init__(self):
        self.seqs: list[int] = []
        self.rank: dict[int, int] = {}

    def arrive(self, seq: int) -> int:
        r = len(self.rank) + 1
        self.rank[seq] = r
        pos = bisect.bisect_right(self.seqs, seq)
        self.seqs.insert(pos, seq)
        if pos + 1 < len(self.seqs):
            return r - self.rank[self.seqs[pos + 1]]
        return 0


@dataclass
class EpisodeResult:
    metrics: met.EpisodeMetrics
    mean_reward: float
    trace: list
    cwnd_trace: list
    trajectory: Trajectory | None = None
    conservation_ok: bool = True


class Episode:
    """One run of ``horizon`` slots on a freshly initialized world."""

    def __init__(self, cfg: SimConfig, scheduler: Scheduler, cc_name: str, world_seed: int,
                 horizon: int, learner: Learner | None = None, collect: bool = False,
                 record_trace: bool = True):
        self.cfg = cfg
        scen = cfg.scenario
        self.N, self.M = scen.num_ues, scen.num_paths
        self.scheduler = scheduler
        self.controller = make_controller(cc_name, cfg.cc, scen.mss)
        self.transport = Transport(cfg, self.controller, record_trace=record_trace)
        self.world = init_world(scen, world_seed)
        self.rng = np.random.default_rng([world_seed, 3])
        self.noise_rng = np.random.default_rng([world_seed, 5])
        self.horizon = horizon
        self.learner = learner
        self.collect = collect
        self.traj = Trajectory() if collect else None
        self.cap_norm = max(lp.capacity for lp in scen.links) or 1.0
        self.cap_total = sum(lp.capacity for lp in scen.links)
        self.ue_bound = self.cap_norm
        L = cfg.gpasp.history
        self.d_h = obs_dim(self.M, cfg.gpasp.noise_channels)
        self.windows = np.zeros((self.N, L, self.d_h))
        self.prev_path = np.full(self.N, NO_PATH)
        self.last_change = np.full((self.N, self.M), -(10**9))
        self.last_loss = np.full((self.N, self.M), -(10**9))
        self.ofo = [_OfoTracker() for _ in range(self.N)]
        self.cwnd_trace: list = []
        self.rewards: list[float] = []
        self.conservation_ok = True
        self.interval = max(cfg.gpasp.decision_interval, 1)
        self.held = None
        self.open_step = False
        self.acc_reward = np.zeros(self.N)
        self.acc_slots = 0

    # ---------------------------------------------------------- observing
    def _srtt(self, n: int, m: int) -> float:
        sf = self.transport.subflows[n][m]
        return sf.est.srtt if sf.est.srtt > 0 else 2.0 * self.world.delay[n, m]

    def _features(self, n: int, m: int) -> np.ndarray:
        w, sf = self.world, self.transport.subflows[n][m]
        t = w.t
        return path_features(
            self._srtt(n, m), w.snr[n, m], self.cfg.scenario.links[m].snr_max, sf.est.tp,
            sf.cwnd, sf.in_flight, t - self.last_loss[n, m] <= self.cfg.sched.loss_memory_slots,
            bool(w.up[n, m]), srtt_cap=self.cfg.sched.srtt_cap, capacity_norm=self.cap_norm,
        )

    def _obs_row(self, n: int) -> np.ndarray:
        w = self.world
        row = np.zeros(self.d_h)
        cap = self.cfg.sched.srtt_cap
        for m in range(self.M):
            sf = self.transport.subflows[n][m]
            lp = self.cfg.scenario.links[m]
            row[m * PER_PATH_FEATURES:(m + 1) * PER_PATH_FEATURES] = (
                min(self._srtt(n, m) / cap, 1.0) if w.up[n, m] else 1.0,
                max(w.snr[n, m] / lp.snr_max, 0.0) if w.up[n, m] else 0.0,
                min(sf.est.tp / self.cap_norm, 1.0),
                1.0 if w.t - self.last_loss[n, m] <= self.cfg.sched.loss_memory_slots else 0.0,
                min(sf.cwnd / CWND_NORM, 1.0),
                len(self.transport.waiting[m]) / max(lp.buffer_packets, 1),
            )
        k = self.cfg.gpasp.noise_channels
        if k:
            row[-k:] = self.noise_rng.standard_normal(k)
        return row

    def _push_windows(self) -> None:
        self.windows = np.roll(self.windows, -1, axis=1)
        for n in range(self.N):
            self.windows[n, -1] = self._obs_row(n)

    # ------------------------------------------------------------ running
    def choose(self) -> np.ndarray:
        w = self.world
        learned = self.collect or isinstance(self.scheduler, PolicyScheduler)
        if learned and w.t % self.interval and self.held is not None:
            return self.held
        if isinstance(self.scheduler, PolicyScheduler):
            self.scheduler.decide(self.windows, w.up)
            self.held = np.array(self.scheduler.last[0])
            return self.held
        if self.collect:
            self._close(done=False)
            acts, logp, _ = self.learner.act(self.windows, w.up, "sample")
            self.traj.append(self.windows, w.up, acts, logp)
            self.open_step = True
            self.held = acts
            return acts
        actions = np.full(self.N, NO_PATH)
        for n in range(self.N):
            view = UeView(
                up=w.up[n].copy(),
                srtt=np.array([self._srtt(n, m) for m in range(self.M)]),
                features=np.stack([self._features(n, m) for m in range(self.M)]),
                history=self.windows[n],
            )
            actions[n] = self.scheduler.select(n, view)
        return actions

    def step(self) -> None:
        cfg, scen, w = self.cfg, self.cfg.scenario, self.world
        t = w.t
        tau = scen.slot_length
        clock, end = t * tau, (t + 1) * tau
        self._push_windows()
        chosen = self.choose()
        admitted = apply_actions(w, scen, chosen, self.prev_path)
        for n in range(self.N):
            m = admitted[n]
            for k in range(self.M):
                was, now = self.prev_path[n] == k, m == k
                if m >= 0 and was != now:
                    self.last_change[n, k] = t
        mem = cfg.cc.switch_memory_slots
        tp = self.transport
        sent = []
        active = []
        for n in range(self.N):
            m = int(admitted[n])
            if m < 0:
                continue
            sf = tp.subflows[n][m]
            link = w.link(n, m)
            tp.connect(sf, link, clock)
            active.append(sf)
            room = max(math.floor(sf.cwnd - sf.in_flight + 1e-9), 1)
            limit = int(cfg.transport.app_rate) if cfg.transport.app_rate > 0 else None
            sent += tp.try_send(
                sf, link, clock, t, features=self._features(n, m), limit=limit,
                spacing=tau / room,
                ho_dist=bool(w.d_ue_uav[n, m] > scen.d_th or w.d_uav_sat[m] > scen.d_th_sat),
                ho_switch=bool(t - self.last_change[n, m] < mem),
            )
            self.prev_path[n] = m
        acks, _ = tp.deliver_step(sent, w, self.rng, end, t)

        events: dict = defaultdict(dict)

        def ev(n, m):
            if m not in events[n]:
                events[n][m] = SlotEvents(
                    handover_dist=bool(w.d_ue_uav[n, m] > scen.d_th or w.d_uav_sat[m] > scen.d_th_sat),
                    handover_switch=bool(t - self.last_change[n, m] < mem),
                    snr=float(w.snr[n, m]), snr_max=scen.links[m].snr_max,
                )
            return events[n][m]

        for sf in active:
            ev(sf.ue, sf.path)
        for pkt in acks:
            sf = tp.subflows[pkt.ue][pkt.path]
            rtt = pkt.ack_at - pkt.send_time
            fb = tp.on_ack(sf, pkt, rtt, t)
            if fb is not None:
                self.scheduler.feedback(fb.ue, fb.features, fb.c, fb.t_tilde)
                ev(pkt.ue, pkt.path).acks.append((rtt, pkt.size * 8))
        for row in tp.subflows:
            for sf in row:
                if sf.in_flight == 0:
                    continue
                expired = tp.expired(sf, end)
                if not expired:
                    continue
                t_max = tp.t_max(sf)
                e = ev(sf.ue, sf.path)
                for pkt in expired:
                    fb = tp.on_timeout(sf, pkt, t_max, t)
                    if fb is None:
                        continue
                    self.scheduler.feedback(fb.ue, fb.features, fb.c, fb.t_tilde)
                    e.lost += 1
                    e.loss_handover_dist |= pkt.ho_dist
                    e.loss_handover_switch |= pkt.ho_switch
                self.last_loss[sf.ue, sf.path] = t

        tp.refresh_coupling(end)
        logged = set()
        for n, per_path in events.items():
            for path, kind in self.controller.on_slot(tp.subflows[n], per_path, end, tau):
                sf = tp.subflows[n][path]
                logged.add((n, path))
                self.cwnd_trace.append((t, n, path, sf.cwnd, sf.sst,
                                        "ss" if sf.cwnd < sf.sst else "ca", kind))
        for sf in active:
            sf.history.append(sf.cwnd)
            if (sf.ue, sf.path) not in logged:
                self.cwnd_trace.append((t, sf.ue, sf.path, sf.cwnd, sf.sst,
                                        "ss" if sf.cwnd < sf.sst else "ca", "send"))
        self.scheduler.end_slot()

        # per-UE reward
        bits = np.zeros(self.N)
        penalty = np.zeros(self.N)
        count = np.zeros(self.N)
        for pkt in tp.delivered_now:
            bits[pkt.ue] += pkt.size * 8
            penalty[pkt.ue] += self.ofo[pkt.ue].arrive(pkt.seq)
            count[pkt.ue] += 1
        ofo = np.divide(penalty, count, out=np.zeros(self.N), where=count > 0)
        ob = cfg.objective
        rewards = ob.w_goodput * bits / (tau * self.ue_bound) - ob.w_ofo * ofo
        self.rewards.append(float(rewards.mean()))
        s, a, lo, f = tp.counts()
        self.conservation_ok &= s == a + lo + f
        self.acc_reward += rewards
        self.acc_slots += 1
        self.world = advance_slot(w, scen)

    def _close(self, done: bool) -> None:
        # a held action is credited with the mean reward over its slots
        if self.open_step:
            self.traj.close_step(self.windows, self.acc_reward / max(self.acc_slots, 1), done)
        self.open_step = False
        self.acc_reward = np.zeros(self.N)
        self.acc_slots = 0

    def run(self) -> EpisodeResult:
        for _ in range(self.horizon):
            self.step()
        if self.collect:
            self._push_windows()
            self._close(done=True)
        scen = self.cfg.scenario
        duration = self.horizon * scen.slot_length
        m = met.summarize_logs(self.transport.logs, duration, self.cap_total,
                               self.cfg.objective.w_goodput, self.cfg.objective.w_ofo)
        return EpisodeResult(m, float(np.mean(self.rewards)) if self.rewards else 0.0,
                             self.transport.trace, self.cwnd_trace, self.traj,
                             self.conservation_ok)


# ------------------------------------------------------------ experiments
def build_scheduler(name: str, cfg: SimConfig, seed: int, learner: Learner | None = None) -> Scheduler:
    scen = cfg.scenario
    if name == "gpasp" and learner is None:
        raise ValueError("the gpasp scheduler needs a checkpoint or a training run")
    return make_scheduler(name, scen.num_ues, scen.num_paths, cfg.sched, seed, policy=learner)


def run_episode(spec: ExperimentSpec, seed: int, episode: int = 0, scheme=None,
                scheduler: Scheduler | None = None, learner: Learner | None = None,
                collect: bool = False) -> EpisodeResult:
    """Run one episode; ``scheduler`` may be passed in to keep state across episodes."""
    sched_name, cc_name = scheme or spec.schemes[0]
    if scheduler is None:
        scheduler = build_scheduler(sched_name, spec.config, seed, learner)
    ep = Episode(spec.config, scheduler, cc_name, episode_seed(seed, episode), spec.slots,
                 learner=learner, collect=collect, record_trace=spec.export_traces)
    return ep.run()


def train(spec: ExperimentSpec, seed: int, cc_name: str | None = None,
          monitor: Monitor | None = None, progress=None) -> tuple[Learner, list[float]]:
    """Train the latent policy for ``spec.train_episodes`` episodes; returns it and the
    mean reward of every episode."""
    cfg = spec.config
    cc_name = cc_name or spec.schemes[0][1]
    learner = Learner(cfg.gpasp, cfg.scenario.num_paths, seed)
    sched = Scheduler(cfg.scenario.num_ues, cfg.scenario.num_paths, cfg.sched, seed)
    rewards = []
    for e in range(spec.train_episodes or spec.episodes):
        # negative indices keep training worlds apart from evaluation worlds
        res = run_episode(spec, seed, -1 - e, ("minrtt", cc_name), scheduler=sched,
                          learner=learner, collect=True)
        learner.train_step(res.trajectory)
        rewards.append(res.mean_reward)
        if monitor is not None:
            if monitor.observe(res.mean_reward + cfg.monitor.reward_shift) is Decision.FULL_RETRAIN:
                for _ in range(cfg.monitor.refit_steps):
                    learner.train_step(res.trajectory)
        if progress:
            progress(e, res.mean_reward)
    return learner, rewards


def _train_for(spec: ExperimentSpec, seed: int, cc_name: str, out: Path | None) -> Learner:
    monitor = Monitor(spec.config.monitor) if spec.config.monitor.enabled else None
    learner, rewards = train(spec, seed, cc_name, monitor)
    if out:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        stem = ckpt / f"gpasp_{cc_name}_s{seed}"
        learner.save(f"{stem}.npz")
        learner.write_log(f"{stem}_log.csv")
        with open(f"{stem}_rewards.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("episode", "mean_reward"))
            w.writerows((e, repr(r)) for e, r in enumerate(rewards))
    return learner


def _key_columns(scheme, seed, episode) -> dict:
    return {"scheme": f"{scheme[0]}+{scheme[1]}", "scheduler": scheme[0], "cc": scheme[1],
            "seed": seed, "episode": episode}


def run_experiment(spec: ExperimentSpec) -> dict:
    """Run every (scheme, seed, episode); write outputs when ``out_dir`` is set."""
    spec.validate()
    out = Path(spec.out_dir) if spec.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if spec.export_traces:
            (out / "traces").mkdir(exist_ok=True)
    rows, failures = [], []
    learner = Learner.load(spec.checkpoint) if spec.checkpoint else None
    for scheme in spec.schemes:
        sched_name, cc_name = scheme
        for seed in spec.seeds:
            monitor = Monitor(spec.config.monitor) if spec.config.monitor.enabled else None
            policy = learner
            try:
                if sched_name == "gpasp" and spec.train and learner is None:
                    policy = _train_for(spec, seed, cc_name, out)
                scheduler = build_scheduler(sched_name, spec.config, seed, policy)
            except Exception as exc:  # recorded, run continues
                failures.append({"scheme": f"{sched_name}+{cc_name}", "seed": seed, "error": str(exc)})
                continue
            for e in range(spec.episodes):
                key = _key_columns(scheme, seed, e)
                try:
                    res = run_episode(spec, seed, e, scheme, scheduler=scheduler)
                except Exception:
                    failures.append({**key, "error": traceback.format_exc(limit=1).strip()})
                    continue
                rows.append((key, res.metrics))
                if monitor is not None:
                    decision = monitor.observe(res.mean_reward + spec.config.monitor.reward_shift)
                    if decision is Decision.LIGHT_REFIT and isinstance(scheduler, Nnpe):
                        scheduler.refit()
                if out and spec.export_traces:
                    stem = out / "traces" / f"{sched_name}_{cc_name}_s{seed}_e{e}"
                    write_trace(res.trace, f"{stem}_packets.csv")
                    write_cwnd_trace(res.cwnd_trace, f"{stem}_cwnd.csv")
            if monitor is not None and out:
                monitor.write_log(out / f"monitor_{sched_name}_{cc_name}_s{seed}.csv")
    report = aggregate(rows)
    report["failures"] = failures
    if out:
        met.write_csv(rows, out / "episodes.csv")
        met.write_json(report, out / "aggregate.json")
        write_plot_data(rows, out)
    return report


METRIC_KEYS = ("delivered", "ofo_degree", "ofo_degree_median", "ofo_rate", "goodput_bps",
               "plr", "pdr", "mean_delay", "jitter", "objective")


def aggregate(rows) -> dict:
    by_scheme: dict = defaultdict(list)
    for key, m in rows:
        by_scheme[key["scheme"]].append(m)
    return {"schemes": {s: {k: met.mean_std([getattr(m, k) for m in ms]) for k in METRIC_KEYS}
                        for s, ms in sorted(by_scheme.items())}}


def plot_tables(rows) -> dict:
    """Figure-ready tables computed from per-episode rows only."""
    conv: dict = defaultdict(list)
    per_scheme: dict = defaultdict(list)
    dist = []
    for key, m in rows:
        conv[(key["scheme"], int(key["episode"]))].append(m.goodput_bps)
        per_scheme[key["scheme"]].append(m)
        for ue, deg in enumerate(m.ofo_per_ue):
            if m.delivered_per_ue and m.delivered_per_ue[ue]:
                dist.append((key["scheme"], key["seed"], key["episode"], ue, repr(float(deg))))

    def mean(ms, k):
        return repr(met.mean_std([getattr(m, k) for m in ms])["mean"])

    return {
        "plot_convergence.csv": (("scheme", "episode", "goodput_bps"),
                                 [(s, e, repr(met.mean_std(v)["mean"]))
                                  for (s, e), v in sorted(conv.items())]),
        "plot_loss_ofo.csv": (("scheme", "plr", "ofo_rate"),
                              [(s, mean(ms, "plr"), mean(ms, "ofo_rate"))
                               for s, ms in sorted(per_scheme.items())]),
        "plot_delay_jitter_pdr.csv": (("scheme", "mean_delay", "jitter", "pdr"),
                                      [(s, mean(ms, "mean_delay"), mean(ms, "jitter"), mean(ms, "pdr"))
                                       for s, ms in sorted(per_scheme.items())]),
        "plot_ofo_degree.csv": (("scheme", "seed", "episode", "ue", "ofo_degree"), dist),
    }


def write_plot_data(rows, out: Path) -> None:
    for name, (header, body) in plot_tables(rows).items():
        with (out / name).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(body)


def write_cwnd_trace(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CWND_HEADER)
        for slot, ue, p, cwnd, sst, phase, event in rows:
            w.writerow((slot, ue, p, repr(float(cwnd)), repr(float(sst)), phase, event))


def scaled_config(base: SimConfig | None = None) -> SimConfig:
    """Small learning scenario: 3 UEs, 2 unlike paths, handovers on a schedule."""
    cfg = copy.deepcopy(base) if base is not None else SimConfig()
    scen = cfg.scenario
    from .config import LinkParams

    scen.num_ues, scen.num_paths = 3, 2
    scen.slots_per_period = 100
    scen.sat_pass_slots = 50  # two SAT changes per episode
    scen.ue_positions = [[450.0, 500.0], [500.0, 450.0], [550.0, 550.0]]
    scen.links = [
        LinkParams(base_delay=0.015, capacity=6e6, snr_max=26.0, loss_prob=0.04,
                   burst_loss_prob=0.5, buffer_packets=40,
                   waypoints=[[300.0, 500.0], [700.0, 500.0]], speed=40.0),
        LinkParams(base_delay=0.035, capacity=8e6, snr_max=30.0, loss_prob=0.002,
                   burst_loss_prob=0.2, buffer_packets=80,
                   waypoints=[[500.0, 400.0], [500.0, 600.0]], speed=20.0),
    ]
    scen.uav_capacity = 3
    cfg.validate()
    return cfg
