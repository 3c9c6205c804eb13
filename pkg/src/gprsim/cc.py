"""Congestion controllers: PHACC (handover-aware, with EDBSS slow start)
and an OLIA coupled baseline.

Windows are in MSS units.  Controllers act once per slot on each subflow
of a UE with the coalesced events of that slot (ACK samples, whether a loss
was detected, handover context).  The slow-start gain and the
congestion-avoidance increase are applied at most once per smoothed RTT.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import CcConfig

INITIAL_WINDOW = 4.0
MIN_WINDOW = 1.0


# ------------------------------------------------------------- estimators
@dataclass
class Estimators:
    """TP, C, tau (SRTT), D (min RTT) and T (max RTT) for one subflow."""

    tp: float = 0.0
    c_pred: float = 0.0
    srtt: float = 0.0
    rttvar: float = 0.0
    d_prop: float = 0.0
    t_max_rtt: float = 0.0
    samples: int = 0
    rtts: deque = field(default_factory=lambda: deque(maxlen=50))

    def seed_rtt(self, rtt: float) -> None:
        """Handshake RTT sample taken when the subflow is established."""
        if self.samples == 0:
            self.srtt, self.rttvar = rtt, rtt / 2.0
            self.rtts.append(rtt)
            self.d_prop = self.t_max_rtt = rtt


def update_estimators(est: Estimators, acks, interval: float, tp_ewma: float = 0.8,
                      window_bits: float | None = None):
    """Fold ``acks`` (iterable of ``(rtt_s, bits)``) observed over ``interval`` seconds.

    TP is the delivered bits over the interval (``window_bits`` when the
    caller tracks a longer ACK window).  Returns ``(TP, C, tau, D, T)``;
    with no samples every value is kept.
    """
    acks = list(acks)
    if not acks or interval <= 0:
        return est.tp, est.c_pred, est.srtt, est.d_prop, est.t_max_rtt
    bits = 0.0
    for rtt, b in acks:
        bits += b
        if est.samples == 0 and est.srtt == 0.0:
            est.srtt, est.rttvar = rtt, rtt / 2.0
        else:
            est.rttvar = 0.75 * est.rttvar + 0.25 * abs(est.srtt - rtt)
            est.srtt = 0.875 * est.srtt + 0.125 * rtt
        est.rtts.append(rtt)
        est.samples += 1
    est.tp = (bits if window_bits is None else window_bits) / interval
    est.c_pred = est.tp if est.c_pred == 0.0 else tp_ewma * est.c_pred + (1 - tp_ewma) * est.tp
    est.d_prop = min(est.rtts)
    est.t_max_rtt = max(est.rtts)
    return est.tp, est.c_pred, est.srtt, est.d_prop, est.t_max_rtt


# ------------------------------------------------------------------ EDBSS
def edbss_gain(w, sst, a=10.0, b=0.5, boost=1.0, decay=50.0, max_gain=2.0):
    # 1 / (1 + e^x) without overflow for large windows
    xi = np.exp(-np.logaddexp(0.0, a * (np.asarray(w, dtype=float) / sst - b)))
    zeta = 1.0 + boost * np.exp(-np.asarray(w, dtype=float) / decay)
    return np.minimum(1.0 + xi * zeta, max_gain)


def edbss_step(w: float, sst: float, a=10.0, b=0.5, boost=1.0, decay=50.0, max_gain=2.0) -> float:
    """One per-RTT slow-start update: ``w * min(1 + xi(w) * zeta(w), M_max)``."""
    return float(w * edbss_gain(w, sst, a, b, boost, decay, max_gain))


# ------------------------------------------------------ slow-start restart
def ema(samples, weight: float = 0.25) -> float:
    it = iter(samples)
    try:
        e = float(next(it))
    except StopIteration:
        raise ValueError("EMA of an empty history") from None
    for x in it:
        e = (1.0 - weight) * e + weight * float(x)
    return e


def init_window(history, sibling_histories, bdp_cap: float = math.inf,
                weight: float = 0.25) -> float:
    """Initial window of a created or reconnected subflow.

    Own history EMA if present, else the mean of the siblings' EMAs, else
    4 MSS; capped by ``bdp_cap`` and floored at 1 MSS.
    """
    if len(history):
        w_hat = ema(history, weight)
    else:
        emas = [ema(h, weight) for h in sibling_histories if len(h)]
        w_hat = sum(emas) / len(emas) if emas else INITIAL_WINDOW
    return max(min(bdp_cap, w_hat), MIN_WINDOW)


def bdp_cap(est: Estimators, mss: int) -> float:
    """Bandwidth-delay product in MSS; unbounded until throughput is measured."""
    if est.c_pred <= 0.0 or est.d_prop <= 0.0:
        return math.inf
    return est.c_pred * est.d_prop / (8.0 * mss)


# ---------------------------------------------------- loss classification
def classify_loss(con1: bool, con2: bool, con3: bool, w: float, gamma: float) -> tuple[float, str]:
    """Window after a loss: halve on congestion, scale by ``gamma`` on handover loss."""
    if con1 and not (con2 and con3):
        w_new, kind = gamma * w, "handover"
    else:
        w_new, kind = w / 2.0, "congestion"
    return max(math.floor(w_new), MIN_WINDOW), kind


# -------------------------------------------------- congestion avoidance
def update_lambda(prev: float, sigma: float, snr: float, snr_max: float, rho: float = 1.0) -> float:
    ratio = min(max(snr / snr_max, 0.0), 1.0) if snr_max > 0 else 0.0
    return min(sigma * ratio + (1.0 - sigma) * prev, rho)


def ca_increment(lam: float, windows, rtts, own_rtt: float, t_max_rtt: float) -> float:
    """SNR-weighted coupled increase for one subflow, in MSS.

    ``lam * 3 * max_i(w_i/tau_i)^2 * sqrt(T) / (2 * tau * (sum_i w_i/tau_i)^(5/2))``
    with w in MSS and tau in seconds.
    """
    rates = [w / r for w, r in zip(windows, rtts) if r > 0]
    total = sum(rates)
    if total <= 0 or own_rtt <= 0:
        return 0.0
    return lam * 3.0 * max(rates) ** 2 * math.sqrt(t_max_rtt) / (2.0 * own_rtt * total**2.5)


# ------------------------------------------------------------- controllers
@dataclass
class SlotEvents:
    """Coalesced per-slot input to a controller for one subflow."""

    acks: list = field(default_factory=list)  # (rtt_s, bits)
    lost: int = 0
    loss_handover_dist: bool = False  # a lost packet was sent under a distance trigger
    loss_handover_switch: bool = False  # ... or shortly after a path switch
    handover_dist: bool = False  # distance trigger right now
    handover_switch: bool = False  # path switch within the memory window right now
    snr: float = 0.0
    snr_max: float = 1.0


@dataclass
class CcState:
    lam: float = 1.0
    last_increase: float = -math.inf
    recent_acks: deque = field(default_factory=deque)  # (time, rtt, bits)
    # OLIA loss-interval bookkeeping, bytes
    l1: float = 0.0
    l2: float = 0.0


class Controller:
    name = "base"

    def __init__(self, cfg: CcConfig, mss: int):
        self.cfg = cfg
        self.mss = mss

    def new_state(self) -> CcState:
        return CcState(lam=self.cfg.lambda_init)

    def on_connect(self, sf, siblings) -> None:
        raise NotImplementedError

    def on_slot(self, subflows, events: dict, now: float, slot_length: float) -> list:
        raise NotImplementedError

    def _refresh_estimators(self, sf, ev: SlotEvents, now: float, slot_length: float):
        st = sf.cc
        for rtt, bits in ev.acks:
            st.recent_acks.append((now, rtt, bits))
        horizon = max(sf.est.srtt, slot_length)
        while st.recent_acks and st.recent_acks[0][0] <= now - horizon:
            st.recent_acks.popleft()
        # Con_2/Con_3 compare against C(t-1), D(t-1)
        c_prev, d_prev = sf.est.c_pred, sf.est.d_prop
        window_bits = sum(b for _, _, b in st.recent_acks)
        if ev.acks:
            update_estimators(sf.est, ev.acks, horizon, self.cfg.tp_ewma, window_bits=window_bits)
        return c_prev, d_prev, window_bits / horizon


class Phacc(Controller):
    """Handover-aware controller.  ``use_action=False`` drops the path-switch
    disjunct of the handover signal (the no-scheduler-prior ablation)."""

    name = "phacc"

    def __init__(self, cfg: CcConfig, mss: int, use_action: bool = True):
        super().__init__(cfg, mss)
        self.use_action = use_action
        if not use_action:
            self.name = "phacc_no_gpasp"

    def on_connect(self, sf, siblings) -> None:
        if sf.cwnd < sf.sst:
            sib = [s.history for s in siblings if s is not sf]
            sf.cwnd = init_window(sf.history, sib, bdp_cap(sf.est, self.mss), self.cfg.ema_weight)
            sf.cc.last_increase = -math.inf

    def con1(self, ev: SlotEvents) -> bool:
        sw = self.use_action
        return bool(ev.loss_handover_dist or ev.handover_dist
                    or (sw and (ev.loss_handover_switch or ev.handover_switch)))

    def on_slot(self, subflows, events, now, slot_length):
        c = self.cfg
        log = []
        for sf in subflows:
            ev = events.get(sf.path)
            if ev is None:
                continue
            c_prev, d_prev, tp_now = self._refresh_estimators(sf, ev, now, slot_length)
            if ev.lost:
                if sf.cwnd < sf.sst:
                    sf.sst = sf.cwnd  # a loss ends slow start
                con1 = self.con1(ev)
                con2 = tp_now < c_prev
                con3 = sf.est.srtt > d_prev + c.delta_r
                sf.cwnd, kind = classify_loss(con1, con2, con3, sf.cwnd, c.gamma)
                sf.sst = sf.cwnd
                sf.cc.last_increase = now
                log.append((sf.path, kind))
                continue
            if not ev.acks or now - sf.cc.last_increase < sf.est.srtt:
                continue
            sf.cc.last_increase = now
            if sf.cwnd < sf.sst:
                sf.cwnd = edbss_step(sf.cwnd, sf.sst, c.ss_a, c.ss_b, c.ss_boost,
                                     c.ss_decay, c.ss_max_gain)
                log.append((sf.path, "slow_start"))
            else:
                sf.cc.lam = update_lambda(sf.cc.lam, c.sigma, ev.snr, ev.snr_max, c.rho)
                active = [s for s in subflows if s.est.srtt > 0 and s.coupled]
                sf.cwnd += ca_increment(sf.cc.lam, [s.cwnd for s in active],
                                        [s.est.srtt for s in active], sf.est.srtt,
                                        sf.est.t_max_rtt)
                log.append((sf.path, "avoidance"))
        return log


class Olia(Controller):
    """Opportunistic linked increases: coupled per-ACK growth, halving on loss."""

    name = "olia"

    def on_connect(self, sf, siblings) -> None:
        sf.cwnd = INITIAL_WINDOW

    def alphas(self, subflows) -> dict:
        paths = [s for s in subflows if s.est.srtt > 0 and s.coupled]
        if not paths:
            return {}
        w_max = max(s.cwnd for s in paths)
        most = {s.path for s in paths if s.cwnd == w_max}
        quality = {s.path: max(s.cc.l1, s.cc.l2) / s.est.srtt**2 for s in paths}
        q_max = max(quality.values())
        best = {p for p, q in quality.items() if q == q_max}
        collected = best - most
        n = len(paths)
        out = {}
        for s in paths:
            if s.path in collected:
                out[s.path] = 1.0 / (n * len(collected))
            elif s.path in most and collected:
                out[s.path] = -1.0 / (n * len(most))
            else:
                out[s.path] = 0.0
        return out

    def increase_per_ack(self, sf, subflows, alpha: float) -> float:
        paths = [s for s in subflows if s.est.srtt > 0 and (s.coupled or s is sf)]
        total = sum(s.cwnd / s.est.srtt for s in paths)
        if total <= 0:
            return 0.0
        return (sf.cwnd / sf.est.srtt**2) / total**2 + alpha / sf.cwnd

    def on_slot(self, subflows, events, now, slot_length):
        log = []
        alphas = self.alphas(subflows)
        snapshot = {}
        for sf in subflows:
            ev = events.get(sf.path)
            if ev is None:
                continue
            self._refresh_estimators(sf, ev, now, slot_length)
            if ev.lost:
                continue
            if sf.cwnd < sf.sst:
                snapshot[sf.path] = float(len(ev.acks))
            elif ev.acks:
                snapshot[sf.path] = len(ev.acks) * self.increase_per_ack(
                    sf, subflows, alphas.get(sf.path, 0.0))
        for sf in subflows:
            ev = events.get(sf.path)
            if ev is None:
                continue
            acked_bytes = sum(b for _, b in ev.acks) / 8.0
            if ev.lost:
                sf.cc.l2, sf.cc.l1 = sf.cc.l1, 0.0
                sf.cwnd = max(sf.cwnd / 2.0, MIN_WINDOW)
                sf.sst = sf.cwnd
                log.append((sf.path, "congestion"))
                continue
            sf.cc.l1 += acked_bytes
            if sf.path in snapshot:
                log.append((sf.path, "slow_start" if sf.cwnd < sf.sst else "avoidance"))
                sf.cwnd += snapshot[sf.path]
        return log


CONTROLLERS = ("phacc", "phacc_no_gpasp", "olia")


def make_controller(name: str, cfg: CcConfig, mss: int) -> Controller:
    if name == "phacc":
        return Phacc(cfg, mss)
    if name == "phacc_no_gpasp":
        return Phacc(cfg, mss, use_action=False)
    if name == "olia":
        return Olia(cfg, mss)
    raise ValueError(f"unknown congestion controller {name!r}; valid: {', '.join(CONTROLLERS)}")
