"""Reward drift monitor with escalating recovery.

The monitor keeps a smoothed reference reward ``srwd``, a smoothed absolute
deviation ``dev`` and a bounded window of recent rewards.  A signed counter
tracks consecutive rewards outside ``window mean +/- mul * dev``; once its
magnitude exceeds ``thr`` the monitor asks for a light refit (mild drift,
relative deviation ``F`` below the severity threshold) or a full retrain.
The relative deviation widens the smoothing rate and the trigger threshold
while narrowing the bands.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .config import MonitorConfig

EPS_GUARD = 1e-9
LOG_HEADER = ("step", "rwd", "srwd", "dev", "F", "cnt", "decision")


class Decision(enum.Enum):
    CONTINUE = "continue"
    LIGHT_REFIT = "light_refit"
    FULL_RETRAIN = "full_retrain"


@dataclass
class MonitorState:
    srwd: float = 0.0
    dev: float = 0.0
    cnt: int = 0
    rwd_win: deque = field(default_factory=deque)
    arwd: float = 0.0
    alpha: float = 0.0
    mul: float = 0.0
    thr: float = 0.0
    f: float = 0.0


class Monitor:
    def __init__(self, cfg: MonitorConfig | None = None, band_tol: float = 1e-12):
        self.cfg = cfg or MonitorConfig()
        if self.cfg.window < 1 or self.cfg.n_min < 1:
            raise ValueError("window and n_min must be at least 1")
        self.band_tol = band_tol
        self.state = MonitorState()
        self.steps = 0
        self.log: list[tuple] = []

    def reset(self) -> None:
        """Forget everything but the parameters; the next observation re-initializes."""
        self.state = MonitorState()

    def observe(self, rwd: float) -> Decision:
        if not math.isfinite(rwd):
            raise ValueError(f"reward must be finite, got {rwd}")
        c, s = self.cfg, self.state
        fresh = not s.rwd_win
        if fresh:
            s.srwd, s.dev, s.cnt, s.arwd = rwd, 0.5 * rwd, 0, 0.0
            s.alpha, s.mul, s.thr, s.f = c.alpha0, c.mul0, c.thr0, 0.0
        s.rwd_win.append(rwd)
        s.arwd = math.fsum(s.rwd_win) / len(s.rwd_win)
        if not fresh:  # the initializing sample keeps dev at its seed value
            s.dev = (1.0 - s.alpha) * s.dev + s.alpha * abs(rwd - s.srwd)
        decision = Decision.CONTINUE
        if len(s.rwd_win) >= c.n_min:
            decision = self._evaluate(rwd)
        self._record(rwd, decision)
        return decision

    def _evaluate(self, rwd: float) -> Decision:
        c, s = self.cfg, self.state
        if len(s.rwd_win) >= c.window:
            s.rwd_win.popleft()
            s.arwd = math.fsum(s.rwd_win) / len(s.rwd_win)
        guard = max(abs(s.srwd), EPS_GUARD)
        s.f = min(s.dev / guard, 1.0)
        s.alpha = c.alpha0 * (1.0 + s.f)
        s.mul = c.mul0 * (1.0 - s.f)
        s.thr = c.thr0 * (1.0 + s.f)
        if abs(s.arwd - s.srwd) / guard < c.delta:
            s.srwd = (1.0 - c.beta) * s.srwd + c.beta * s.arwd
        tol = self.band_tol * max(abs(s.arwd), 1.0)
        if rwd > s.arwd + s.mul * s.dev + tol:
            if s.cnt < 0:
                s.cnt = 0
            s.cnt += 1
        if rwd < s.arwd - s.mul * s.dev - tol:
            if s.cnt > 0:
                s.cnt = 0
            s.cnt -= 1
        if abs(s.cnt) > s.thr:
            s.cnt = 0
            return Decision.LIGHT_REFIT if s.f < c.severity else Decision.FULL_RETRAIN
        return Decision.CONTINUE

    def _record(self, rwd: float, decision: Decision) -> None:
        s = self.state
        self.log.append((self.steps, rwd, s.srwd, s.dev, s.f, s.cnt, decision.value))
        self.steps += 1

    def write_log(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for step, rwd, srwd, dev, f, cnt, dec in self.log:
                w.writerow((step, repr(rwd), repr(srwd), repr(dev), repr(f), cnt, dec))
