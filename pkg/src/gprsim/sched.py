"""Per-UE path selection: random, round-robin, minRTT and the closed-form
preference estimator (NNPE).

NNPE keeps, per UE, the ridge-regularized least-squares statistics of
``score ~ S . theta`` where each sample is the feature vector the packet
was sent with and its target is ``c / t``: ``+1 / rtt`` when acknowledged
and ``-1 / T_max`` when it timed out.  The next path is the up path with the
largest linear score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SchedConfig

NO_PATH = -1
FEATURE_NAMES = ("srtt", "snr", "throughput", "headroom", "recent_loss", "up", "bias")
FEATURE_DIM = len(FEATURE_NAMES)
SCHEDULERS = ("random", "rr", "minrtt", "nnpe", "gpasp")


def path_features(srtt: float, snr: float, snr_max: float, throughput: float, cwnd: float,
                  in_flight: float, recent_loss: bool, up: bool, *, srtt_cap: float,
                  capacity_norm: float) -> np.ndarray:
    """Feature vector S of one (UE, path); every component lies in [0, 1]."""
    return np.array([
        min(max(srtt, 0.0) / srtt_cap, 1.0),
        min(max(snr / snr_max, 0.0), 1.0) if snr_max > 0 else 0.0,
        min(max(throughput, 0.0) / capacity_norm, 1.0) if capacity_norm > 0 else 0.0,
        min(max((cwnd - in_flight) / cwnd, 0.0), 1.0) if cwnd > 0 else 0.0,
        1.0 if recent_loss else 0.0,
        1.0 if up else 0.0,
        1.0,
    ])


@dataclass
class PreferenceEstimate:
    dim: int = FEATURE_DIM
    ridge: float = 1e-6
    gram: np.ndarray = None  # sum of S S^T, ridge not included
    moment: np.ndarray = None  # sum of S c / t
    count: int = 0
    _theta: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.gram is None:
            self.gram = np.zeros((self.dim, self.dim))
        if self.moment is None:
            self.moment = np.zeros(self.dim)

    def record_feedback(self, s, c: int, t_tilde: float) -> None:
        if not t_tilde > 0:
            raise ValueError(f"response time must be positive, got {t_tilde}")
        if c not in (1, -1):
            raise ValueError(f"feedback sign must be +1 or -1, got {c}")
        s = np.asarray(s, dtype=float)
        self.gram += np.outer(s, s)
        self.moment += s * (c / t_tilde)
        self.count += 1
        self._theta = None

    def decay(self, factor: float) -> None:
        if factor != 1.0:
            self.gram *= factor
            self.moment *= factor
            self._theta = None

    def ridge_term(self) -> float:
        scale = np.trace(self.gram) / self.dim
        return self.ridge * (scale if scale > 0 else 1.0)

    def estimate(self) -> np.ndarray:
        """theta = (sum S S^T + eps I)^-1 sum S c / t, cached until new data."""
        if self._theta is None:
            g = self.gram + self.ridge_term() * np.eye(self.dim)
            if self.ridge > 0:
                self._theta = np.linalg.solve(g, self.moment)
            else:
                self._theta = np.linalg.lstsq(g, self.moment, rcond=None)[0]
        return self._theta

    def reset(self) -> None:
        self.gram[:] = 0.0
        self.moment[:] = 0.0
        self.count = 0
        self._theta = None


def _up_indices(up) -> np.ndarray:
    return np.flatnonzero(np.asarray(up, dtype=bool))


def select_minrtt(srtts, up) -> int:
    idx = _up_indices(up)
    if idx.size == 0:
        return NO_PATH
    srtts = np.asarray(srtts, dtype=float)
    return int(idx[np.argmin(srtts[idx])])  # argmin keeps the first of ties


def select_path_nnpe(est: PreferenceEstimate, features, up, srtts=None) -> int:
    """Argmax of ``S^m . theta`` over up paths; minRTT until ``dim`` samples exist."""
    idx = _up_indices(up)
    if idx.size == 0:
        return NO_PATH
    if est.count < est.dim and srtts is not None:
        return select_minrtt(srtts, up)
    scores = np.asarray(features, dtype=float)[idx] @ est.estimate()
    return int(idx[np.argmax(scores)])


# --------------------------------------------------------------- schedulers
@dataclass
class UeView:
    """What a scheduler may look at for one UE in one slot."""

    up: np.ndarray  # (M,) bool
    srtt: np.ndarray  # (M,) seconds; handshake estimate for unused paths
    features: np.ndarray  # (M, FEATURE_DIM)
    history: np.ndarray | None = None  # (L, d_h) observation window


class Scheduler:
    name = "base"

    def __init__(self, num_ues: int, num_paths: int, cfg: SchedConfig, seed: int = 0):
        self.num_ues = num_ues
        self.num_paths = num_paths
        self.cfg = cfg

    def select(self, ue: int, view: UeView) -> int:
        raise NotImplementedError

    def feedback(self, ue: int, features, c: int, t_tilde: float) -> None:
        pass

    def end_slot(self) -> None:
        pass


class RandomScheduler(Scheduler):
    name = "random"

    def __init__(self, num_ues, num_paths, cfg, seed=0):
        super().__init__(num_ues, num_paths, cfg, seed)
        self.rng = np.random.default_rng([seed, 21])

    def select(self, ue, view):
        idx = _up_indices(view.up)
        return NO_PATH if idx.size == 0 else int(self.rng.choice(idx))


class RoundRobin(Scheduler):
    name = "rr"

    def __init__(self, num_ues, num_paths, cfg, seed=0):
        super().__init__(num_ues, num_paths, cfg, seed)
        self.last = [-1] * num_ues

    def select(self, ue, view):
        up = np.asarray(view.up, dtype=bool)
        for k in range(1, self.num_paths + 1):
            m = (self.last[ue] + k) % self.num_paths
            if up[m]:
                self.last[ue] = m
                return m
        return NO_PATH


class MinRtt(Scheduler):
    name = "minrtt"

    def select(self, ue, view):
        return select_minrtt(view.srtt, view.up)


class Nnpe(Scheduler):
    name = "nnpe"

    def __init__(self, num_ues, num_paths, cfg, seed=0):
        super().__init__(num_ues, num_paths, cfg, seed)
        self.estimates = [PreferenceEstimate(FEATURE_DIM, cfg.ridge) for _ in range(num_ues)]
        self.buffer = [[] for _ in range(num_ues)]  # recent samples, for refits

    def select(self, ue, view):
        return select_path_nnpe(self.estimates[ue], view.features, view.up, view.srtt)

    def feedback(self, ue, features, c, t_tilde):
        self.estimates[ue].record_feedback(features, c, t_tilde)
        buf = self.buffer[ue]
        buf.append((features, c, t_tilde))
        if len(buf) > 512:
            del buf[:256]

    def end_slot(self):
        for est in self.estimates:
            est.decay(self.cfg.decay)

    def refit(self, keep: int = 128) -> None:
        """Rebuild every estimate from only the most recent feedback."""
        for est, buf in zip(self.estimates, self.buffer):
            est.reset()
            for s, c, t in buf[-keep:]:
                est.record_feedback(s, c, t)


def make_scheduler(name: str, num_ues: int, num_paths: int, cfg: SchedConfig, seed: int = 0,
                   policy=None) -> Scheduler:
    table = {"random": RandomScheduler, "rr": RoundRobin, "minrtt": MinRtt, "nnpe": Nnpe}
    if name in table:
        return table[name](num_ues, num_paths, cfg, seed)
    if name == "gpasp":
        from .gpasp import PolicyScheduler

        return PolicyScheduler(num_ues, num_paths, cfg, seed, policy=policy)
    raise ValueError(f"unknown scheduler {name!r}; valid: {', '.join(SCHEDULERS)}")
