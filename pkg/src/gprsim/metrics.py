"""Reordering, throughput and delivery metrics for one episode.

The reorder degree of a UE's delivered packets is computed from their
arrival ranks listed in sequence order: a packet whose rank exceeds its
successor's contributes the difference, the final packet contributes
nothing, and the sum is divided by the number delivered.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCALAR_FIELDS = (
    "delivered", "ofo_degree", "ofo_degree_median", "ofo_rate", "goodput_bps",
    "plr", "pdr", "mean_delay", "jitter", "objective", "empty",
)
CSV_HEADER = SCALAR_FIELDS + ("delivered_per_ue", "ofo_per_ue")


def ofo_degree(ranks) -> tuple[float, float]:
    """Return ``(degree, rate)`` for arrival ranks listed in sequence order.

    ``ranks`` must be a permutation of ``1..n``.
    """
    x = np.asarray(ranks)
    n = x.size
    if n == 0:
        raise ValueError("need at least one delivered packet")
    if x.ndim != 1 or not np.array_equal(np.sort(x), np.arange(1, n + 1)):
        raise ValueError("arrival ranks must be a permutation of 1..n")
    drops = np.maximum(x[:-1] - x[1:], 0)
    return float(drops.sum()) / n, float(np.count_nonzero(drops)) / n


def objective(goodput_norm: float, ofo: float, w_goodput: float = 1.0, w_ofo: float = 1.0) -> float:
    if w_goodput < 0 or w_ofo < 0:
        raise ValueError("objective weights must be nonnegative")
    return w_goodput * goodput_norm - w_ofo * ofo


@dataclass
class EpisodeMetrics:
    delivered: int = 0  # D, packets over all UEs
    ofo_degree: float = 0.0  # delivered-weighted mean over UEs
    ofo_degree_median: float = 0.0  # median over UEs with deliveries
    ofo_rate: float = 0.0
    goodput_bps: float = 0.0
    plr: float = 0.0
    pdr: float = 0.0
    mean_delay: float = 0.0
    jitter: float = 0.0
    objective: float = 0.0
    empty: bool = False
    delivered_per_ue: list = field(default_factory=list)
    ofo_per_ue: list = field(default_factory=list)

    def csv_row(self) -> list[str]:
        row = [_fmt(getattr(self, k)) for k in SCALAR_FIELDS]
        row.append(";".join(str(v) for v in self.delivered_per_ue))
        row.append(";".join(_fmt(v) for v in self.ofo_per_ue))
        return row

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_csv_row(cls, row: dict) -> "EpisodeMetrics":
        kw = {}
        for k in SCALAR_FIELDS:
            v = row[k]
            kw[k] = v == "True" if k == "empty" else int(v) if k == "delivered" else float(v)
        kw["delivered_per_ue"] = [int(v) for v in row["delivered_per_ue"].split(";") if v]
        kw["ofo_per_ue"] = [float(v) for v in row["ofo_per_ue"].split(";") if v]
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool) or isinstance(v, int):
        return str(v)
    return repr(float(v))


def compute(ranks_per_ue, delays, delivered_bytes: int, dropped: int, duration: float,
            capacity_bound: float, w_goodput: float = 1.0, w_ofo: float = 1.0) -> EpisodeMetrics:
    """Metrics from per-UE rank sequences (sequence order) and delay samples."""
    counts = [len(r) for r in ranks_per_ue]
    total = sum(counts)
    if total == 0:
        return EpisodeMetrics(plr=1.0 if dropped else 0.0, pdr=0.0 if dropped else 1.0,
                              empty=True, delivered_per_ue=counts,
                              ofo_per_ue=[0.0] * len(counts),
                              objective=objective(0.0, 0.0, w_goodput, w_ofo))
    degrees, inversions = [], 0.0
    for r in ranks_per_ue:
        if len(r):
            deg, rate = ofo_degree(r)
            degrees.append(deg)
            inversions += rate * len(r)
        else:
            degrees.append(0.0)
    agg = sum(d * c for d, c in zip(degrees, counts)) / total
    goodput = delivered_bytes * 8.0 / duration
    plr = dropped / (dropped + total)
    d = np.asarray(delays, dtype=float)
    return EpisodeMetrics(
        delivered=total,
        ofo_degree=agg,
        ofo_degree_median=float(np.median([g for g, c in zip(degrees, counts) if c])),
        ofo_rate=inversions / total,
        goodput_bps=goodput,
        plr=plr,
        pdr=1.0 - plr,
        mean_delay=float(d.mean()),
        jitter=float(d.std()),
        objective=objective(goodput / capacity_bound if capacity_bound > 0 else 0.0,
                            agg, w_goodput, w_ofo),
        delivered_per_ue=counts,
        ofo_per_ue=degrees,
    )


def summarize_logs(logs, duration: float, capacity_bound: float,
                   w_goodput: float = 1.0, w_ofo: float = 1.0) -> EpisodeMetrics:
    """Live computation from the receiver's arrival logs."""
    ranks = [log.ranks_in_seq_order() for log in logs]
    delays = [x for log in logs for x in log.delays]
    return compute(ranks, delays, sum(log.delivered_bytes for log in logs),
                   sum(log.dropped for log in logs), duration, capacity_bound,
                   w_goodput, w_ofo)


def summarize_trace(rows, num_ues: int, duration: float, capacity_bound: float,
                    w_goodput: float = 1.0, w_ofo: float = 1.0) -> EpisodeMetrics:
    """Recompute from packet trace rows; deliver rows appear in arrival order."""
    arrivals = [[] for _ in range(num_ues)]
    delays, nbytes, dropped = [], 0, 0
    for _slot, ue, _path, seq, event, value, size in rows:
        if event == "deliver":
            arrivals[ue].append(seq)
            delays.append(value)
            nbytes += size
        elif event == "drop":
            dropped += 1
    ranks = []
    for seqs in arrivals:
        rank_of = {s: i + 1 for i, s in enumerate(seqs)}
        ranks.append([rank_of[s] for s in sorted(seqs)])
    return compute(ranks, delays, nbytes, dropped, duration, capacity_bound, w_goodput, w_ofo)


# -------------------------------------------------------------- file I/O
def write_csv(rows: list[tuple[dict, EpisodeMetrics]], path: str | Path) -> None:
    """Write ``(key columns, metrics)`` pairs; key columns come first."""
    path = Path(path)
    keys = list(rows[0][0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + list(CSV_HEADER))
        for key, m in rows:
            w.writerow([str(key[k]) for k in keys] + m.csv_row())


def read_csv(path: str | Path) -> list[tuple[dict, EpisodeMetrics]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            key = {k: v for k, v in row.items() if k not in CSV_HEADER}
            out.append((key, EpisodeMetrics.from_csv_row(row)))
        return out


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def mean_std(values) -> dict:
    v = [float(x) for x in values]
    if not v:
        return {"mean": 0.0, "std": 0.0, "n": 0}
    m = math.fsum(v) / len(v)
    var = math.fsum((x - m) ** 2 for x in v) / len(v)
    return {"mean": m, "std": math.sqrt(var), "n": len(v)}
