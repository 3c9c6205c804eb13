"""Command line entry point: ``gprsim --config FILE --scheduler minrtt,nnpe ...``.

Flags override the config's ``[experiment]`` table.  With ``--train`` every
gpasp scheme first trains one policy per seed (saved under
``OUT/checkpoints``); with ``--checkpoint`` a saved policy is evaluated
instead.
"""

from __future__ import annotations

import argparse
import sys

from . import config as cfgmod
from .cc import CONTROLLERS
from .harness import ExperimentSpec, run_experiment
from .sched import SCHEDULERS

EXPERIMENT_KEYS = {"schedulers", "ccs", "seeds", "episodes", "train", "train_episodes",
                   "horizon", "export_traces", "checkpoint", "out"}


def parse_seeds(text: str) -> list[int]:
    """``"1,2,3"`` or ranges like ``"0-9"``, comma separated."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep and lo:
            a, b = int(lo), int(hi)
            if b < a:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(a, b + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _names(text: str, valid: tuple, what: str) -> list[str]:
    names = [n.strip() for n in text.split(",") if n.strip()]
    bad = [n for n in names if n not in valid]
    if bad or not names:
        raise ValueError(f"unknown {what} {', '.join(bad) or '(none)'}; valid: {', '.join(valid)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gprsim", description="Multipath scheduling and congestion control simulator.")
    p.add_argument("--config", help="TOML config (default: the shipped default scenario)")
    p.add_argument("--scheduler", help=f"comma list of {', '.join(SCHEDULERS)}")
    p.add_argument("--cc", help=f"comma list of {', '.join(CONTROLLERS)}")
    p.add_argument("--seeds", help="comma list, ranges allowed (0-9)")
    p.add_argument("--episodes", type=int, help="evaluation episodes per seed")
    p.add_argument("--train", action="store_true", default=None, help="train gpasp per seed first")
    p.add_argument("--train-episodes", type=int, help="training episodes (default: --episodes)")
    p.add_argument("--horizon", type=int, help="slots per episode (default: one SAT period)")
    p.add_argument("--out", help="output directory (default: results)")
    p.add_argument("--export-traces", action="store_true", default=None, help="write packet and cwnd traces")
    p.add_argument("--checkpoint", help="saved gpasp policy to evaluate")
    p.add_argument("--quiet", action="store_true", help="no summary table")
    return p


def make_spec(args: argparse.Namespace) -> ExperimentSpec:
    path = args.config or cfgmod.default_config_path()
    sim, exp = cfgmod.load(path)
    unknown = set(exp) - EXPERIMENT_KEYS
    if unknown:
        raise cfgmod.ConfigError(f"unknown key(s) in [experiment]: {', '.join(sorted(unknown))}")

    def pick(flag, key, default):
        return flag if flag is not None else exp.get(key, default)

    scheds = _names(args.scheduler, SCHEDULERS, "scheduler") if args.scheduler else \
        _names(",".join(exp.get("schedulers", ["minrtt"])), SCHEDULERS, "scheduler")
    ccs = _names(args.cc, CONTROLLERS, "congestion controller") if args.cc else \
        _names(",".join(exp.get("ccs", ["phacc"])), CONTROLLERS, "congestion controller")
    seeds = parse_seeds(args.seeds) if args.seeds else [int(s) for s in exp.get("seeds", [0])]
    spec = ExperimentSpec(
        config=sim,
        schemes=[(s, c) for s in scheds for c in ccs],
        episodes=int(pick(args.episodes, "episodes", 1)),
        seeds=seeds,
        train=bool(pick(args.train, "train", False)),
        train_episodes=pick(args.train_episodes, "train_episodes", None),
        horizon=pick(args.horizon, "horizon", None),
        out_dir=pick(args.out, "out", "results"),
        export_traces=bool(pick(args.export_traces, "export_traces", False)),
        checkpoint=pick(args.checkpoint, "checkpoint", None),
    )
    if "gpasp" in scheds and not (spec.train or spec.checkpoint):
        raise ValueError("the gpasp scheduler needs --train or --checkpoint")
    spec.validate()
    return spec


def summary_lines(report: dict) -> list[str]:
    lines = [f"{'scheme':<24}{'goodput Mb/s':>14}{'PLR':>9}{'OFO rate':>10}{'OFO deg':>9}"]
    for name, m in report["schemes"].items():
        lines.append(f"{name:<24}{m['goodput_bps']['mean'] / 1e6:>14.3f}{m['plr']['mean']:>9.4f}"
                     f"{m['ofo_rate']['mean']:>10.4f}{m['ofo_degree']['mean']:>9.3f}")
    for f in report["failures"]:
        lines.append(f"failed: {f}")
    return lines


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = make_spec(args)
    except (ValueError, OSError) as exc:
        print(f"gprsim: error: {exc}", file=sys.stderr)
        return 2
    report = run_experiment(spec)
    if not args.quiet:
        print("\n".join(summary_lines(report)))
    if report["failures"] and not report["schemes"]:
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
