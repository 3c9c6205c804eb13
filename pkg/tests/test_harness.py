import copy
import csv
import math

import pytest

from gprsim import metrics as met
from gprsim.config import LinkParams, SimConfig
from gprsim.harness import (ExperimentSpec, aggregate, episode_seed, plot_tables, run_episode,
                            run_experiment, scaled_config, train)

H = 40


def spec(**kw):
    kw.setdefault("config", scaled_config())
    kw.setdefault("horizon", H)
    return ExperimentSpec(**kw)


def test_episode_seed_is_stable():
    assert episode_seed(0, 0) == episode_seed(0, 0)
    assert len({episode_seed(s, e) for s in range(5) for e in range(-3, 3)}) == 30


def test_zero_capacity_gives_no_goodput():
    cfg = scaled_config()
    for lp in cfg.scenario.links:
        lp.capacity = 0.0
    m = run_episode(spec(config=cfg), 0).metrics
    assert m.goodput_bps == 0.0 and m.delivered == 0 and m.empty


@pytest.mark.parametrize("sched", ["rr", "minrtt", "random", "nnpe"])
def test_single_lossless_path_is_in_order(sched):
    cfg = SimConfig()
    scen = cfg.scenario
    scen.num_ues, scen.num_paths = 2, 1
    scen.ue_positions = [[500.0, 500.0], [520.0, 500.0]]
    scen.handover_burst_slots = 0
    scen.links = [LinkParams(loss_prob=0.0, burst_loss_prob=0.0, buffer_packets=10_000,
                             snr_noise=0.0, waypoints=[[500.0, 500.0]], speed=0.0)]
    m = run_episode(spec(config=cfg, schemes=[(sched, "phacc")], horizon=100), 1).metrics
    assert m.delivered > 0
    assert m.ofo_degree == 0.0 and m.ofo_rate == 0.0


def test_episode_determinism():
    s = spec(schemes=[("nnpe", "phacc")])
    a, b = run_episode(s, 4, 2).metrics, run_episode(s, 4, 2).metrics
    assert a.csv_row() == b.csv_row()
    assert run_episode(s, 5, 2).metrics.csv_row() != a.csv_row()


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        spec(seeds=[]).validate()
    with pytest.raises(ValueError, match="valid:"):
        spec(schemes=[("nope", "phacc")]).validate()
    with pytest.raises(ValueError, match="valid:"):
        spec(schemes=[("rr", "reno")]).validate()
    with pytest.raises(ValueError):
        spec(horizon=10_000).validate()


def test_experiment_outputs(tmp_path):
    s = spec(schemes=[("rr", "phacc"), ("minrtt", "olia")], seeds=[0, 1, 2], out_dir=str(tmp_path))
    report = run_experiment(s)
    assert report["failures"] == []
    rows = met.read_csv(tmp_path / "episodes.csv")
    assert len(rows) == 6
    assert {k["scheme"] for k, _ in rows} == {"rr+phacc", "minrtt+olia"}
    stored = met.read_json(tmp_path / "aggregate.json")
    assert stored == report
    for scheme, stats in report["schemes"].items():
        mine = [m for k, m in rows if k["scheme"] == scheme]
        for key in ("goodput_bps", "plr", "ofo_degree", "mean_delay"):
            vals = [getattr(m, key) for m in mine]
            assert stats[key]["mean"] == pytest.approx(math.fsum(vals) / 3, rel=1e-12)
            assert stats[key]["n"] == 3


def test_plot_files_derive_from_episode_csv(tmp_path):
    s = spec(schemes=[("rr", "phacc"), ("nnpe", "phacc")], seeds=[0, 1], episodes=2,
             out_dir=str(tmp_path))
    run_experiment(s)
    rows = met.read_csv(tmp_path / "episodes.csv")
    assert aggregate(rows) == {k: v for k, v in met.read_json(tmp_path / "aggregate.json").items()
                               if k != "failures"}
    for name, (header, body) in plot_tables(rows).items():
        with (tmp_path / name).open(newline="") as fh:
            on_disk = list(csv.reader(fh))
        assert on_disk[0] == list(header)
        assert on_disk[1:] == [[str(x) for x in r] for r in body], name


def test_failures_are_recorded(tmp_path):
    s = spec(schemes=[("gpasp", "phacc"), ("rr", "phacc")], out_dir=str(tmp_path))
    report = run_experiment(s)
    assert len(report["failures"]) == 1
    assert "rr+phacc" in report["schemes"]


def test_traces_and_training_outputs(tmp_path):
    cfg = scaled_config()
    s = spec(config=cfg, schemes=[("gpasp", "phacc")], train=True, train_episodes=2,
             export_traces=True, out_dir=str(tmp_path))
    report = run_experiment(s)
    assert report["failures"] == []
    ck = tmp_path / "checkpoints"
    assert (ck / "gpasp_phacc_s0.npz").exists()
    with (ck / "gpasp_phacc_s0_rewards.csv").open() as fh:
        assert len(list(csv.reader(fh))) == 3
    packets = tmp_path / "traces" / "gpasp_phacc_s0_e0_packets.csv"
    assert packets.exists() and (tmp_path / "traces" / "gpasp_phacc_s0_e0_cwnd.csv").exists()


def test_training_rewards_are_finite():
    _, rewards = train(spec(train_episodes=3), 0)
    assert len(rewards) == 3 and all(math.isfinite(r) for r in rewards)


def test_scaled_config_leaves_base_alone():
    base = SimConfig()
    snap = copy.deepcopy(base)
    scaled_config(base)
    assert base == snap
