import csv
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gprsim.config import MonitorConfig
from gprsim.rhrm import LOG_HEADER, Decision, Monitor


def reference(rewards, c=MonitorConfig()):
    """Plain re-execution of the drift rules over a list; returns decisions."""
    win, out = [], []
    srwd = dev = 0.0
    cnt = 0
    alpha, mul, thr = c.alpha0, c.mul0, c.thr0
    for r in rewards:
        first = not win
        if first:
            srwd, dev, cnt = r, 0.5 * r, 0
            alpha, mul, thr = c.alpha0, c.mul0, c.thr0
        win.append(r)
        if not first:
            dev = (1 - alpha) * dev + alpha * abs(r - srwd)
        if len(win) < c.n_min:
            out.append("continue")
            continue
        if len(win) >= c.window:
            win.pop(0)
        arwd = math.fsum(win) / len(win)
        g = max(abs(srwd), 1e-9)
        f = min(dev / g, 1.0)
        alpha, mul, thr = c.alpha0 * (1 + f), c.mul0 * (1 - f), c.thr0 * (1 + f)
        if abs(arwd - srwd) / g < c.delta:
            srwd = (1 - c.beta) * srwd + c.beta * arwd
        if r > arwd + mul * dev + 1e-12 * max(abs(arwd), 1):
            cnt = max(cnt, 0) + 1
        if r < arwd - mul * dev - 1e-12 * max(abs(arwd), 1):
            cnt = min(cnt, 0) - 1
        if abs(cnt) > thr:
            cnt = 0
            out.append("light_refit" if f < c.severity else "full_retrain")
        else:
            out.append("continue")
    return out


def test_first_observation():
    m = Monitor()
    assert m.observe(10.0) is Decision.CONTINUE
    assert (m.state.srwd, m.state.dev, m.state.cnt) == (10.0, 5.0, 0)
    assert list(m.state.rwd_win) == [10.0]


def test_second_observation_by_hand():
    m = Monitor()
    m.observe(10.0)
    m.observe(12.0)
    assert m.state.dev == pytest.approx(0.9 * 5.0 + 0.1 * 2.0, rel=1e-15)
    assert m.state.arwd == 11.0


def test_constant_stream_never_escalates():
    m = Monitor()
    assert all(m.observe(7.5) is Decision.CONTINUE for _ in range(10_000))
    assert len(m.state.rwd_win) < m.cfg.window
    assert m.state.f == pytest.approx(0.0, abs=1e-12)


def test_step_change_escalates_quickly():
    c = MonitorConfig()
    m = Monitor(c)
    assert all(m.observe(10.0) is Decision.CONTINUE for _ in range(2 * c.window))
    fired = None
    for k in range(1, 30):
        if m.observe(2.0) is not Decision.CONTINUE:
            fired = k
            break
    assert fired is not None and fired <= c.thr0 + c.n_min
    assert fired >= c.thr0  # needs more than thr0 same-signed samples


def test_step_change_matches_reference():
    seq = [10.0] * 40 + [2.0] * 30 + [9.0] * 30
    m = Monitor()
    assert [m.observe(r).value for r in seq] == reference(seq)


@given(st.lists(st.floats(0.0, 20.0), min_size=1, max_size=120))
def test_matches_reference(seq):
    m = Monitor()
    assert [m.observe(r).value for r in seq] == reference(seq)


@given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=150))
def test_invariants(seq):
    c = MonitorConfig()
    m = Monitor(c)
    prev = 0
    for r in seq:
        m.observe(r)
        s = m.state
        assert len(s.rwd_win) <= c.window
        assert c.alpha0 <= s.alpha <= 2 * c.alpha0 + 1e-15
        assert 0.0 <= s.mul <= c.mul0
        assert c.thr0 <= s.thr <= 2 * c.thr0
        assert s.mul == pytest.approx(c.mul0 * (1 - s.f))
        # one step per sample; a sign change restarts from zero, so it lands on +-1
        if prev * s.cnt < 0 or s.cnt == 0:
            assert abs(s.cnt) <= 1
        else:
            assert abs(s.cnt - prev) <= 1
        prev = s.cnt


def test_zero_fluctuation_gives_base_parameters():
    c = MonitorConfig()
    m = Monitor(c)
    for _ in range(c.n_min + 30):
        m.observe(0.0)  # dev stays 0, so F = 0
    assert (m.state.alpha, m.state.mul, m.state.thr, m.state.f) == (c.alpha0, c.mul0, c.thr0, 0.0)


def test_reset():
    c = MonitorConfig(alpha0=0.2, thr0=4.0)
    m = Monitor(c)
    for r in (5.0, 1.0, 9.0, 3.0, 8.0, 2.0):
        m.observe(r)
    m.reset()
    assert m.cfg == c
    assert m.observe(6.0) is Decision.CONTINUE
    fresh = Monitor(c)
    fresh.observe(6.0)
    assert (m.state.srwd, m.state.dev, m.state.cnt, list(m.state.rwd_win)) == \
        (fresh.state.srwd, fresh.state.dev, fresh.state.cnt, list(fresh.state.rwd_win))


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        Monitor().observe(float("nan"))
    with pytest.raises(ValueError):
        Monitor(MonitorConfig(window=0))


def test_log_csv(tmp_path):
    m = Monitor()
    seq = [10.0] * 25 + [1.0] * 6
    decisions = [m.observe(r).value for r in seq]
    m.write_log(tmp_path / "m.csv")
    with (tmp_path / "m.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_HEADER
    assert [r[-1] for r in rows[1:]] == decisions
    assert [float(r[1]) for r in rows[1:]] == seq
    assert "light_refit" in decisions or "full_retrain" in decisions
