import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gprsim import autodiff as ad
from gprsim import gpasp as G
from gprsim.config import GpaspConfig, SchedConfig
from gprsim.sched import NO_PATH
from helpers import gradcheck

SMALL = GpaspConfig(history=3, d_k=4, d_model=8, d_z=3, hidden=8)


def params(cfg=SMALL, M=2, seed=0):
    return G.init_params(cfg, G.obs_dim(M), M, seed)


# ------------------------------------------------------------- encoder
def test_encoder_shapes_and_batch_consistency():
    p = G.as_tensors(params())
    h = np.random.default_rng(0).standard_normal((5, 3, 12))
    g = G.encode(h, p)
    assert g.mu.shape == (5, 3) and g.logvar.shape == (5, 3)
    one = G.encode(h[2], p)
    np.testing.assert_allclose(one.mu.data, g.mu.data[2], rtol=1e-12)
    with pytest.raises(ValueError):
        G.encode(np.zeros((3, 7)), p)


def test_encoder_ignores_row_order_of_identical_rows():
    # without positional terms, swapping two identical rows cannot matter
    p = G.as_tensors(params())
    rng = np.random.default_rng(1)
    row, other = rng.standard_normal(12), rng.standard_normal(12)
    a = G.encode(np.stack([row, row, other]), p).mu.data
    b = G.encode(np.stack([row, other, row]), p).mu.data
    c = G.encode(np.stack([other, row, row]), p).mu.data
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(a, c, rtol=1e-12)


def test_logvar_clamped():
    p = params()
    p["enc.mlp.b2"][3:] = 100.0
    g = G.encode(np.zeros((3, 12)), G.as_tensors(p))
    assert (g.logvar.data == G.LOGVAR_MAX).all()


def test_encoder_gradients():
    base = params()
    h = np.random.default_rng(2).standard_normal((2, 3, 12))
    for key in ("enc.Wq", "enc.Wo", "enc.q", "enc.mlp.W0"):
        def fn(w, key=key):
            p = G.as_tensors(base)
            p[key] = w
            g = G.encode(h, p)
            return g.mu + g.logvar
        assert gradcheck(fn, [base[key]]) <= 1e-4, key


# ------------------------------------------------------ reparameterize
def test_reparameterize_examples():
    g = G.LatentGaussian(ad.Tensor([1.0, -2.0]), ad.Tensor([0.3, 0.0]))
    np.testing.assert_array_equal(G.reparameterize(g, np.zeros(2)).data, [1.0, -2.0])
    assert G.reparameterize(g, np.ones(2)).data[1] == -1.0


def test_reparameterize_gradients():
    mu = ad.Tensor([0.5, -1.0], requires_grad=True)
    lv = ad.Tensor([0.2, -0.4], requires_grad=True)
    eps = np.array([0.7, -1.3])
    G.reparameterize(G.LatentGaussian(mu, lv), eps).sum().backward()
    np.testing.assert_allclose(mu.grad, [1.0, 1.0])
    np.testing.assert_allclose(lv.grad, 0.5 * np.exp(0.5 * lv.data) * eps, rtol=1e-12)
    fn = lambda m, v: G.reparameterize(G.LatentGaussian(m, v), eps)  # noqa: E731
    assert gradcheck(fn, [mu.data, lv.data]) <= 1e-5


# ---------------------------------------------------------------- GAE
def brute_gae(r, v, v_next, done, gamma, lam):
    T = len(r)
    delta = [r[t] + gamma * (1 - done[t]) * v_next[t] - v[t] for t in range(T)]
    out = []
    for t in range(T):
        total, coef = 0.0, 1.0
        for k in range(t, T):
            total += coef * delta[k]
            if done[k]:
                break
            coef *= gamma * lam
        out.append(total)
    return np.array(out)


def test_gae_single_step():
    adv, target = G.gae([1.0], [0.5], [2.0], [0.0], 0.9, 0.95)
    assert adv[0] == 1.0 + 0.9 * 2.0 - 0.5
    assert target[0] == adv[0] + 0.5


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(0)
    r, v, vn = rng.standard_normal((3, 6))
    adv, _ = G.gae(r, v, vn, np.zeros(6), 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * vn - v, rtol=0, atol=1e-15)


@given(st.integers(1, 10), st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_expansion(T, seed, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v, vn = rng.standard_normal((3, T))
    done = (rng.random(T) < 0.2).astype(float)
    adv, target = G.gae(r, v, vn, done, gamma, lam)
    assert np.abs(adv - brute_gae(r, v, vn, done, gamma, lam)).max() <= 1e-10
    np.testing.assert_allclose(target, adv + v)


# --------------------------------------------------------------- PPO
def test_ppo_surrogate_at_unit_ratio():
    logits = ad.Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    logp = G.ad.log_softmax(logits).data
    acts = np.array([0, 2, 1, 1])
    adv = np.array([0.5, -1.0, 2.0, 0.1])
    out = G.ppo_losses(logits, ad.Tensor(np.zeros(4)), acts, logp[np.arange(4), acts], adv,
                       np.zeros(4), 0.2)
    assert out["pi"].item() == pytest.approx(-adv.mean(), rel=1e-12)


def test_ppo_clip_boundary():
    eps = 0.2
    logits = ad.Tensor([[0.0, 0.0]])
    old = math.log(0.5) - math.log(1 + 2 * eps)  # ratio = 1 + 2 eps
    out = G.ppo_losses(logits, ad.Tensor([0.0]), [0], [old], [1.5], [0.0], eps)
    assert out["pi"].item() == pytest.approx(-(1 + eps) * 1.5, rel=1e-12)


def test_uniform_entropy():
    out = G.ppo_losses(ad.Tensor(np.zeros((2, 4))), ad.Tensor(np.zeros(2)), [0, 1], [0.0, 0.0],
                       [0.0, 0.0], [0.0, 0.0], 0.2)
    assert out["entropy"].item() == pytest.approx(math.log(4), rel=1e-12)
    assert G.entropy_of(np.zeros(4)) == pytest.approx(math.log(4))


def test_ppo_gradients():
    rng = np.random.default_rng(3)
    acts = np.array([0, 1, 2])
    old = rng.uniform(-2, -0.5, 3)
    adv, tgt = rng.standard_normal(3), rng.standard_normal(3)

    def fn(lg, v):
        return G.ppo_losses(lg, v, acts, old, adv, tgt, 0.2)["total"]

    assert gradcheck(fn, [rng.standard_normal((3, 3)), rng.standard_normal(3)]) <= 1e-4


# ---------------------------------------------------------------- aux
def kl_oracle(mu_p, lv_p, mu_t, lv_t):
    vp, vt = math.exp(lv_p), math.exp(lv_t)
    return 0.5 * (math.log(vp / vt) + (vt + (mu_t - mu_p) ** 2) / vp - 1)


def test_aux_kl_values():
    same = G.aux_kl(G.LatentGaussian(ad.Tensor([0.3, -1.0]), ad.Tensor([0.1, 0.5])),
                    [0.3, -1.0], [0.1, 0.5])
    assert same.item() == pytest.approx(0.0, abs=1e-15)
    gap = G.aux_kl(G.LatentGaussian(ad.Tensor([0.0]), ad.Tensor([0.0])), [1.0], [0.0])
    assert gap.item() == 0.5


@given(st.lists(st.tuples(*[st.floats(-3, 3)] * 4), min_size=1, max_size=5))
def test_aux_kl_matches_scalar_formula(dims):
    mp, lp, mt, lt = (np.array(x) for x in zip(*dims))
    got = G.aux_kl(G.LatentGaussian(ad.Tensor(mp), ad.Tensor(lp)), mt, lt).item()
    want = sum(kl_oracle(*d) for d in dims)
    assert got == pytest.approx(want, rel=1e-10, abs=1e-12)
    assert got >= -1e-12


def test_aux_kl_stop_gradient():
    rng = np.random.default_rng(0)
    p = G.as_tensors(params(), requires_grad=True)
    tp = G.as_tensors(params(seed=1), requires_grad=True)
    h = rng.standard_normal((2, 3, 12))
    z = G.encode(h, p).mu
    pred = G.transition(z, [0, 1], p, 2)
    target = G.encode(h, tp)
    loss = G.aux_kl(pred, target.mu, target.logvar)
    loss.backward()
    assert all(t.grad is None for t in tp.values())
    assert any(p[k].grad is not None and np.abs(p[k].grad).sum() > 0 for k in p if k.startswith("enc"))
    tp2 = G.as_tensors(params(seed=2))
    t2 = G.encode(h, tp2)
    assert G.aux_kl(pred, t2.mu, t2.logvar).item() != loss.item()


def test_transition_gradients():
    base = params()
    z = np.random.default_rng(4).standard_normal((2, 3))

    def fn(w):
        p = G.as_tensors(base)
        p["tr.W0"] = w
        g = G.transition(z, [1, 0], p, 2)
        return G.aux_kl(g, np.zeros(3), np.zeros(3))

    assert gradcheck(fn, [base["tr.W0"]]) <= 1e-4


# ----------------------------------------------------------- GradNorm
def test_gradnorm_examples():
    s = G.GradNormState(lam=1.0, eta=0.5, eps=0.0)
    assert G.gradnorm_update(s, 4.0, 1.0) == 2.0
    s = G.GradNormState(lam=0.7, eta=0.3)
    assert G.gradnorm_update(s, 2.5, 2.5) == pytest.approx(0.7, rel=1e-8)
    s = G.GradNormState(lam=1.0, eta=1.0, lam_max=10.0)
    assert G.gradnorm_update(s, 3.0, 0.0) == 10.0
    s = G.GradNormState(lam=0.02, eta=1.0, lam_min=0.01)
    assert G.gradnorm_update(s, 0.0, 5.0) == 0.01
    with pytest.raises(ValueError):
        G.gradnorm_update(s, -1.0, 1.0)


@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1e6)), max_size=50), st.floats(0.0, 2.0))
def test_gradnorm_stays_in_range(seq, eta):
    s = G.GradNormState(lam=1.0, eta=eta, lam_min=0.01, lam_max=10.0)
    for a, b in seq:
        assert 0.01 <= G.gradnorm_update(s, a, b) <= 10.0


# ---------------------------------------------------------------- EMA
def test_ema_update():
    t, o = {"w": np.zeros(3)}, {"w": np.ones(3)}
    np.testing.assert_array_equal(G.ema_update(t, o, 0.0)["w"], o["w"])
    np.testing.assert_array_equal(G.ema_update(t, o, 1.0)["w"], t["w"])
    np.testing.assert_allclose(G.ema_update(t, o, 0.9)["w"], 0.1)
    with pytest.raises(ValueError):
        G.ema_update(t, {"w": np.ones(2)}, 0.5)
    with pytest.raises(ValueError):
        G.ema_update(t, o, 1.5)


# ---------------------------------------------------------------- act
def pinned_learner(logits, seed=0):
    lr = G.Learner(SMALL, len(logits), seed)
    for d in (lr.online, lr.target):
        d["pi.W2"][:] = 0.0
        d["pi.b2"][:] = logits
    return lr


def test_greedy_picks_largest_logit():
    lr = pinned_learner([0.0, 5.0, 0.0])
    obs = np.zeros((3, G.obs_dim(3)))
    assert lr.act(obs, [True, True, True], "greedy")[0] == 1


def test_masked_path_never_sampled():
    lr = pinned_learner([3.0, 0.0, 0.0])
    obs = np.zeros((10_000, 3, G.obs_dim(3)))
    acts, _, _ = lr.act(obs, np.tile([False, True, True], (10_000, 1)), "sample")
    assert not (acts == 0).any()


def test_no_up_path():
    lr = pinned_learner([0.0, 0.0])
    assert lr.act(np.zeros((3, 12)), [False, False])[0] == NO_PATH


def test_sampling_matches_softmax():
    logits = np.array([0.3, -0.5, 1.1])
    probs = np.exp(logits) / np.exp(logits).sum()
    lr = pinned_learner(logits)
    n = 100_000
    acts, logp, _ = lr.act(np.zeros((n, 3, G.obs_dim(3))), np.ones((n, 3), bool), "sample",
                           rng=np.random.default_rng(7))
    counts = np.bincount(acts, minlength=3)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert (np.abs(counts - n * probs) <= 3 * sigma).all()
    np.testing.assert_allclose(logp, np.log(probs)[acts], rtol=1e-12)


# ------------------------------------------------------------ training
def toy_trajectory(lr, T=6, N=2, seed=0):
    rng = np.random.default_rng(seed)
    traj = G.Trajectory()
    d = G.obs_dim(lr.num_paths)
    for t in range(T):
        obs = rng.standard_normal((N, lr.cfg.history, d))
        up = np.ones((N, lr.num_paths), bool)
        acts, logp, _ = lr.act(obs, up, "sample")
        traj.append(obs, up, acts, logp)
        traj.close_step(rng.standard_normal((N, lr.cfg.history, d)), rng.standard_normal(N), t == T - 1)
    return traj


def test_zero_rate_leaves_parameters():
    cfg = GpaspConfig(**{**SMALL.__dict__, "lr": 0.0})
    lr = G.Learner(cfg, 2, 0)
    before = {k: v.copy() for k, v in lr.online.items()}
    rep = lr.train_step(toy_trajectory(lr))
    assert all(np.array_equal(before[k], lr.online[k]) for k in before)
    for key in ("loss_pi", "loss_v", "entropy", "loss_aux", "aux_lambda", "g_rl", "g_aux"):
        assert math.isfinite(rep[key])


def test_training_is_deterministic():
    def run():
        lr = G.Learner(SMALL, 2, 5)
        for s in range(3):
            lr.train_step(toy_trajectory(lr, seed=s))
        return lr.online

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_target_tracks_online_by_ema():
    cfg = GpaspConfig(**{**SMALL.__dict__, "epochs": 1})
    lr = G.Learner(cfg, 2, 0)
    traj = toy_trajectory(lr)
    before_t = {k: v.copy() for k, v in lr.target.items()}
    before_o = {k: v.copy() for k, v in lr.online.items()}
    lr.train_step(traj)
    b = cfg.ema_beta
    assert any(not np.array_equal(before_o[k], lr.online[k]) for k in before_o)
    for k in before_t:
        np.testing.assert_allclose(lr.target[k], b * before_t[k] + (1 - b) * lr.online[k],
                                   rtol=1e-12, atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts():
    lr = G.Learner(SMALL, 2, 0)
    traj = toy_trajectory(lr)
    traj.rewards[0][:] = np.inf
    before = {k: v.copy() for k, v in lr.online.items()}
    rep = lr.train_step(traj)
    assert rep["aborted"]
    assert all(np.array_equal(before[k], lr.online[k]) for k in before)


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        G.Learner(SMALL, 2).train_step(G.Trajectory())


def test_checkpoint_round_trip(tmp_path):
    lr = G.Learner(SMALL, 2, 3)
    lr.train_step(toy_trajectory(lr))
    lr.save(tmp_path / "c.npz")
    back = G.Learner.load(tmp_path / "c.npz")
    assert back.cfg == lr.cfg and back.gradnorm.lam == lr.gradnorm.lam
    for k in lr.online:
        assert np.array_equal(back.online[k], lr.online[k])
        assert np.array_equal(back.target[k], lr.target[k])
    lr.write_log(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().startswith(",".join(G.LOG_HEADER))


def test_policy_scheduler():
    lr = pinned_learner([0.0, 4.0])
    sch = G.PolicyScheduler(2, 2, SchedConfig(), policy=lr)
    obs = np.zeros((2, SMALL.history, G.obs_dim(2)))
    acts, _, _ = sch.decide(obs, np.array([[True, True], [True, False]]))
    assert list(acts) == [1, 0]
    assert sch.select(0, None) == 1 and sch.select(1, None) == 0
    with pytest.raises(RuntimeError):
        G.PolicyScheduler(1, 2, SchedConfig()).decide(obs[:1], np.ones((1, 2), bool))
