"""Latent-state policy learner for path selection.

Each UE observes a window ``h`` of the last ``L`` per-slot feature rows
(``d_h = 6 * M`` plus optional noise channels).  A multi-head self-attention
encoder pools the window into a diagonal Gaussian over a latent ``z``; a
policy head and a value head read ``z``; a transition head predicts the next
latent from ``(z, action)``.  Training combines a clipped policy-gradient
loss with a KL self-prediction loss against a slowly moving target encoder,
balancing the two by the ratio of their encoder gradient norms.

All arrays are float64 and every differentiable op goes through
:mod:`gprsim.autodiff`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import GpaspConfig
from .sched import NO_PATH, Scheduler

LOGVAR_MIN, LOGVAR_MAX = -10.0, 4.0
MASKED_LOGIT = -1e9
PER_PATH_FEATURES = 6
LOG_HEADER = ("step", "reward", "loss_pi", "loss_v", "entropy", "loss_aux", "aux_lambda",
              "g_rl", "g_aux", "loss_total", "aborted")


def obs_dim(num_paths: int, noise_channels: int = 0) -> int:
    return PER_PATH_FEATURES * num_paths + noise_channels


# ------------------------------------------------------------- parameters
def _dense(rng, fan_in, fan_out, scale=1.0):
    w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


def _mlp_params(rng, prefix, sizes, last_scale=1.0):
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = last_scale if i == len(sizes) - 2 else 1.0
        out[f"{prefix}.W{i}"], out[f"{prefix}.b{i}"] = _dense(rng, a, b, scale)
    return out


def init_params(cfg: GpaspConfig, d_h: int, num_paths: int, seed: int = 0) -> dict:
    """Fresh online parameters as a flat ``name -> ndarray`` dict.

    Prefixes: ``enc`` (encoder), ``pi`` (policy), ``v`` (value), ``tr`` (transition).
    """
    rng = np.random.default_rng([seed, 31])
    K, dk = cfg.heads, cfg.d_k
    if cfg.d_model % K:
        raise ValueError("d_model must be divisible by the number of heads")
    d_o = cfg.d_model // K
    p = {
        "enc.Wq": rng.normal(0, 1 / math.sqrt(d_h), (K, d_h, dk)),
        "enc.Wk": rng.normal(0, 1 / math.sqrt(d_h), (K, d_h, dk)),
        "enc.Wv": rng.normal(0, 1 / math.sqrt(d_h), (K, d_h, dk)),
        "enc.Wo": rng.normal(0, 1 / math.sqrt(dk), (K, dk, d_o)),
        "enc.q": rng.normal(0, 1 / math.sqrt(d_h), d_h),
    }
    hid = cfg.hidden
    p.update(_mlp_params(rng, "enc.mlp", [cfg.d_model, hid, hid, 2 * cfg.d_z], 0.1))
    p.update(_mlp_params(rng, "pi", [cfg.d_z, hid, hid, num_paths], 0.01))
    p.update(_mlp_params(rng, "v", [cfg.d_z, hid, hid, 1], 0.1))
    p.update(_mlp_params(rng, "tr", [cfg.d_z + num_paths, hid, hid, 2 * cfg.d_z], 0.1))
    return p


def as_tensors(arrays: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v.copy(), requires_grad=requires_grad, name=k) for k, v in arrays.items()}


# ----------------------------------------------------------------- layers
def mlp(p: dict, prefix: str, x: Tensor) -> Tensor:
    i = 0
    while f"{prefix}.W{i + 1}" in p:
        x = ad.tanh(x @ p[f"{prefix}.W{i}"] + p[f"{prefix}.b{i}"])
        i += 1
    return x @ p[f"{prefix}.W{i}"] + p[f"{prefix}.b{i}"]


@dataclass
class LatentGaussian:
    mu: Tensor
    logvar: Tensor


def encode(h, p: dict) -> LatentGaussian:
    """Attention encoder: ``h`` is ``(B, L, d_h)`` or ``(L, d_h)``."""
    h = ad.as_tensor(h)
    single = h.ndim == 2
    if single:
        h = h.reshape(1, *h.shape)
    if h.ndim != 3 or h.shape[2] != p["enc.q"].shape[0]:
        raise ValueError(f"observation shape {h.shape} does not match d_h={p['enc.q'].shape[0]}")
    B, L, _ = h.shape
    K, _, dk = p["enc.Wq"].shape
    hx = h.reshape(B, 1, L, -1)
    q = hx @ p["enc.Wq"]  # (B, K, L, dk)
    k = hx @ p["enc.Wk"]
    v = hx @ p["enc.Wv"]
    att = ad.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk)), axis=-1)
    heads = (att @ v) @ p["enc.Wo"]  # (B, K, L, d_o)
    cat = heads.swapaxes(1, 2).reshape(B, L, -1)  # (B, L, K * d_o)
    beta = ad.softmax(h @ p["enc.q"], axis=-1)  # (B, L), scored on the raw rows
    pooled = (beta.reshape(B, 1, L) @ cat).reshape(B, -1)
    out = mlp(p, "enc.mlp", pooled)
    d_z = out.shape[-1] // 2
    mu, logvar = out[:, :d_z], ad.clip(out[:, d_z:], LOGVAR_MIN, LOGVAR_MAX)
    if single:
        mu, logvar = mu.reshape(d_z), logvar.reshape(d_z)
    return LatentGaussian(mu, logvar)


def reparameterize(g: LatentGaussian, eps) -> Tensor:
    return g.mu + ad.exp(g.logvar * 0.5) * ad.as_tensor(eps)


def masked_logits(logits: Tensor, up) -> Tensor:
    if up is None:
        return logits
    up = np.asarray(up, dtype=bool)
    return logits + np.where(up, 0.0, MASKED_LOGIT)


def policy(z, p: dict, up=None) -> tuple[Tensor, Tensor]:
    """Return ``(masked logits, value)`` for latent ``z``."""
    z = ad.as_tensor(z)
    logits = masked_logits(mlp(p, "pi", z), up)
    value = mlp(p, "v", z)
    return logits, value[..., 0]


def transition(z, actions, p: dict, num_paths: int) -> LatentGaussian:
    onehot = np.eye(num_paths)[np.asarray(actions)]
    out = mlp(p, "tr", ad.concat([ad.as_tensor(z), Tensor(onehot)], axis=-1))
    d_z = out.shape[-1] // 2
    return LatentGaussian(out[..., :d_z], ad.clip(out[..., d_z:], LOGVAR_MIN, LOGVAR_MAX))


# ------------------------------------------------------------------ losses
def gae(rewards, values, next_values, dones, gamma: float, lam: float):
    """Advantages and value targets for one trajectory (arrays over time).

    ``delta_t = r_t + gamma * (1 - done_t) * V'_t - V_t`` and
    ``A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}``; the leading
    axis is time and any trailing axes are independent sequences.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    cont = 1.0 - np.asarray(dones, dtype=float)
    delta = rewards + gamma * cont * np.asarray(next_values, dtype=float) - values
    adv = np.zeros_like(delta)
    running = np.zeros_like(delta[0]) if delta.size else 0.0
    for t in range(len(delta) - 1, -1, -1):
        running = delta[t] + gamma * lam * cont[t] * running
        adv[t] = running
    return adv, adv + values


def ppo_losses(logits: Tensor, values: Tensor, actions, old_logp, adv, v_target,
               clip: float, value_coef: float = 0.5, entropy_coef: float = 0.01) -> dict:
    """Clipped surrogate, value and entropy terms; ``total`` is the combined RL loss."""
    logp_all = ad.log_softmax(logits, axis=-1)
    n = len(actions)
    logp = logp_all[np.arange(n), np.asarray(actions)]
    ratio = ad.exp(logp - np.asarray(old_logp, dtype=float))
    adv = np.asarray(adv, dtype=float)
    surrogate = -ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - clip, 1.0 + clip) * adv).mean()
    value_loss = (0.5 * (values - np.asarray(v_target, dtype=float)) ** 2).mean()
    probs = ad.exp(logp_all)
    entropy = -(probs * logp_all).sum(axis=-1).mean()
    total = surrogate + value_coef * value_loss - entropy_coef * entropy
    return {"total": total, "pi": surrogate, "v": value_loss, "entropy": entropy}


def entropy_of(logits) -> np.ndarray:
    a = np.asarray(logits, dtype=float)
    z = a - a.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def aux_kl(pred: LatentGaussian, target_mu, target_logvar) -> Tensor:
    """Per-dimension Gaussian divergence of the target from the prediction,
    summed over latent dimensions and averaged over the batch.  The target
    arrays carry no gradient."""
    tmu = np.asarray(ad.as_tensor(target_mu).data)
    tvar = np.exp(np.asarray(ad.as_tensor(target_logvar).data))
    pvar = ad.exp(pred.logvar)
    term = (pred.logvar - np.log(tvar)) + (tvar + (tmu - pred.mu) ** 2) / pvar - 1.0
    per = 0.5 * term.sum(axis=-1)
    return per.mean() if per.ndim else per


@dataclass
class GradNormState:
    lam: float = 1.0
    eta: float = 0.1
    lam_min: float = 0.01
    lam_max: float = 10.0
    eps: float = 1e-8


def gradnorm_update(state: GradNormState, g_rl: float, g_aux: float) -> float:
    if g_rl < 0 or g_aux < 0:
        raise ValueError("gradient norms must be nonnegative")
    lam = state.lam * (g_rl / (g_aux + state.eps)) ** state.eta
    state.lam = float(min(max(lam, state.lam_min), state.lam_max))
    return state.lam


def ema_update(target: dict, online: dict, beta: float) -> dict:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    out = {}
    for k, t in target.items():
        o = online[k]
        if np.shape(t) != np.shape(o):
            raise ValueError(f"shape mismatch for {k}: {np.shape(t)} vs {np.shape(o)}")
        out[k] = beta * t + (1.0 - beta) * o
    return out


# --------------------------------------------------------------- learner
@dataclass
class Trajectory:
    """Collected decisions, stacked as ``(T, N, ...)`` over time and UEs."""

    obs: list = field(default_factory=list)  # (N, L, d_h)
    next_obs: list = field(default_factory=list)
    up: list = field(default_factory=list)  # (N, M)
    actions: list = field(default_factory=list)  # (N,) ints, NO_PATH when idle
    logp: list = field(default_factory=list)
    rewards: list = field(default_factory=list)  # (N,)
    dones: list = field(default_factory=list)  # (N,)

    def __len__(self):
        return len(self.actions)

    def append(self, obs, up, actions, logp):
        self.obs.append(np.array(obs))
        self.up.append(np.array(up, dtype=bool))
        self.actions.append(np.array(actions))
        self.logp.append(np.array(logp, dtype=float))

    def close_step(self, next_obs, rewards, done: bool):
        self.next_obs.append(np.array(next_obs))
        self.rewards.append(np.array(rewards, dtype=float))
        self.dones.append(np.full(len(rewards), float(done)))


class Learner:
    """Online and target parameters plus the optimizer state."""

    def __init__(self, cfg: GpaspConfig, num_paths: int, seed: int = 0):
        self.cfg = cfg
        self.num_paths = num_paths
        self.d_h = obs_dim(num_paths, cfg.noise_channels)
        self.online = init_params(cfg, self.d_h, num_paths, seed)
        self.target = {k: v.copy() for k, v in self.online.items()}
        self.velocity = {k: np.zeros_like(v) for k, v in self.online.items()}
        self.gradnorm = GradNormState(cfg.aux_lambda, cfg.aux_eta, cfg.aux_lambda_min,
                                      cfg.aux_lambda_max, cfg.aux_eps)
        self.rng = np.random.default_rng([seed, 37])
        self.steps = 0
        self.log: list[dict] = []

    # ------------------------------------------------------------ acting
    def act(self, obs, up, mode: str = "sample", rng=None):
        """Choose a path per row of ``obs``; rows with no up path get ``NO_PATH``.

        ``sample`` draws the latent and the action using the target policy
        head (the collection policy); ``greedy`` takes the latent mean and
        the online head's most likely action.
        """
        if mode not in ("sample", "greedy"):
            raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
        rng = self.rng if rng is None else rng
        obs = np.asarray(obs, dtype=float)
        up = np.asarray(up, dtype=bool)
        single = obs.ndim == 2
        if single:
            obs, up = obs[None], up[None]
        with ad.no_grad():
            p = as_tensors(self.online)
            g = encode(obs, p)
            if mode == "greedy":
                z = g.mu
                head = p
            else:
                z = reparameterize(g, rng.standard_normal(g.mu.shape))
                head = as_tensors({k: v for k, v in self.target.items() if not k.startswith("enc")})
            logits, value = policy(z, head, up)
        lg = logits.data
        logp_all = lg - lg.max(axis=-1, keepdims=True)
        logp_all = logp_all - np.log(np.exp(logp_all).sum(axis=-1, keepdims=True))
        any_up = up.any(axis=-1)
        if mode == "greedy":
            actions = np.argmax(lg, axis=-1)
        else:
            u = rng.random(len(lg))
            cdf = np.cumsum(np.exp(logp_all), axis=-1)
            actions = np.minimum((u[:, None] > cdf).sum(axis=-1), self.num_paths - 1)
            # never land on a masked path through rounding at the cdf tail
            bad = ~up[np.arange(len(lg)), actions] & any_up
            actions[bad] = np.argmax(lg[bad], axis=-1)
        logp = logp_all[np.arange(len(lg)), actions]
        actions = np.where(any_up, actions, NO_PATH)
        if single:
            return int(actions[0]), float(logp[0]), float(value.data[0])
        return actions, logp, value.data

    # ---------------------------------------------------------- training
    def train_step(self, traj: Trajectory) -> dict:
        """Update from one trajectory batch; returns the loss report."""
        c = self.cfg
        if len(traj) == 0:
            raise ValueError("empty trajectory")
        obs = np.stack(traj.obs)  # (T, N, L, d_h)
        nxt = np.stack(traj.next_obs)
        acts = np.stack(traj.actions)
        valid = acts != NO_PATH
        T, N = acts.shape
        M = self.num_paths
        with ad.no_grad():
            p = as_tensors(self.online)
            tp = as_tensors(self.target)
            flat = obs.reshape(T * N, *obs.shape[2:])
            g = encode(flat, p)
            z = reparameterize(g, self.rng.standard_normal(g.mu.shape))
            _, v_now = policy(z, p)
            tg = encode(nxt.reshape(T * N, *nxt.shape[2:]), tp)
            _, v_next = policy(tg.mu, p)
        values = v_now.data.reshape(T, N)
        next_values = v_next.data.reshape(T, N)
        adv, v_target = gae(np.stack(traj.rewards), values, next_values,
                            np.stack(traj.dones), c.gamma, c.lam_gae)
        keep = valid.reshape(-1)
        adv_f = adv.reshape(-1)[keep]
        if c.normalize_adv and adv_f.size > 1:
            adv_f = (adv_f - adv_f.mean()) / (adv_f.std() + 1e-8)
        batch = {
            "obs": flat[keep],
            "next_mu": tg.mu.data[keep],
            "next_logvar": tg.logvar.data[keep],
            "up": np.stack(traj.up).reshape(T * N, M)[keep],
            "actions": acts.reshape(-1)[keep],
            "old_logp": np.stack(traj.logp).reshape(-1)[keep],
            "adv": adv_f,
            "v_target": v_target.reshape(-1)[keep],
        }
        report = {}
        for _ in range(c.epochs):
            report = self._update(batch)
            if report["aborted"]:
                break
        report["reward"] = float(np.stack(traj.rewards).mean())
        report["step"] = self.steps
        self.log.append(report)
        return report

    def _update(self, b: dict) -> dict:
        c = self.cfg
        if len(b["actions"]) == 0:
            return {"aborted": True, **{k: 0.0 for k in LOG_HEADER[2:-1]}}
        p = as_tensors(self.online, requires_grad=True)
        g = encode(b["obs"], p)
        z = reparameterize(g, self.rng.standard_normal(g.mu.shape))
        logits, values = policy(z, p, b["up"])
        rl = ppo_losses(logits, values, b["actions"], b["old_logp"], b["adv"], b["v_target"],
                        c.clip, c.value_coef, c.entropy_coef)
        pred = transition(z, b["actions"], p, self.num_paths)
        l_aux = aux_kl(pred, b["next_mu"], b["next_logvar"])
        total_val = rl["total"].item() + self.gradnorm.lam * l_aux.item()
        report = {"loss_pi": rl["pi"].item(), "loss_v": rl["v"].item(),
                  "entropy": rl["entropy"].item(), "loss_aux": l_aux.item()}
        if not (math.isfinite(total_val) and math.isfinite(report["loss_aux"])):
            return {**report, "aux_lambda": self.gradnorm.lam, "g_rl": float("nan"),
                    "g_aux": float("nan"), "loss_total": total_val, "aborted": True}
        g_rl = _grads(rl["total"], p)
        g_aux = _grads(l_aux, p)
        enc = [k for k in p if k.startswith("enc.")]
        n_rl = math.sqrt(sum(float((g_rl[k] ** 2).sum()) for k in enc))
        n_aux = math.sqrt(sum(float((g_aux[k] ** 2).sum()) for k in enc))
        lam = gradnorm_update(self.gradnorm, n_rl, n_aux)
        grads = {k: g_rl[k] + lam * g_aux[k] for k in p}
        norm = math.sqrt(sum(float((v**2).sum()) for v in grads.values()))
        if c.max_grad_norm and norm > c.max_grad_norm:
            grads = {k: v * (c.max_grad_norm / norm) for k, v in grads.items()}
        for k, gk in grads.items():
            self.velocity[k] = c.momentum * self.velocity[k] + gk
            self.online[k] = self.online[k] - c.lr * self.velocity[k]
        self.target = ema_update(self.target, self.online, c.ema_beta)
        self.steps += 1
        return {**report, "aux_lambda": lam, "g_rl": n_rl, "g_aux": n_aux,
                "loss_total": rl["total"].item() + lam * l_aux.item(), "aborted": False}

    # ------------------------------------------------------- persistence
    def save(self, path: str | Path) -> None:
        arrays = {f"online/{k}": v for k, v in self.online.items()}
        arrays.update({f"target/{k}": v for k, v in self.target.items()})
        meta = {"config": asdict(self.cfg), "num_paths": self.num_paths,
                "aux_lambda": self.gradnorm.lam, "steps": self.steps}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with Path(path).open("wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Learner":
        with np.load(Path(path)) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            learner = cls(GpaspConfig(**meta["config"]), meta["num_paths"])
            for k in learner.online:
                learner.online[k] = data[f"online/{k}"].copy()
                learner.target[k] = data[f"target/{k}"].copy()
        learner.gradnorm.lam = meta["aux_lambda"]
        learner.steps = meta["steps"]
        return learner

    def write_log(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for r in self.log:
                w.writerow([r.get(k, "") if k in ("step", "aborted") else repr(float(r.get(k, 0.0)))
                             for k in LOG_HEADER])


def _grads(loss: Tensor, p: dict) -> dict:
    for t in p.values():
        t.zero_grad()
    loss.backward()
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}


# --------------------------------------------------------------- adapter
class PolicyScheduler(Scheduler):
    """Routes path choices through a :class:`Learner`.

    Decisions for all UEs of a slot are batched; the harness calls
    :meth:`decide` once per slot and :meth:`select` then reads the result.
    """

    name = "gpasp"

    def __init__(self, num_ues, num_paths, cfg, seed=0, policy=None, mode="greedy"):
        super().__init__(num_ues, num_paths, cfg, seed)
        self.learner = policy
        self.mode = mode
        self.rng = np.random.default_rng([seed, 41])
        self.last = None

    def decide(self, obs, up):
        if self.learner is None:
            raise RuntimeError("gpasp scheduler needs a trained policy")
        self.last = self.learner.act(obs, up, self.mode, rng=self.rng)
        return self.last

    def select(self, ue, view):
        if self.last is None:
            self.decide(view.history[None], np.asarray(view.up)[None])
            return int(self.last[0][0])
        return int(self.last[0][ue])
