"""Ensemble-diversified soft actor-critic for a hybrid action space.

The discrete part is handled in closed form: every expectation over the
mode is an explicit sum weighted by the actor's mode probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import AdamState, Mlp, adam_step, normal_log_prob, polyak_update, softmax
from ..schema import N_CONT, N_MODES
from ..transitions import Batch
from .config import TrainConfig
from .policy import EDAC_LOG_STD, HybridActor, hybrid_input, mlp_arrays, sample_categorical

PROB_EPS = 1e-8
TANH_EPS = 1e-6
GRAD_NORM_EPS = 1e-10
DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ActorSample:
    action: np.ndarray      # tanh-squashed settings (B, 5)
    mode: np.ndarray        # (B,)
    log_prob_c: np.ndarray  # (B, 1)
    log_prob_d: np.ndarray  # (B, 2) log(p + 1e-8)
    prob_d: np.ndarray      # (B, 2)
    # backward-pass state
    cache: object = None
    raw: np.ndarray = None
    std: np.ndarray = None
    eps: np.ndarray = None
    inside: np.ndarray = None


def actor_sample(actor: HybridActor, obs: np.ndarray, eps: np.ndarray | None, u: np.ndarray | None) -> ActorSample:
    """Reparameterised draw. ``eps=None`` and ``u=None`` give the deterministic (mode) action."""
    out, cache = actor.net.forward_cache(obs)
    mu, ls_raw, logits = actor.split(out)
    ls = np.clip(ls_raw, *EDAC_LOG_STD)
    std = np.exp(ls)
    eps = np.zeros_like(mu) if eps is None else eps
    raw = mu + std * eps
    t = np.tanh(raw)
    lp_c = (normal_log_prob(raw, mu, ls) - np.log(1.0 - t * t + TANH_EPS)).sum(axis=-1, keepdims=True)
    prob = softmax(logits)
    lp_d = np.log(prob + PROB_EPS)
    mode = logits.argmax(axis=-1) if u is None else sample_categorical(prob, u)
    inside = (ls_raw >= EDAC_LOG_STD[0]) & (ls_raw <= EDAC_LOG_STD[1])
    return ActorSample(t, mode, lp_c, lp_d, prob, cache, raw, std, eps, inside)


def actor_backward(actor: HybridActor, s: ActorSample, g_action, g_lp_c, g_prob) -> list:
    """Parameter gradients given dL/d(action), dL/d(log_prob_c) (B,1) and dL/d(prob_d)."""
    t = s.action
    one_m = 1.0 - t * t
    g_raw = g_action * one_m + g_lp_c * (2.0 * t * one_m / (one_m + TANH_EPS))
    g_mu = g_raw
    # the Gaussian term of log_prob_c depends on log_std only through -log_std
    g_ls = (g_raw * s.std * s.eps - g_lp_c) * s.inside
    g_logits = s.prob_d * (g_prob - (s.prob_d * g_prob).sum(axis=-1, keepdims=True))
    grads, _ = actor.net.backward(s.cache, np.concatenate([g_mu, g_ls, g_logits], axis=-1), need_input=False)
    return grads


def edac_alpha_loss(log_alpha: np.ndarray, s: ActorSample, entropy_cont: float, entropy_disc: float):
    """Temperature losses and their gradient w.r.t. ``log_alpha = [cont, disc]``."""
    p = s.prob_d
    term_c = (p * (p * s.log_prob_c + entropy_cont)).sum(-1).mean()
    term_d = (p * (s.log_prob_d + entropy_disc)).sum(-1).mean()
    loss_c = float(-log_alpha[0] * term_c)
    loss_d = float(-log_alpha[1] * term_d)
    return loss_c, loss_d, np.array([-term_c, -term_d], dtype=log_alpha.dtype)


def edac_actor_loss(actor: HybridActor, critics: Mlp, obs: np.ndarray, alphas, eps, u):
    """Probability-weighted soft policy loss. Returns (loss, actor grads, sample)."""
    a_c, a_d = alphas
    s = actor_sample(actor, obs, eps, u)
    q, cache = critics.forward_cache(hybrid_input(obs, s.action, s.mode))     # (N, B, 1)
    arg = q[..., 0].argmin(axis=0)
    n = len(obs)
    q_min = q[arg, np.arange(n)]                                              # (B, 1)
    p, lp_c, lp_d = s.prob_d, s.log_prob_c, s.log_prob_d
    loss_d = (p * (a_d * lp_d - q_min)).sum(-1).mean()
    loss_c = (p * (a_c * p * lp_c - q_min)).sum(-1).mean()

    g_prob = (a_d * lp_d + a_d * p / (p + PROB_EPS) - q_min + 2.0 * a_c * p * lp_c - q_min) / n
    g_lp_c = a_c * (p * p).sum(-1, keepdims=True) / n
    g_qmin = -2.0 * p.sum(-1, keepdims=True) / n
    seed = np.zeros_like(q)
    seed[arg, np.arange(n)] = g_qmin
    e, _ = critics.input_grad(cache, seed)
    g_action = e.sum(axis=0)[:, obs.shape[1]:obs.shape[1] + N_CONT]
    grads = actor_backward(actor, s, g_action, g_lp_c, g_prob)
    return float(loss_c + loss_d), grads, s


def diversity_loss(critics: Mlp, x: np.ndarray, cont_slice: slice, cached=None):
    """Mean pairwise cosine similarity between members' normalised dQ/da^c.

    Returns ``(loss, weight grads)``; the gradient runs through the input
    gradient itself (second-order path). ``cached`` is an optional
    ``(output, cache)`` pair from a forward pass on ``x``.
    """
    q, cache = cached if cached is not None else critics.forward_cache(x)
    m, n = q.shape[0], q.shape[1]
    e, deltas = critics.input_grad(cache, np.ones_like(q))
    g = e[..., cont_slice]                                     # (N, B, 5)
    r = np.sqrt((g * g).sum(-1, keepdims=True))
    unit = g / (r + GRAD_NORM_EPS)
    total = unit.sum(axis=0)                                   # (B, 5)
    pairs = m * (m - 1) / 2
    cos_sum = 0.5 * ((total * total).sum(-1) - (unit * unit).sum(-1).sum(0))
    loss = float(cos_sum.mean() / pairs)

    g_unit = (total[None] - unit) / (pairs * n)
    r_safe = np.where(r > 0, r, 1.0)
    g_g = g_unit / (r + GRAD_NORM_EPS) - g * (g * g_unit).sum(-1, keepdims=True) / (r_safe * (r + GRAD_NORM_EPS) ** 2)
    upstream = np.zeros_like(e)
    upstream[..., cont_slice] = g_g
    return loss, critics.input_grad_backward(cache, deltas, upstream)


def edac_critic_loss(critics: Mlp, targets: Mlp, actor: HybridActor, alphas, batch: Batch,
                     eps_next, u_next, gamma: float, eta: float):
    """Ensemble TD loss (summed over members) plus eta * diversity. Returns (losses, grads)."""
    a_c, a_d = alphas
    nxt = actor_sample(actor, batch.next_obs, eps_next, u_next)
    q_next = targets.forward(hybrid_input(batch.next_obs, nxt.action, nxt.mode)).min(axis=0)   # (B, 1)
    p = nxt.prob_d
    v_next = (p * (q_next - a_c * p * nxt.log_prob_c - a_d * nxt.log_prob_d)).sum(-1)
    y = batch.reward + gamma * (1.0 - batch.done) * v_next

    x = hybrid_input(batch.obs, batch.act_c, batch.act_d)
    q, cache = critics.forward_cache(x)
    td = q[..., 0] - y                                            # (N, B)
    n = td.shape[1]
    td_loss = float((td * td).mean(axis=1).sum())
    grads, _ = critics.backward(cache, (2.0 * td / n)[..., None], need_input=False)
    obs_dim = batch.obs.shape[1]
    div, div_grads = diversity_loss(critics, x, slice(obs_dim, obs_dim + N_CONT), (q, cache))
    grads = [a + eta * b for a, b in zip(grads, div_grads)]
    return {"critic_loss": td_loss + eta * div, "td_loss": td_loss, "diversity": div,
            "q_mean": float(q.mean())}, grads


def hybrid_edac_update(actor: HybridActor, critics: Mlp, targets: Mlp, log_alpha: np.ndarray,
                       opts: dict, batch: Batch, cfg: TrainConfig, rng) -> dict:
    """Temperatures, then actor, then critics, then Polyak."""
    n = len(batch)

    def noise():
        return rng.standard_normal((n, N_CONT)).astype(batch.obs.dtype), rng.random(n)

    eps, u = noise()
    s = actor_sample(actor, batch.obs, eps, u)
    loss_ac, loss_ad, g_alpha = edac_alpha_loss(log_alpha, s, cfg.edac_entropy_cont, cfg.edac_entropy_disc)
    adam_step(opts["alpha"], [log_alpha], [g_alpha])
    alphas = tuple(float(v) for v in np.exp(log_alpha))

    eps, u = noise()
    a_loss, a_grads, s = edac_actor_loss(actor, critics, batch.obs, alphas, eps, u)
    adam_step(opts["actor"], actor.params(), a_grads)

    eps, u = noise()
    losses, c_grads = edac_critic_loss(critics, targets, actor, alphas, batch, eps, u, cfg.gamma, cfg.edac_eta)
    if not np.isfinite(losses["critic_loss"]) or losses["critic_loss"] > DIVERGENCE_LIMIT:
        raise TrainingDiverged(
            f"EDAC critic loss {losses['critic_loss']:.3g} exceeds {DIVERGENCE_LIMIT:g} "
            f"(alpha_cont={alphas[0]:.3g}, alpha_disc={alphas[1]:.3g}, q_mean={losses['q_mean']:.3g})")
    adam_step(opts["critic"], critics.params(), c_grads)
    polyak_update(targets.params(), critics.params(), cfg.polyak)
    entropy_d = float(-(s.prob_d * s.log_prob_d).sum(-1).mean())
    return {**losses, "actor_loss": a_loss, "alpha_loss_cont": loss_ac, "alpha_loss_disc": loss_ad,
            "alpha_cont": alphas[0], "alpha_disc": alphas[1], "entropy_disc": entropy_d}


@dataclass
class HybridEdac:
    actor: HybridActor
    critics: Mlp
    targets: Mlp
    log_alpha: np.ndarray    # [continuous, discrete]
    cfg: TrainConfig
    opts: dict

    @classmethod
    def init(cls, obs_dim: int, cfg: TrainConfig, rng, dtype=np.float32):
        hidden = cfg.hidden_sizes()
        actor = HybridActor.init(obs_dim, hidden, rng, state_dependent=True, dtype=dtype)
        critics = Mlp.init([obs_dim + N_CONT + N_MODES] + hidden + [1], rng, ensemble=cfg.edac_ensemble,
                           dtype=dtype)
        log_alpha = np.full(2, np.log(cfg.edac_alpha_init), dtype=dtype)
        opts = {"actor": AdamState.for_params(actor.params(), cfg.edac_lr),
                "critic": AdamState.for_params(critics.params(), cfg.edac_lr),
                "alpha": AdamState.for_params([log_alpha], cfg.edac_lr)}
        return cls(actor, critics, critics.copy(), log_alpha, cfg, opts)

    def update(self, batch: Batch, rng) -> dict:
        return hybrid_edac_update(self.actor, self.critics, self.targets, self.log_alpha, self.opts,
                                  batch, self.cfg, rng)

    def arrays(self) -> dict:
        return {**mlp_arrays("actor", self.actor.net), **mlp_arrays("critic", self.critics),
                **mlp_arrays("target", self.targets), "log_alpha": self.log_alpha}

    def policy(self) -> HybridActor:
        return self.actor
