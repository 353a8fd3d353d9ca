"""Implicit Q-learning with a hybrid (Gaussian + categorical) actor.

Policy improvement is advantage-weighted likelihood of dataset actions, so
the critics are never queried at actions the actor proposes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..nn import (
    AdamState,
    Mlp,
    adam_step,
    expectile_loss,
    expectile_loss_grad,
    log_softmax,
    normal_log_prob,
    polyak_update,
    softmax,
)
from ..schema import N_CONT, N_MODES
from ..transitions import Batch
from .config import TrainConfig
from .policy import IQL_LOG_STD, HybridActor, hybrid_input, mlp_arrays

EXP_ADV_MAX = 100.0


def iql_value_loss(value: Mlp, targets: Mlp, batch: Batch, tau: float):
    """Expectile regression of V(s) onto min target Q(s, a). Returns (loss, grads, advantage)."""
    q = targets.forward(hybrid_input(batch.obs, batch.act_c, batch.act_d)).min(axis=0)[:, 0]
    v, cache = value.forward_cache(batch.obs)
    adv = q - v[:, 0]
    grads, _ = value.backward(cache, -expectile_loss_grad(adv, tau)[:, None], need_input=False)
    return expectile_loss(adv, tau), grads, adv


def iql_critic_loss(critics: Mlp, next_v: np.ndarray, batch: Batch, gamma: float):
    """Mean over the critic pair of MSE(Q_i(s, a), r + gamma (1 - done) V(s'))."""
    y = batch.reward + gamma * (1.0 - batch.done) * next_v
    q, cache = critics.forward_cache(hybrid_input(batch.obs, batch.act_c, batch.act_d))
    td = q[..., 0] - y                                    # (2, B)
    m = len(q)
    loss = float((td * td).mean(axis=1).sum() / m)
    grads, _ = critics.backward(cache, (2.0 * td / (m * td.shape[1]))[..., None], need_input=False)
    return loss, grads


def actor_log_prob(actor: HybridActor, obs, act_c, act_d):
    """log pi^c(a^c|s) + log pi^d(a^d|s) per row, with what the backward pass needs."""
    out, cache = actor.net.forward_cache(obs)
    pre, log_std, logits = actor.split(out)
    mean = np.tanh(pre)
    ls = np.clip(log_std, *IQL_LOG_STD)
    lp_c = normal_log_prob(act_c, mean, ls).sum(axis=-1)
    lp_d = log_softmax(logits)[np.arange(len(obs)), act_d]
    return lp_c + lp_d, (cache, mean, ls, logits)


def iql_actor_loss(actor: HybridActor, batch: Batch, adv: np.ndarray, beta: float):
    """Advantage-weighted negative log-likelihood. Returns (loss, grads, weights)."""
    with np.errstate(over="ignore"):
        w = np.minimum(np.exp(beta * adv), EXP_ADV_MAX)
    lp, (cache, mean, ls, logits) = actor_log_prob(actor, batch.obs, batch.act_c, batch.act_d)
    n = len(lp)
    loss = float(np.mean(w * -lp))
    g = (-w / n)[:, None]                          # dL/dlog_prob per row
    var = np.exp(2.0 * ls)
    diff = batch.act_c - mean
    g_pre = g * diff / var * (1.0 - mean * mean)
    onehot = np.eye(N_MODES, dtype=logits.dtype)[batch.act_d]
    g_logits = g * (onehot - softmax(logits))
    grads, _ = actor.net.backward(cache, np.concatenate([g_pre, g_logits], axis=-1), need_input=False)
    inside = (actor.log_std >= IQL_LOG_STD[0]) & (actor.log_std <= IQL_LOG_STD[1])
    g_ls = (g * (diff * diff / var - 1.0)).sum(axis=0) * inside
    return loss, grads + [g_ls.astype(actor.log_std.dtype)], w


def hybrid_iql_update(value: Mlp, critics: Mlp, targets: Mlp, actor: HybridActor, opts: dict,
                      batch: Batch, cfg: TrainConfig, actor_lr: float | None = None) -> dict:
    """One IQL step: V, then Q (then Polyak), with the actor step last or in between.

    Returns the loss dict, or ``{"skipped": 1}`` when the advantage is not finite.
    """
    next_v = value.forward(batch.next_obs)[:, 0]
    v_loss, v_grads, adv = iql_value_loss(value, targets, batch, cfg.iql_tau)
    if not (np.all(np.isfinite(adv)) and np.all(np.isfinite(next_v))):
        return {"skipped": 1}
    adam_step(opts["value"], value.params(), v_grads)

    def actor_step():
        loss, grads, w = iql_actor_loss(actor, batch, adv, cfg.iql_beta)
        if actor_lr is not None:
            opts["actor"].lr = actor_lr
        adam_step(opts["actor"], actor.params(), grads)
        return loss, w

    if not cfg.iql_actor_last:
        a_loss, w = actor_step()
    q_loss, q_grads = iql_critic_loss(critics, next_v, batch, cfg.gamma)
    adam_step(opts["critic"], critics.params(), q_grads)
    polyak_update(targets.params(), critics.params(), cfg.polyak)
    if cfg.iql_actor_last:
        a_loss, w = actor_step()
    return {"value_loss": v_loss, "critic_loss": q_loss, "actor_loss": a_loss,
            "adv_mean": float(adv.mean()), "weight_max": float(w.max())}


@dataclass
class HybridIql:
    actor: HybridActor
    value: Mlp
    critics: Mlp
    targets: Mlp
    cfg: TrainConfig
    opts: dict
    skipped: int = 0
    step: int = 0

    @classmethod
    def init(cls, obs_dim: int, cfg: TrainConfig, rng, dtype=np.float32):
        hidden = cfg.hidden_sizes()
        actor = HybridActor.init(obs_dim, hidden, rng, state_dependent=False, dtype=dtype)
        value = Mlp.init([obs_dim] + hidden + [1], rng, dtype=dtype)
        critics = Mlp.init([obs_dim + N_CONT + N_MODES] + hidden + [1], rng, ensemble=2, dtype=dtype)
        opts = {"actor": AdamState.for_params(actor.params(), cfg.iql_lr),
                "value": AdamState.for_params(value.params(), cfg.iql_lr),
                "critic": AdamState.for_params(critics.params(), cfg.iql_lr)}
        return cls(actor, value, critics, critics.copy(), cfg, opts)

    def actor_lr(self) -> float:
        if not self.cfg.iql_actor_cosine:
            return self.cfg.iql_lr
        return self.cfg.iql_lr * 0.5 * (1.0 + math.cos(math.pi * min(self.step, self.cfg.steps) / self.cfg.steps))

    def update(self, batch: Batch, rng) -> dict:
        losses = hybrid_iql_update(self.value, self.critics, self.targets, self.actor, self.opts,
                                   batch, self.cfg, self.actor_lr())
        self.step += 1
        if "skipped" in losses:
            self.skipped += 1
        return losses

    def arrays(self) -> dict:
        return {**mlp_arrays("actor", self.actor.net), "actor.log_std": self.actor.log_std,
                **mlp_arrays("value", self.value), **mlp_arrays("critic", self.critics),
                **mlp_arrays("target", self.targets)}

    def policy(self) -> HybridActor:
        return self.actor
