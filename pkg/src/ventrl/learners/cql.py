"""Conservative Q-learning over a factored, dataset-restricted discrete action space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..actions import RestrictedActionSpace
from ..nn import AdamState, Mlp, adam_step, clip_grad_norm, logsumexp_softmax, polyak_update
from ..transitions import Batch
from .config import TrainConfig
from .policy import FactoredPolicy, mlp_arrays


def factored_cql_loss(critics: Mlp, targets: Mlp, batch: Batch, space: RestrictedActionSpace,
                      alpha: float, gamma: float):
    """Loss terms and gradients for the two per-bin critics (ensemble axis 0).

    Returns ``(losses, grads)``; ``grads`` follows ``critics.params()``.
    """
    combo = np.asarray(batch.combo)
    if (combo < 0).any():
        raise ValueError("batch contains actions outside the restricted action space")
    table = space.onehot.astype(batch.obs.dtype)
    n = len(combo)
    rows = np.arange(n)

    q_next = targets.forward(batch.next_obs) @ table.T          # (2, B, K)
    y = batch.reward + gamma * (1.0 - batch.done) * np.minimum(q_next[0], q_next[1]).max(axis=-1)

    per_bin, cache = critics.forward_cache(batch.obs)           # (2, B, 37)
    q_all = per_bin @ table.T                                    # (2, B, K)
    q_data = q_all[:, rows, combo]                               # (2, B)
    lse, probs = logsumexp_softmax(q_all, overwrite=True)
    gap = (lse - q_data).mean(axis=1)                            # >= 0 per critic
    td = q_data - y
    mse = (td * td).mean(axis=1)
    total = alpha * gap.sum() + 0.5 * mse.sum()

    # d/dQ_all = alpha/n * softmax, plus (td - alpha)/n at the dataset combination
    d_bins = (alpha / n) * (probs @ table) + ((td - alpha) / n)[..., None] * table[combo]
    grads, _ = critics.backward(cache, d_bins, need_input=False)
    losses = {
        "loss": float(total),
        "conservative_1": float(gap[0]), "conservative_2": float(gap[1]),
        "td_1": float(mse[0]), "td_2": float(mse[1]),
        "q_data": float(q_data.mean()),
    }
    return losses, grads


def factored_cql_update(critics: Mlp, targets: Mlp, opt: AdamState, batch: Batch,
                        space: RestrictedActionSpace, cfg: TrainConfig) -> dict:
    losses, grads = factored_cql_loss(critics, targets, batch, space, cfg.cql_alpha, cfg.gamma)
    grads = clip_grad_norm(grads, cfg.cql_clip, per_member=True)
    adam_step(opt, critics.params(), grads)
    polyak_update(targets.params(), critics.params(), cfg.polyak)
    return losses


@dataclass
class FactoredCql:
    critics: Mlp
    targets: Mlp
    space: RestrictedActionSpace
    cfg: TrainConfig
    opt: AdamState

    @classmethod
    def init(cls, obs_dim: int, space: RestrictedActionSpace, cfg: TrainConfig, rng, dtype=np.float32):
        critics = Mlp.init([obs_dim] + cfg.hidden_sizes() + [space.spec.width], rng, ensemble=2, dtype=dtype)
        return cls(critics, critics.copy(), space, cfg, AdamState.for_params(critics.params(), cfg.cql_lr))

    def update(self, batch: Batch, rng) -> dict:
        return factored_cql_update(self.critics, self.targets, self.opt, batch, self.space, self.cfg)

    def arrays(self) -> dict:
        return {**mlp_arrays("critic", self.critics), **mlp_arrays("target", self.targets)}

    def policy(self, method: str = "bin_mode") -> FactoredPolicy:
        return FactoredPolicy(self.critics, self.space, method)

