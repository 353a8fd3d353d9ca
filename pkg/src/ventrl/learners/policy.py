"""Policies: the hybrid actor shared by IQL and EDAC, and the greedy factored-Q policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..actions import RestrictedActionSpace, factored_q_values, reconstruct
from ..data import CONT_HI, CONT_LO, Normalizer
from ..nn import Mlp
from ..schema import N_CONT, N_MODES

IQL_LOG_STD = (-20.0, 2.0)
EDAC_LOG_STD = (-3.0, 1.0)


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row given uniforms ``u`` in [0, 1)."""
    idx = (np.cumsum(probs, axis=-1) <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass
class HybridActor:
    """MLP trunk with a Gaussian head over the 5 settings and logits over modes.

    With ``log_std`` set the standard deviation is a free parameter and the
    Gaussian mean is ``tanh`` of the network output (IQL). Without it the
    network also emits a per-state log-std, and samples are squashed by
    ``tanh`` afterwards (EDAC).
    """

    net: Mlp
    log_std: np.ndarray | None = None

    @classmethod
    def init(cls, obs_dim: int, hidden: list, rng, state_dependent: bool, dtype=np.float32):
        out = N_CONT * (2 if state_dependent else 1) + N_MODES
        net = Mlp.init([obs_dim] + list(hidden) + [out], rng, dtype=dtype)
        return cls(net, None if state_dependent else np.zeros(N_CONT, dtype=dtype))

    @property
    def state_dependent(self) -> bool:
        return self.log_std is None

    def params(self) -> list:
        return self.net.params() + ([] if self.log_std is None else [self.log_std])

    def astype(self, dtype) -> "HybridActor":
        return HybridActor(self.net.astype(dtype), None if self.log_std is None else self.log_std.astype(dtype))

    def split(self, out: np.ndarray):
        """Network output -> (mean pre-activation, raw log-std, logits)."""
        mean = out[:, :N_CONT]
        if self.log_std is None:
            return mean, out[:, N_CONT:2 * N_CONT], out[:, 2 * N_CONT:]
        return mean, np.broadcast_to(self.log_std, mean.shape), out[:, N_CONT:]

    def act(self, obs: np.ndarray, deterministic: bool = True, rng=None):
        """Normalised continuous settings in [-1, 1] and mode indices."""
        mean, log_std, logits = self.split(self.net.forward(obs))
        if deterministic:
            cont = np.tanh(mean)
            return cont, logits.argmax(axis=-1)
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mean.shape).astype(mean.dtype)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        mode = sample_categorical(e / e.sum(axis=-1, keepdims=True), rng.random(len(obs)))
        # float32 tanh rounds to +/-1 for large inputs; keep samples strictly inside
        lim = np.nextafter(mean.dtype.type(1), mean.dtype.type(0))
        if self.log_std is None:
            std = np.exp(np.clip(log_std, *EDAC_LOG_STD))
            return np.clip(np.tanh(mean + std * eps), -lim, lim), mode
        std = np.exp(np.clip(log_std, *IQL_LOG_STD))
        return np.clip(np.tanh(mean) + std * eps, -lim, lim), mode


@dataclass
class FactoredPolicy:
    """Greedy combination under min(Q1, Q2), restricted to dataset combinations.

    Continuous settings are recovered from the chosen bins with a
    reconstruction method (bin modes by default).
    """

    critics: Mlp
    space: RestrictedActionSpace
    method: str = "bin_mode"

    def combo_index(self, obs: np.ndarray) -> np.ndarray:
        q = factored_q_values(self.critics.forward(obs), self.space)
        return q.min(axis=0).argmax(axis=-1)

    def bins(self, obs: np.ndarray) -> np.ndarray:
        return self.space.combos[self.combo_index(obs)]

    def act(self, obs: np.ndarray, deterministic: bool = True, rng=None):
        bins = self.bins(obs)
        raw = reconstruct(bins, self.method, self.space, rng)
        cont = Normalizer.cont_actions(raw[:, 1:]).astype(obs.dtype)
        return cont, bins[:, 0].astype(np.int64)


@dataclass
class HybridAction:
    mode: np.ndarray       # (B,) 0 = VCV, 1 = PCV
    settings: np.ndarray   # (B, 5) rr, vt, dp, peep, fio2 in clinical units

    def rows(self) -> np.ndarray:
        return np.column_stack([self.mode, self.settings])


def act(policy, state, deterministic: bool = True, rng=None) -> HybridAction:
    """Denormalised action for normalised state(s)."""
    obs = np.atleast_2d(np.asarray(state, dtype=np.float32))
    cont, mode = policy.act(obs, deterministic, rng)
    raw = np.clip(Normalizer.inverse_cont_actions(cont), CONT_LO, CONT_HI)
    return HybridAction(np.asarray(mode), raw)


def hybrid_input(obs: np.ndarray, act_c: np.ndarray, act_d: np.ndarray) -> np.ndarray:
    """Critic input: state, continuous settings and one-hot mode."""
    onehot = np.eye(N_MODES, dtype=obs.dtype)[np.asarray(act_d)]
    return np.concatenate([obs, act_c.astype(obs.dtype), onehot], axis=-1)


def mlp_arrays(prefix: str, net: Mlp) -> dict:
    out = {}
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{l}"] = w
        out[f"{prefix}.b{l}"] = b
    return out


def mlp_from_arrays(prefix: str, arrays: dict) -> Mlp:
    n = sum(1 for k in arrays if k.startswith(prefix + ".w"))
    if n == 0:
        raise KeyError(f"no {prefix!r} network in checkpoint")
    return Mlp([arrays[f"{prefix}.w{l}"].copy() for l in range(n)],
               [arrays[f"{prefix}.b{l}"].copy() for l in range(n)])
