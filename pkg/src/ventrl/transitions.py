"""Flat transition arrays for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .actions import BinSpec, RestrictedActionSpace, discretize
from .data import Dataset, Normalizer
from .schema import N_MODES


@dataclass
class Batch:
    obs: np.ndarray        # (B, S) normalised state
    act_c: np.ndarray      # (B, 5) continuous settings in [-1, 1]
    act_d: np.ndarray      # (B,) mode index
    combo: np.ndarray      # (B,) row in the restricted action space (-1 if absent)
    reward: np.ndarray     # (B,)
    next_obs: np.ndarray
    next_act_c: np.ndarray
    next_act_d: np.ndarray
    next_combo: np.ndarray
    done: np.ndarray       # (B,) 1.0 on the last step of an episode

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def act_onehot(self) -> np.ndarray:
        return np.eye(N_MODES, dtype=self.obs.dtype)[self.act_d]

    def astype(self, dtype) -> "Batch":
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.astype(dtype) if v.dtype.kind == "f" else v
        return Batch(**out)


@dataclass
class Transitions(Batch):
    episode: np.ndarray = None   # (N,) episode index into the source dataset
    t: np.ndarray = None         # (N,) step within the episode
    bins: np.ndarray = None      # (N, 6) bin indices

    @classmethod
    def build(cls, dataset: Dataset, stats: Normalizer, space: RestrictedActionSpace | None = None,
              spec: BinSpec | None = None, mask_inactive: bool = False, reward_key: str = "reward",
              dtype=np.float32) -> "Transitions":
        """From an unnormalised dataset whose episodes carry rewards.

        The last step of each episode is terminal; its successor fields
        repeat the step itself and are masked by ``done``.
        """
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        spec = spec or (space.spec if space is not None else BinSpec.default())
        obs, act, rew, done, epi, tt = [], [], [], [], [], []
        for i, e in enumerate(dataset.episodes):
            if reward_key not in e.rewards:
                raise ValueError(f"episode {e.key} has no {reward_key!r} rewards")
            n = e.n_steps
            obs.append(e.states)
            act.append(e.actions)
            rew.append(e.rewards[reward_key])
            d = np.zeros(n)
            d[-1] = 1.0
            done.append(d)
            epi.append(np.full(n, i))
            tt.append(np.arange(n))
        raw_obs = np.concatenate(obs)
        raw_act = np.concatenate(act)
        done = np.concatenate(done)
        nxt = np.arange(len(done)) + 1
        nxt[done == 1] -= 1
        bins = discretize(raw_act, spec, mask_inactive)
        combo = space.index_of(bins) if space is not None else np.full(len(done), -1)
        z = stats.states(raw_obs).astype(dtype)
        ac = stats.cont_actions(raw_act[:, 1:]).astype(dtype)
        ad = raw_act[:, 0].astype(np.int64)
        return cls(
            obs=z, act_c=ac, act_d=ad, combo=combo, reward=np.concatenate(rew).astype(dtype),
            next_obs=z[nxt], next_act_c=ac[nxt], next_act_d=ad[nxt], next_combo=combo[nxt],
            done=done.astype(dtype), episode=np.concatenate(epi), t=np.concatenate(tt), bins=bins,
        )

    def batch(self, idx) -> Batch:
        return Batch(**{f.name: getattr(self, f.name)[idx] for f in fields(Batch)})

    def sample(self, rng, size: int) -> Batch:
        return self.batch(rng.integers(0, len(self.obs), size))

    @property
    def initial(self) -> np.ndarray:
        """Indices of the first step of every episode."""
        return np.flatnonzero(self.t == 0)

    @property
    def n_episodes(self) -> int:
        return int(self.episode.max()) + 1
