"""Per-step rewards: safe-range reward, time penalty and ventilator-free days.

The default reward is ``r = r_range + r_tp + r_vfd``. Two comparison
rewards are also available: a terminal +/-100 survival reward, alone or
with the safe-range term added.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, Episode
from .schema import STATE_INDEX


@dataclass(frozen=True)
class SafeRange:
    variable: str
    lo: float
    hi: float
    weight: float

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError(f"{self.variable}: weight must be positive")
        if not self.lo < self.hi:
            raise ValueError(f"{self.variable}: empty safe interval")


DEFAULT_RANGES = (
    SafeRange("ph", 7.3, 7.45, 2),
    SafeRange("map", 60, 109, 1),
    SafeRange("pao2", 55, 80, 2),
    SafeRange("sao2", 88, 96, 2),
    SafeRange("paco2", 28, 55, 2),
    SafeRange("hr", 70, 109, 1),
    SafeRange("spo2", 88, 96, 2),
)


@dataclass(frozen=True)
class RangeSpec:
    ranges: tuple = DEFAULT_RANGES

    @property
    def total_weight(self) -> float:
        return float(sum(r.weight for r in self.ranges))

    @classmethod
    def from_text(cls, text: str) -> "RangeSpec":
        """Parse ``variable lo hi weight`` lines; ``#`` starts a comment."""
        ranges = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, lo, hi, w = line.split()
            if name not in STATE_INDEX:
                raise ValueError(f"unknown state variable {name!r}")
            ranges.append(SafeRange(name, float(lo), float(hi), float(w)))
        return cls(tuple(ranges))

    @classmethod
    def load(cls, path) -> "RangeSpec":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class VfdConfig:
    dt_max: float = 28.0       # days
    w_vfd: float = 1.0
    placement: str = "per_step"  # or "terminal"

    def __post_init__(self):
        if self.dt_max <= 0:
            raise ValueError("dt_max must be positive")
        if self.w_vfd < 0:
            raise ValueError("w_vfd must be non-negative")
        if self.placement not in ("per_step", "terminal"):
            raise ValueError(f"unknown placement {self.placement!r}")


def in_range_mask(states, spec: RangeSpec = RangeSpec()) -> np.ndarray:
    """Boolean (..., n_ranges) indicator of each parameter inside its closed interval."""
    states = np.asarray(states, dtype=np.float64)
    cols = [STATE_INDEX[r.variable] for r in spec.ranges]
    lo = np.array([r.lo for r in spec.ranges])
    hi = np.array([r.hi for r in spec.ranges])
    vals = states[..., cols]
    return (vals >= lo) & (vals <= hi)


def range_reward(states, spec: RangeSpec = RangeSpec()):
    """Weighted fraction of safe-range parameters inside their interval.

    Accepts a single state vector or a stack of them.
    """
    w = np.array([r.weight for r in spec.ranges])
    out = in_range_mask(states, spec) @ w / w.sum()
    return float(out) if np.ndim(out) == 0 else out


def time_penalty() -> float:
    return -1.0


def vfd_branch(episode: Episode, dt_max: float = 28.0) -> str:
    """Which ventilator-free-days case applies: survived, reintubated, died or otherwise."""
    episode.validate()
    dt_mv = episode.dt_mv
    if episode.dt_re is not None and episode.dt_re < dt_max:
        return "reintubated"
    if episode.dt_death is not None and episode.dt_death < dt_max:
        return "died"
    if dt_mv < dt_max:
        return "survived"
    return "otherwise"


def vfd(episode: Episode, dt_max: float = 28.0) -> float:
    """Ventilator-free days for one episode.

    A death on the ventilator gives 0; a death after extubation counts the
    days between extubation and death. Ventilation lasting the whole
    horizon gives 0 (the "otherwise" case). A reintubation or death at or after
    ``dt_max`` is treated as survival through the horizon.
    """
    branch = vfd_branch(episode, dt_max)
    dt_mv = episode.dt_mv
    if branch == "reintubated":
        return episode.dt_re - dt_mv
    if branch == "died":
        return episode.dt_death - dt_mv
    if branch == "survived":
        return dt_max - dt_mv
    return 0.0


def vfd_reward(episode: Episode, cfg: VfdConfig = VfdConfig()) -> np.ndarray:
    value = cfg.w_vfd * vfd(episode, cfg.dt_max) / cfg.dt_max
    if cfg.placement == "per_step":
        return np.full(episode.n_steps, value)
    out = np.zeros(episode.n_steps)
    out[-1] = value
    return out


MORTALITY_REWARD = 100.0
VARIANTS = ("vfd_range", "mortality", "mortality_range")


def mortality_reward(episode: Episode, scale: float = MORTALITY_REWARD) -> np.ndarray:
    out = np.zeros(episode.n_steps)
    out[-1] = -scale if episode.died else scale
    return out


@dataclass(frozen=True)
class RewardConfig:
    variant: str = "vfd_range"
    ranges: RangeSpec = field(default_factory=RangeSpec)
    vfd: VfdConfig = field(default_factory=VfdConfig)
    use_next_state: bool = True   # score r_range on s_{t+1} (last step: its own state)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown reward variant {self.variant!r}")


def episode_range_reward(episode: Episode, cfg: RewardConfig = RewardConfig()) -> np.ndarray:
    r = range_reward(episode.states, cfg.ranges)
    if cfg.use_next_state:
        r = np.append(r[1:], r[-1])
    return r


def reward_components(episode: Episode, cfg: RewardConfig = RewardConfig()) -> dict:
    if cfg.variant == "vfd_range":
        return {
            "r_range": episode_range_reward(episode, cfg),
            "r_tp": np.full(episode.n_steps, time_penalty()),
            "r_vfd": vfd_reward(episode, cfg.vfd),
        }
    comps = {"r_mortality": mortality_reward(episode)}
    if cfg.variant == "mortality_range":
        comps["r_range"] = episode_range_reward(episode, cfg)
    return comps


def annotate_episode(episode: Episode, cfg: RewardConfig = RewardConfig()) -> Episode:
    comps = reward_components(episode, cfg)
    comps["reward"] = sum(comps.values())
    return replace(episode, rewards=comps)


def annotate_rewards(dataset: Dataset, cfg: RewardConfig = RewardConfig()) -> Dataset:
    """Attach ``reward`` and its components to every step. States must be unnormalised."""
    if dataset.normalized:
        raise ValueError("rewards are defined on raw physiological values")
    eps = [annotate_episode(e, cfg) for e in dataset.episodes]
    return Dataset(eps, dataset.stats, dict(dataset.split), dataset.normalized)
