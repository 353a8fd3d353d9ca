"""From an unnormalised cohort to training and test transitions."""

from __future__ import annotations

from dataclasses import dataclass

from .actions import BinSpec, RestrictedActionSpace
from .data import Dataset, Normalizer, stratified_split
from .rewards import RewardConfig, annotate_rewards
from .transitions import Transitions


@dataclass
class Splits:
    train: Dataset           # raw units, rewards attached
    test: Dataset
    stats: Normalizer        # fitted on train
    space: RestrictedActionSpace
    train_tr: Transitions
    test_tr: Transitions
    mask_inactive: bool = False

    @classmethod
    def build(cls, cohort: Dataset, reward: RewardConfig = RewardConfig(), seed: int = 0,
              test_frac: float = 0.2, spec: BinSpec | None = None, mask_inactive: bool = False) -> "Splits":
        annotated = annotate_rewards(cohort, reward)
        train, test = stratified_split(annotated, test_frac, seed)
        stats = Normalizer.fit(train)
        space = RestrictedActionSpace.build(train.actions(), spec, mask_inactive)
        kw = dict(space=space, mask_inactive=mask_inactive)
        return cls(train, test, stats, space, Transitions.build(train, stats, **kw),
                   Transitions.build(test, stats, **kw), mask_inactive)

    def with_reward(self, reward: RewardConfig) -> "Splits":
        """Same split, statistics and action space under another reward."""
        train = annotate_rewards(self.train, reward)
        test = annotate_rewards(self.test, reward)
        kw = dict(space=self.space, mask_inactive=self.mask_inactive)
        return Splits(train, test, self.stats, self.space, Transitions.build(train, self.stats, **kw),
                      Transitions.build(test, self.stats, **kw), self.mask_inactive)
