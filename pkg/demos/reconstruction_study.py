"""How much distribution shift does binning a continuous policy introduce?

Trains HybridIQL briefly, bins its actions, maps them back with each
reconstruction method and scores every variant with the coverage model.

usage: python3 demos/reconstruction_study.py [seed] [steps]
"""

import sys
from dataclasses import replace

from ventrl.experiments import train_run
from ventrl.learners import load_policy, preset
from ventrl.ope import coverage_fit, coverage_preset, reconstruction_study
from ventrl.pipeline import Splits
from ventrl.synth import GeneratorConfig, generate


def main(seed=0, steps=5_000):
    splits = Splits.build(generate(GeneratorConfig()), seed=0)
    run = train_run(splits, replace(preset("desk", "hybrid-iql"), steps=steps), seed)
    model = coverage_fit(splits.train_tr, coverage_preset("desk"), seed)
    rows = reconstruction_study(load_policy(run.final, splits.space), splits.test_tr.obs, splits.space, model,
                                seed=seed)
    for r in rows:
        print(f"{r['rank']}. {r['method']:<18} d_pi={r['d_pi']:.3f}  bins kept: {r['same_bins']}")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
