"""Train the three learners on the default synthetic cohort and compare them with the clinicians.

For each policy this prints the FQE estimate, the coverage score d^pi and the
true discounted return measured by running the policy in the generator.

usage: python3 demos/policy_vs_behavior.py [seed] [steps]
"""

import sys
from dataclasses import replace

from ventrl.experiments import evaluate_checkpoint, simulated_value, train_run
from ventrl.learners import ALGOS, load_policy, preset
from ventrl.ope import coverage_fit, coverage_preset, estimate_v_pi, fqe_fit, fqe_preset
from ventrl.pipeline import Splits
from ventrl.synth import GeneratorConfig, generate


def main(seed=0, steps=20_000):
    splits = Splits.build(generate(GeneratorConfig()), seed=0)
    fqe_cfg = fqe_preset("desk")
    cover = coverage_fit(splits.train_tr, coverage_preset("desk"), seed)
    v_b = estimate_v_pi(fqe_fit(None, splits.train_tr, fqe_cfg, seed), splits.test_tr)
    d_b = cover.score(splits.test_tr.obs, splits.test_tr.act_c, splits.test_tr.act_d)["total"]
    print(f"{'policy':<22}{'FQE V':>10}{'true V':>10}{'d_pi':>9}{'train s':>9}")
    print(f"{'clinician (behavior)':<22}{v_b:>10.2f}{simulated_value(None, splits.stats)['v0']:>10.2f}{d_b:>9.3f}")
    for algo in ALGOS:
        run = train_run(splits, replace(preset("desk", algo), steps=steps), seed)
        row = evaluate_checkpoint(splits, run.final, fqe_cfg, cover, seed)
        truth = simulated_value(load_policy(run.final, splits.space), splits.stats)["v0"]
        print(f"{algo:<22}{row['v_pi']:>10.2f}{truth:>10.2f}{row['d_pi']:>9.3f}{run.seconds:>9.0f}")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:3]))
