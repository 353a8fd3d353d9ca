"""Experiment building blocks shared by the command line and the acceptance suite:
train-and-evaluate runs, action histograms, the w_vfd sweep and small SVG plots."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .actions import bin_names, discretize
from .checkpoint import Checkpoint
from .data import CONT_HI, CONT_LO, Normalizer
from .learners import TrainConfig, load_policy, train
from .ope import (
    CheckpointScore,
    FqeConfig,
    FqeDiverged,
    coverage_score,
    estimate_v_pi,
    fqe_fit,
    policy_actions,
    reward_effectiveness,
)
from .pipeline import Splits
from .rewards import RewardConfig, VfdConfig, annotate_rewards
from .synth import GeneratorConfig, generate

log = logging.getLogger(__name__)

SWEEP_WEIGHTS = (0.0, 0.5, 1.0, 2.0, 5.0)


@dataclass
class Run:
    algo: str
    seed: int
    checkpoints: list
    seconds: float
    log_rows: list = field(default_factory=list)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def train_run(splits: Splits, cfg: TrainConfig, seed: int, out_dir=None) -> Run:
    rows: list = []
    t0 = time.perf_counter()
    cks = train(cfg.algo, splits.train_tr, cfg, seed, space=splits.space, out_dir=out_dir, log_rows=rows)
    return Run(cfg.algo, seed, cks, time.perf_counter() - t0, rows)


def behavior_value(splits: Splits, fqe_cfg: FqeConfig, seed: int, distributional: bool = False):
    """FQE of the logged policy on train; value at the test episodes' first steps."""
    model = fqe_fit(None, splits.train_tr, fqe_cfg, seed, distributional)
    return model, estimate_v_pi(model, splits.test_tr)


def evaluate_checkpoint(splits: Splits, ckpt: Checkpoint, fqe_cfg: FqeConfig, coverage, seed: int,
                        distributional: bool = False, label: str = "") -> dict:
    """V^pi, d^pi (with per-head parts) and reward-effectiveness for one checkpoint.

    FQE divergence is reported in ``status`` rather than raised.
    """
    policy = load_policy(ckpt, splits.space)
    row = {"label": label or ckpt.meta.get("algo", ""), "algo": ckpt.meta.get("algo", ""),
           "step": ckpt.step, "train_seed": ckpt.seed}
    if coverage is not None:
        scores = coverage_score(coverage, splits.test_tr.obs, policy)
        row["d_pi"] = scores.pop("total")
        row.update({f"d_pi_{k}": v for k, v in scores.items()})
    try:
        model = fqe_fit(policy, splits.train_tr, fqe_cfg, seed, distributional)
    except FqeDiverged as exc:
        log.warning("%s step %d: %s", row["label"], ckpt.step, exc)
        row.update(v_pi=float("nan"), status="fqe_diverged")
        return row
    row["v_pi"] = estimate_v_pi(model, splits.test_tr, policy)
    eff = reward_effectiveness(model, splits.test_tr, splits.test)
    row.update(rho_range=eff["rho_range"], rho_length=eff["rho_length"],
               status="ok" if eff["defined"] else "rho_undefined")
    return row


def scores_from_rows(rows: list) -> list:
    return [CheckpointScore(r["label"], int(r["step"]), float(r["v_pi"]), float(r["d_pi"]))
            for r in rows if r.get("status", "ok") != "fqe_diverged"]


# --- ground truth by simulation -------------------------------------------------------------------

ROLLOUT_COHORT = GeneratorConfig(n_patients=300, seed=999)


def simulated_value(policy, stats: Normalizer, reward: RewardConfig = RewardConfig(), gamma: float = 0.99,
                    cohort: GeneratorConfig = ROLLOUT_COHORT) -> dict:
    """True discounted return from the first step, by running ``policy`` in the generator.

    ``policy=None`` replays the generator's clinician on the same patients.
    Only available for synthetic data; used to check what FQE estimates.
    """
    hook = None
    if policy is not None:
        def hook(x):
            obs = stats.states(x[None]).astype(np.float32)
            cont, mode = policy.act(obs, True)
            raw = np.clip(Normalizer.inverse_cont_actions(cont), CONT_LO, CONT_HI)[0]
            return np.concatenate([[int(mode[0])], raw])
    ds = annotate_rewards(generate(cohort, hook), reward)
    returns = [float((e.rewards["reward"] * gamma ** np.arange(e.n_steps)).sum()) for e in ds.episodes]
    return {"v0": float(np.mean(returns)), "mean_hours": float(np.mean([e.n_steps for e in ds.episodes])),
            "died": float(np.mean([e.outcome.startswith("died") for e in ds.episodes])),
            "in_range": float(np.mean(np.concatenate([e.rewards["r_range"] for e in ds.episodes])))
            if "r_range" in ds.episodes[0].rewards else float("nan")}


# --- action histograms ---------------------------------------------------------------------------


def policy_raw_actions(policy, splits: Splits) -> np.ndarray:
    """Raw (mode, settings) actions of ``policy`` on the test states."""
    c, d = policy_actions(policy, splits.test_tr.obs)
    raw = np.clip(Normalizer.inverse_cont_actions(c), CONT_LO, CONT_HI)
    return np.column_stack([d, raw])


def action_histograms(actions_by_policy: dict, spec) -> list:
    """One row per (policy, bin): count and fraction of actions in that bin."""
    labels = bin_names(spec)
    rows = []
    for name, acts in actions_by_policy.items():
        bins = discretize(acts, spec)
        k = 0
        for j, d in enumerate(spec.dims):
            counts = np.bincount(bins[:, j], minlength=d.n_bins)
            for b in range(d.n_bins):
                rows.append({"policy": name, "dimension": d.name, "bin": labels[k], "count": int(counts[b]),
                             "fraction": float(counts[b] / len(bins))})
                k += 1
    return rows


# --- reward-design studies ---------------------------------------------------------------------


def reward_correlation(splits: Splits, reward: RewardConfig, cfg: TrainConfig, fqe_cfg: FqeConfig,
                       seed: int) -> dict:
    """Train under ``reward``, fit FQE for the final policy, correlate episode-mean Q
    (at logged actions on the test split) with r_range and episode length."""
    s = splits.with_reward(reward)
    run = train_run(s, cfg, seed)
    policy = load_policy(run.final, s.space)
    model = fqe_fit(policy, s.train_tr, fqe_cfg, seed)
    # r_range is scored identically under every reward variant
    ref = splits.with_reward(RewardConfig(ranges=reward.ranges, use_next_state=reward.use_next_state))
    eff = reward_effectiveness(model, s.test_tr, ref.test)
    return {"variant": reward.variant, "w_vfd": reward.vfd.w_vfd, "placement": reward.vfd.placement,
            "seed": seed, **eff}


def wvfd_sweep(splits: Splits, cfg: TrainConfig, fqe_cfg: FqeConfig, seeds, weights=SWEEP_WEIGHTS,
               placement: str = "terminal") -> list:
    rows = []
    for w in weights:
        reward = RewardConfig(vfd=VfdConfig(w_vfd=w, placement=placement))
        for seed in seeds:
            rows.append(reward_correlation(splits, reward, cfg, fqe_cfg, seed))
    return rows


# --- tables and plots ------------------------------------------------------------------------------


def rows_to_csv(rows: list, columns=None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _svg(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n{body}</svg>\n')


def svg_scatter(points: list, xlabel: str, ylabel: str, title: str = "") -> str:
    """``points`` are (x, y) pairs; the per-x mean is drawn as a line."""
    w, h, m = 420, 300, 45
    xs = np.array([p[0] for p in points], dtype=float)
    ys = np.array([p[1] for p in points], dtype=float)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = min(float(ys.min()), -1.0), max(float(ys.max()), 1.0)
    x1 = x1 if x1 > x0 else x0 + 1

    def px(x):
        return m + (x - x0) / (x1 - x0) * (w - 2 * m)

    def py(y):
        return h - m - (y - y0) / (y1 - y0) * (h - 2 * m)

    parts = [f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{py(0):.1f}" x2="{w - m}" y2="{py(0):.1f}" stroke="#bbb" stroke-dasharray="3"/>',
             f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle">{xlabel}</text>',
             f'<text x="12" y="{h / 2}" transform="rotate(-90 12 {h / 2})" text-anchor="middle">{ylabel}</text>',
             f'<text x="{w / 2}" y="18" text-anchor="middle">{title}</text>']
    for v in sorted(set(xs.tolist())):
        parts.append(f'<text x="{px(v):.1f}" y="{h - m + 14}" text-anchor="middle">{v:g}</text>')
    for v in (y0, 0.0, y1):
        parts.append(f'<text x="{m - 4}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.2g}</text>')
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="#1f77b4" fill-opacity="0.6"/>')
    ux = sorted(set(xs.tolist()))
    means = [float(ys[xs == v].mean()) for v in ux]
    path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(ux, means))
    parts.append(f'<polyline points="{path}" fill="none" stroke="#d62728"/>')
    return _svg(w, h, "\n".join(parts) + "\n")


def svg_histograms(rows: list, dimension: str) -> str:
    """Grouped bars of bin fractions for one action dimension, one colour per policy."""
    rows = [r for r in rows if r["dimension"] == dimension]
    policies = list(dict.fromkeys(r["policy"] for r in rows))
    bins = list(dict.fromkeys(r["bin"] for r in rows))
    colours = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    w, h, m = max(300, 60 + 40 * len(bins)), 260, 40
    slot = (w - 2 * m) / max(len(bins), 1)
    bar = slot / (len(policies) + 1)
    top = max([r["fraction"] for r in rows] + [1e-9])
    parts = [f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
             f'<text x="{w / 2}" y="16" text-anchor="middle">{dimension}</text>']
    for r in rows:
        i, k = bins.index(r["bin"]), policies.index(r["policy"])
        bh = r["fraction"] / top * (h - 2 * m)
        x = m + i * slot + k * bar
        parts.append(f'<rect x="{x:.1f}" y="{h - m - bh:.1f}" width="{bar:.1f}" height="{bh:.1f}" '
                     f'fill="{colours[k % len(colours)]}"/>')
    for i, b in enumerate(bins):
        parts.append(f'<text x="{m + (i + 0.5) * slot:.1f}" y="{h - m + 14}" text-anchor="middle" '
                     f'font-size="9">{b.split("[", 1)[-1].rstrip("]")}</text>')
    for k, p in enumerate(policies):
        parts.append(f'<rect x="{m + 130 * k}" y="{h - 14}" width="10" height="10" fill="{colours[k % len(colours)]}"/>'
                     f'<text x="{m + 130 * k + 14}" y="{h - 5}">{p}</text>')
    return _svg(w, h, "\n".join(parts) + "\n")


def with_steps(cfg, steps: int):
    """Copy of a config with another step budget (checkpoint interval capped to it)."""
    if isinstance(cfg, TrainConfig):
        return replace(cfg, steps=steps, checkpoint_interval=min(cfg.checkpoint_interval, steps))
    return replace(cfg, steps=steps)


__all__ = [
    "Run", "train_run", "behavior_value", "evaluate_checkpoint", "scores_from_rows", "policy_raw_actions",
    "action_histograms", "reward_correlation", "wvfd_sweep", "rows_to_csv", "svg_scatter", "svg_histograms",
    "with_steps", "SWEEP_WEIGHTS", "simulated_value", "ROLLOUT_COHORT",
]
