"""Training loop shared by the three learners."""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..actions import RestrictedActionSpace
from ..checkpoint import Checkpoint, config_hash
from ..rng import make_rng
from ..transitions import Transitions
from .config import TrainConfig
from .cql import FactoredCql
from .edac import HybridEdac
from .iql import HybridIql
from .policy import FactoredPolicy, HybridActor, mlp_from_arrays

log = logging.getLogger(__name__)


def make_learner(cfg: TrainConfig, obs_dim: int, seed: int, space: RestrictedActionSpace | None = None):
    rng = make_rng(seed, "init", cfg.algo)
    if cfg.algo == "factored-cql":
        if space is None:
            raise ValueError("factored-cql needs the restricted action space")
        return FactoredCql.init(obs_dim, space, cfg, rng)
    if cfg.algo == "hybrid-iql":
        return HybridIql.init(obs_dim, cfg, rng)
    return HybridEdac.init(obs_dim, cfg, rng)


def snapshot(learner, cfg: TrainConfig, seed: int, step: int, **extra) -> Checkpoint:
    arrays = {k: np.array(v, copy=True) for k, v in learner.arrays().items()}
    meta = {"seed": seed, "step": step, "config_hash": config_hash(cfg.as_dict()), "algo": cfg.algo}
    meta.update(extra)
    return Checkpoint(arrays, meta)


def train(algo: str, data: Transitions, cfg: TrainConfig, seed: int,
          space: RestrictedActionSpace | None = None, out_dir=None, log_rows: list | None = None) -> list:
    """Run ``cfg.steps`` updates on uniformly sampled minibatches.

    Returns the checkpoints taken every ``cfg.checkpoint_interval`` steps
    (and at the last step). With ``out_dir`` they are also written to disk
    together with ``train_log.csv``. Logged loss rows are appended to
    ``log_rows`` when given.
    """
    cfg = replace(cfg, algo=algo)
    learner = make_learner(cfg, data.obs.shape[1], seed, space)
    batch_rng = make_rng(seed, "batches")
    noise_rng = make_rng(seed, "noise")
    rows = log_rows if log_rows is not None else []
    checkpoints = []
    skipped = 0
    for step in range(1, cfg.steps + 1):
        losses = learner.update(data.sample(batch_rng, cfg.batch_size), noise_rng)
        skipped += int("skipped" in losses)
        if step % cfg.log_interval == 0 or step == cfg.steps:
            if not all(np.isfinite(v) for v in losses.values()):
                raise FloatingPointError(f"non-finite loss at step {step}: {losses}")
            rows.append({"step": step, **losses})
        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            checkpoints.append(snapshot(learner, cfg, seed, step, skipped=skipped))
    if skipped:
        log.warning("%s: %d batches skipped for non-finite advantages", algo, skipped)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for ck in checkpoints:
            ck.save(out / checkpoint_name(ck.step))
        write_log(rows, out / "train_log.csv")
    return checkpoints


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:07d}.bin"


def write_log(rows: list, path) -> Path:
    keys = ["step"] + sorted({k for r in rows for k in r if k != "step"})
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def load_policy(ckpt: Checkpoint, space: RestrictedActionSpace | None = None, method: str = "bin_mode"):
    """Rebuild the acting policy stored in a checkpoint."""
    algo = ckpt.meta.get("algo")
    if algo == "factored-cql":
        if space is None:
            raise ValueError("a factored-cql checkpoint needs its restricted action space")
        return FactoredPolicy(mlp_from_arrays("critic", ckpt.arrays), space, method)
    if algo == "hybrid-iql":
        return HybridActor(mlp_from_arrays("actor", ckpt.arrays), ckpt.arrays["actor.log_std"].copy())
    if algo == "hybrid-edac":
        return HybridActor(mlp_from_arrays("actor", ckpt.arrays), None)
    raise ValueError(f"checkpoint has unknown algorithm {algo!r}")
