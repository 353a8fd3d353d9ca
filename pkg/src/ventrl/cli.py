"""Command-line entry point: gen, preprocess, train, eval, select, report.

Every command writes ``manifest.json`` into its output directory with the
resolved configuration, the seed and SHA-256 hashes of inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .data import preprocess, read_dataset, write_dataset
from .experiments import (
    SWEEP_WEIGHTS,
    action_histograms,
    behavior_value,
    evaluate_checkpoint,
    policy_raw_actions,
    rows_to_csv,
    scores_from_rows,
    svg_histograms,
    svg_scatter,
    train_run,
    wvfd_sweep,
)
from .checkpoint import Checkpoint
from .learners import ALGOS, TrainConfig, load_policy, preset
from .learners.config import coerce_value, parse_key_values
from .ope import (
    CoverageConfig,
    EvalReport,
    FqeConfig,
    coverage_fit,
    coverage_preset,
    fqe_preset,
    reconstruction_study,
    select_policy,
)
from .pipeline import Splits
from .rewards import VARIANTS, RewardConfig, VfdConfig
from .synth import GeneratorConfig, coverage_report, emit_records, generate, records_from_text, records_to_text

log = logging.getLogger("ventrl")

ESTIMATORS = ("dist-fqe", "fqe")


class CliError(Exception):
    """Expected failure: reported on stderr with exit code 1."""


# --- run configuration ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything a train/eval/report run depends on besides the data and the seed.

    Text form: training keys bare, the others prefixed (``fqe.lr``,
    ``coverage.hidden``, ``reward.w_vfd``, ``split.seed``, ``eval.estimator``,
    ``sweep.steps``).
    """

    train: TrainConfig
    fqe: FqeConfig
    coverage: CoverageConfig
    reward: RewardConfig = field(default_factory=RewardConfig)
    split_seed: int = 0
    test_frac: float = 0.2
    estimator: str = "dist-fqe"
    sweep_steps: int = 5_000
    sweep_fqe_steps: int = 5_000
    sweep_seeds: int = 5

    @classmethod
    def from_preset(cls, name: str, algo: str) -> "RunConfig":
        return cls(preset(name, algo), fqe_preset(name), coverage_preset(name))

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.train.as_dict().items()}
        out.update({f"fqe.{k}": v for k, v in asdict(self.fqe).items()})
        out.update({f"coverage.{k}": v for k, v in asdict(self.coverage).items()})
        out.update({"reward.variant": self.reward.variant, "reward.w_vfd": self.reward.vfd.w_vfd,
                    "reward.placement": self.reward.vfd.placement, "reward.dt_max": self.reward.vfd.dt_max,
                    "reward.use_next_state": self.reward.use_next_state})
        out.update({"split.seed": self.split_seed, "split.test_frac": self.test_frac,
                    "eval.estimator": self.estimator, "sweep.steps": self.sweep_steps,
                    "sweep.fqe_steps": self.sweep_fqe_steps, "sweep.seeds": self.sweep_seeds})
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in self.to_dict().items())

    def override(self, values: dict) -> "RunConfig":
        groups: dict = {"train": {}, "fqe": {}, "coverage": {}, "reward": {}, "top": {}}
        top = {"split.seed": "split_seed", "split.test_frac": "test_frac", "eval.estimator": "estimator",
               "sweep.steps": "sweep_steps", "sweep.fqe_steps": "sweep_fqe_steps", "sweep.seeds": "sweep_seeds"}
        for k, v in values.items():
            if k in top:
                groups["top"][top[k]] = v
            elif "." in k:
                g, name = k.split(".", 1)
                if g not in ("fqe", "coverage", "reward"):
                    raise ValueError(f"unknown configuration key {k!r}")
                groups[g][name] = v
            else:
                groups["train"][k] = v
        train = TrainConfig.from_dict(groups["train"], self.train)
        fqe = _override_dataclass(self.fqe, groups["fqe"], "fqe")
        cov = _override_dataclass(self.coverage, groups["coverage"], "coverage")
        reward = self.reward
        r = groups["reward"]
        if r:
            unknown = set(r) - {"variant", "w_vfd", "placement", "dt_max", "use_next_state"}
            if unknown:
                raise ValueError(f"unknown reward keys {sorted(unknown)}")
            vfd = VfdConfig(dt_max=float(r.get("dt_max", reward.vfd.dt_max)),
                            w_vfd=float(r.get("w_vfd", reward.vfd.w_vfd)),
                            placement=str(r.get("placement", reward.vfd.placement)))
            use_next = coerce_value(r.get("use_next_state", reward.use_next_state), bool, "reward.use_next_state")
            reward = RewardConfig(variant=str(r.get("variant", reward.variant)), ranges=reward.ranges, vfd=vfd,
                                  use_next_state=use_next)
        out = replace(self, train=train, fqe=fqe, coverage=cov, reward=reward)
        kinds = {"split_seed": int, "test_frac": float, "estimator": str, "sweep_steps": int,
                 "sweep_fqe_steps": int, "sweep_seeds": int}
        out = replace(out, **{k: coerce_value(v, kinds[k], k) for k, v in groups["top"].items()})
        if out.estimator not in ESTIMATORS:
            raise ValueError(f"eval.estimator must be one of {ESTIMATORS}")
        return out

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_key_values(text)
        algo = values.get("algo", "factored-cql")
        return cls.from_preset("paper", algo).override(values)


def _override_dataclass(obj, values: dict, prefix: str):
    kinds = {f.name: type(getattr(obj, f.name)) for f in fields(obj)}
    out = {}
    for k, v in values.items():
        if k not in kinds:
            raise ValueError(f"unknown configuration key {prefix}.{k}")
        if getattr(obj, k) is None or v in (None, "none", "None"):
            out[k] = None if v in (None, "none", "None") else int(v)
        else:
            out[k] = coerce_value(v, kinds[k], f"{prefix}.{k}")
    return replace(obj, **out)


# --- manifests -----------------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, seed, config: dict, inputs: dict) -> Path:
    """``inputs`` maps a role name to a file path; outputs are every other file in ``out``."""
    outputs = {p.relative_to(out).as_posix(): sha256_file(p)
               for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "command": command, "version": __version__, "seed": seed, "config": config,
        "inputs": {k: {"path": str(Path(v)), "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "outputs": outputs,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise CliError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def resolve_run_config(args) -> RunConfig:
    values = parse_key_values(Path(args.config).read_text()) if args.config else {}
    algo = getattr(args, "algo", None) or values.get("algo")
    if algo is None:
        raise CliError("no algorithm given (use --algo)")
    cfg = RunConfig.from_preset(args.preset, algo).override(values)
    return cfg.override({"algo": algo})   # explicit flag wins


def _splits(data_path, cfg: RunConfig) -> Splits:
    cohort = read_dataset(_existing(data_path, "dataset"))
    return Splits.build(cohort, cfg.reward, seed=cfg.split_seed, test_frac=cfg.test_frac)


# --- commands ------------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    values = parse_key_values(Path(args.config).read_text()) if args.config else {}
    gcfg = GeneratorConfig.from_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    over = {}
    if args.patients is not None:
        over["n_patients"] = args.patients
    if args.seed is not None:
        over["seed"] = args.seed
    gcfg = replace(gcfg, **over)
    out = _outdir(args.out)
    cohort = generate(gcfg)
    write_dataset(cohort, out / "cohort.txt")
    (out / "records.csv").write_text(records_to_text(emit_records(cohort, seed=gcfg.seed)))
    (out / "coverage.txt").write_text(coverage_report(cohort).to_text())
    (out / "generator.cfg").write_text(gcfg.to_text())
    write_manifest(out, "gen", gcfg.seed, asdict(gcfg), {})
    print(f"generated {len(cohort)} episodes ({cohort.n_steps} hours) from {gcfg.n_patients} patients -> {out}")
    return 0


def cmd_preprocess(args) -> int:
    src = _existing(args.input, "records file")
    out = _outdir(args.out)
    dataset, report = preprocess(records_from_text(src.read_text()))
    write_dataset(dataset, out / "dataset.txt")
    lines = [f"episodes {report.n_episodes}", f"steps {report.n_steps}", f"rejections {report.n_rejections}"]
    lines += [f"cleaning {k} {v}" for k, v in sorted(report.cleaning.items())]
    lines += [f"excluded {k} {v}" for k, v in sorted(report.excluded_patients.items())]
    lines += [f"rejected {r}" for r in report.rejected_episodes]
    (out / "preprocess_report.txt").write_text("\n".join(lines) + "\n")
    write_manifest(out, "preprocess", None, {}, {"records": src})
    print(f"{report.n_episodes} episodes, {report.n_rejections} rejections -> {out}")
    return 0


def cmd_train(args) -> int:
    data = _existing(args.data, "dataset")
    cfg = resolve_run_config(args)
    out = _outdir(args.out)
    splits = _splits(data, cfg)
    (out / "config.txt").write_text(cfg.to_text())
    splits.space.save_csv(out / "action_space.csv")
    splits.stats.save(out / "normalizer.txt")
    run = train_run(splits, cfg.train, args.seed, out_dir=out)
    write_manifest(out, "train", args.seed, cfg.to_dict(), {"data": data})
    print(f"{cfg.train.algo}: {cfg.train.steps} steps, {len(run.checkpoints)} checkpoints -> {out}")
    return 0


# state for worker processes (set once per process)
_WORKER: dict = {}


def _init_worker(state):
    _WORKER.update(state)


def _eval_one(path):
    w = _WORKER
    ck = Checkpoint.load(path)
    row = evaluate_checkpoint(w["splits"], ck, w["fqe"], w["coverage"], w["seed"], w["dist"])
    row["checkpoint"] = Path(path).name
    return row


def cmd_eval(args) -> int:
    run_dir = _existing(args.run, "run directory")
    run_manifest = read_manifest(run_dir)
    data = Path(args.data) if args.data else Path(run_manifest["inputs"]["data"]["path"])
    _existing(data, "dataset")
    cfg = RunConfig.from_text((run_dir / "config.txt").read_text())
    if args.config:
        cfg = cfg.override(parse_key_values(Path(args.config).read_text()))
    ckpts = sorted(run_dir.glob("ckpt_*.bin"))
    if not ckpts:
        raise CliError(f"no checkpoints in {run_dir}")
    out = _outdir(args.out)
    splits = _splits(data, cfg)
    dist = cfg.estimator == "dist-fqe"
    coverage = coverage_fit(splits.train_tr, cfg.coverage, args.seed)
    _, v_b = behavior_value(splits, cfg.fqe, args.seed, dist)
    state = {"splits": splits, "fqe": cfg.fqe, "coverage": coverage, "seed": args.seed, "dist": dist}
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(state,)) as pool:
            rows = list(pool.map(_eval_one, [str(p) for p in ckpts]))
    else:
        _init_worker(state)
        rows = [_eval_one(str(p)) for p in ckpts]
    logged = coverage.score(splits.test_tr.obs, splits.test_tr.act_c, splits.test_tr.act_d)["total"]
    report = EvalReport(seed=args.seed, rows=rows, behavior={"v_pi": v_b, "d_pi": logged})
    scored = scores_from_rows(rows)
    chosen = None
    if scored:
        best = select_policy(scored)
        chosen = next(r for r in rows if r["step"] == best.step)
        report.selected = {"label": chosen["label"], "step": chosen["step"], "checkpoint": chosen["checkpoint"]}
    report.correlations = [{"label": f"{r['label']}@{r['step']}", "rho_range": r.get("rho_range"),
                            "rho_length": r.get("rho_length")} for r in rows if "rho_range" in r]
    if args.reconstruction_study:
        target = chosen or rows[-1]
        ck = Checkpoint.load(run_dir / target["checkpoint"])
        if ck.meta.get("algo") == "factored-cql":
            raise CliError("the reconstruction study needs a continuous-action policy (hybrid-iql or hybrid-edac)")
        policy = load_policy(ck, splits.space)
        report.reconstruction = [{**r, "label": f"{target['label']}@{target['step']}"} for r in
                                 reconstruction_study(policy, splits.test_tr.obs, splits.space, coverage,
                                                      seed=args.seed)]
        (out / "reconstruction.csv").write_text(report.reconstruction_csv())
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    if report.selected:
        (out / "selected.txt").write_text("".join(f"{k} = {v}\n" for k, v in report.selected.items()))
    write_manifest(out, "eval", args.seed, {**cfg.to_dict(), "run": str(run_dir)},
                   {"data": data, **{f"checkpoint:{p.name}": p for p in ckpts}})
    print(report.to_text(), end="")
    return 0


def _read_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_select(args) -> int:
    eval_dir = _existing(args.eval, "evaluation directory")
    src = _existing(eval_dir / "report.csv", "evaluation report")
    rows = [r for r in _read_rows(src) if r["algo"] != "behavior" and r["status"] != "fqe_diverged"]
    if not rows:
        raise CliError(f"no evaluated checkpoints in {src}")
    best = select_policy(scores_from_rows(rows))
    chosen = next(r for r in rows if int(r["step"]) == best.step)
    out = _outdir(args.out or eval_dir)
    text = "".join(f"{k} = {chosen[k]}\n" for k in ("label", "step", "v_pi", "d_pi", "checkpoint"))
    (out / "selected.txt").write_text(text)
    if out != eval_dir:
        write_manifest(out, "select", None, {}, {"report": src})
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    out = _outdir(args.out)
    policies = {}
    splits = None
    cfg = None
    summaries = []
    inputs = {}
    for i, d in enumerate(args.eval or []):
        eval_dir = _existing(d, "evaluation directory")
        man = read_manifest(eval_dir)
        run_dir = Path(man["config"]["run"])
        cfg = RunConfig.from_text((run_dir / "config.txt").read_text())
        data = Path(man["inputs"]["data"]["path"])
        if splits is None:
            splits = _splits(data, cfg)
            inputs["data"] = data
        sel = eval_dir / "selected.txt"
        chosen = parse_key_values(sel.read_text())["checkpoint"] if sel.exists() else \
            sorted(run_dir.glob("ckpt_*.bin"))[-1].name
        ck = Checkpoint.load(run_dir / chosen)
        inputs[f"checkpoint:{i}"] = run_dir / chosen
        policies[f"{ck.meta.get('algo')}@{ck.step}"] = policy_raw_actions(load_policy(ck, splits.space), splits)
        summaries.append((eval_dir / "report.txt").read_text())
    if args.data:
        data = _existing(args.data, "dataset")
        cfg = cfg or RunConfig.from_preset(args.preset, "hybrid-iql")
        if args.config:
            cfg = cfg.override(parse_key_values(Path(args.config).read_text()))
        splits = _splits(data, cfg)
        inputs["data"] = data
    if splits is None:
        raise CliError("report needs --eval directories or --data")
    acts = {"clinician (behavior)": splits.test.actions(), **policies}
    hist = action_histograms(acts, splits.space.spec)
    (out / "histograms.csv").write_text(rows_to_csv(hist, ["policy", "dimension", "bin", "count", "fraction"]))
    for dim in splits.space.spec.names:
        (out / f"histogram_{dim}.svg").write_text(svg_histograms(hist, dim))
    if summaries:
        (out / "summary.txt").write_text("\n".join(summaries))
    if args.sweep:
        scfg = replace(cfg.train, algo="hybrid-iql", steps=cfg.sweep_steps,
                       checkpoint_interval=cfg.sweep_steps) if cfg.train.algo == "hybrid-iql" else \
            replace(preset(args.preset, "hybrid-iql"), steps=cfg.sweep_steps, checkpoint_interval=cfg.sweep_steps)
        fcfg = replace(cfg.fqe, steps=cfg.sweep_fqe_steps)
        rows = wvfd_sweep(splits, scfg, fcfg, seeds=range(cfg.sweep_seeds), weights=SWEEP_WEIGHTS)
        (out / "wvfd_sweep.csv").write_text(rows_to_csv(
            rows, ["w_vfd", "seed", "placement", "rho_range", "rho_length", "defined"]))
        (out / "wvfd_sweep.svg").write_text(svg_scatter(
            [(r["w_vfd"], r["rho_range"]) for r in rows], "w_vfd (terminal)", "Spearman(Q, r_range)",
            "episode-mean Q vs safe-range reward"))
    write_manifest(out, "report", None, cfg.to_dict() if cfg else {}, inputs)
    print(f"report -> {out}")
    return 0


# --- argument parsing ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ventrl", description="Offline RL for ventilator settings on ICU data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic cohort")
    g.add_argument("--patients", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--config", help="generator key = value file")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    pp = sub.add_parser("preprocess", help="raw records -> episode dataset")
    pp.add_argument("--input", required=True, help="records CSV")
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train a learner")
    t.add_argument("--data", required=True, help="dataset file")
    t.add_argument("--algo", choices=ALGOS)
    t.add_argument("--preset", choices=("paper", "desk"), default="desk")
    t.add_argument("--config", help="key = value overrides (flags take precedence)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="off-policy evaluation of a training run")
    e.add_argument("--run", required=True, help="training output directory")
    e.add_argument("--data", help="dataset file (default: the one recorded by train)")
    e.add_argument("--config", help="key = value overrides")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--reconstruction-study", action="store_true")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("select", help="pick a checkpoint from an evaluation")
    s.add_argument("--eval", required=True, help="evaluation output directory")
    s.add_argument("--out", help="default: the evaluation directory")
    s.set_defaults(func=cmd_select)

    r = sub.add_parser("report", help="histograms and the w_vfd sweep")
    r.add_argument("--eval", nargs="*", help="evaluation output directories")
    r.add_argument("--data", help="dataset file (clinician histograms and sweep without evaluations)")
    r.add_argument("--preset", choices=("paper", "desk"), default="desk")
    r.add_argument("--config", help="key = value overrides")
    r.add_argument("--sweep", action="store_true", help="run the terminal w_vfd sweep")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"ventrl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
