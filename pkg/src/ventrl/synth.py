"""Synthetic ICU cohort with a noisy clinician-like behaviour policy.

This is a coverage and monotonicity harness, not a physiological model.
Each patient has a latent severity in [0, 1] that falls at a rate set by
how close the ventilator settings are to a severity-dependent ideal.
Observed vitals and labs are monotone in severity, shifted by setting
mismatch, with AR(1) noise. Extubation becomes likely as severity falls,
death hazard grows with severity, and extubations at high severity can be
followed by reintubation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .actions import BinSpec, bin_names, discretize
from .data import Dataset, Episode, RawRecord, fmt
from .rewards import RangeSpec, in_range_mask, vfd_branch
from .rng import make_rng
from .schema import ACTION_NAMES, PCV, STATE_DIM, STATE_INDEX, STATE_NAMES, STATIC_VARIABLES, VARIABLES, VCV

SETTINGS = ("rr", "vt", "dp", "peep", "fio2")
# ideal = base + slope * severity
IDEAL_BASE = np.array([14.0, 8.0, 10.0, 5.0, 30.0])
IDEAL_SLOPE = np.array([14.0, -2.5, 8.0, 11.0, 60.0])
# mismatch scale for action quality, and behaviour noise in the same units
QUALITY_SCALE = np.array([4.0, 1.0, 3.0, 2.5, 12.0])
SETTING_LO = np.array([5.0, 3.0, 0.0, 0.0, 21.0])
SETTING_HI = np.array([60.0, 12.0, 26.0, 20.0, 100.0])
SETTING_STEP = np.array([1.0, 0.1, 1.0, 1.0, 1.0])


@dataclass
class GeneratorConfig:
    n_patients: int = 1000
    seed: int = 0
    max_hours: int = 28 * 24
    min_hours: int = 4
    # behaviour policy
    behavior_noise: float = 0.8      # per-step noise, in quality-scale units
    behavior_bias: float = 0.5       # per-patient offset, in quality-scale units
    pcv_fraction: float = 0.4
    mode_switch: float = 0.01        # per-hour probability of switching mode
    # latent dynamics
    severity_lo: float = 0.3
    severity_hi: float = 0.95
    recovery_lo: float = 0.005
    recovery_hi: float = 0.05
    chronic_fraction: float = 0.01   # patients who do not recover at all
    severity_noise: float = 0.01
    ar_coef: float = 0.8
    # outcome hazards (per hour)
    death_coef: float = 0.004
    extubation_max: float = 0.3
    extubation_threshold: float = 0.3
    extubation_width: float = 0.05
    early_threshold: float = 0.25
    reintubation_fraction: float = 0.25
    reintubation_jump: float = 0.25
    reintubation_delay_lo: float = 12.0
    reintubation_delay_hi: float = 96.0
    max_episodes: int = 3
    post_death_coef: float = 0.3
    post_death_days_lo: float = 0.5
    post_death_days_hi: float = 30.0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be at least 1")
        probs = ("pcv_fraction", "mode_switch", "chronic_fraction", "extubation_max",
                 "reintubation_fraction")
        for name in probs:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if not 0 <= self.recovery_lo <= self.recovery_hi:
            raise ValueError("recovery rates must satisfy 0 <= lo <= hi")
        if self.min_hours < 1 or self.max_hours < self.min_hours:
            raise ValueError("need 1 <= min_hours <= max_hours")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "GeneratorConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in types:
                raise ValueError(f"unknown generator setting {key!r}")
            values[key] = int(raw) if types[key] in (int, "int") else float(raw)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        return cls.from_text(Path(path).read_text())


def ideal_settings(severity):
    if np.ndim(severity) == 0:
        return IDEAL_BASE + IDEAL_SLOPE * min(max(float(severity), 0.0), 1.0)
    return IDEAL_BASE + IDEAL_SLOPE * np.clip(severity, 0.0, 1.0)


def action_quality(settings, severity, mode) -> float:
    """exp(-mean squared scaled mismatch) over the settings active in ``mode``."""
    z = (np.asarray(settings) - ideal_settings(severity)) / QUALITY_SCALE
    active = np.array([True, mode == VCV, mode == PCV, True, True])
    z = z[active]
    return math.exp(-0.5 * float(z @ z) / len(z))


def _hill_saturation(pao2):
    p = max(pao2, 1.0) ** 2.7
    return 100.0 * p / (p + 26.8 ** 2.7)


LO = np.array([VARIABLES[n].lo for n in STATE_NAMES])
HI = np.array([VARIABLES[n].hi for n in STATE_NAMES])


@dataclass
class _Patient:
    age: float
    sex: float
    height: float
    weight: float
    ibw: float
    severity: float
    recovery: float
    bias: np.ndarray
    mode: int


def _new_patient(cfg: GeneratorConfig, rng) -> _Patient:
    sex = float(rng.random() < 0.4)
    height = float(np.clip(rng.normal(165 if sex else 177, 7), 155, 200))
    bmi = float(np.clip(rng.normal(27, 5), 17, 45))
    weight = float(np.clip(bmi * (height / 100) ** 2, 40, 140))
    ibw = (45.5 if sex else 50.0) + 0.91 * (height - 152.4)
    if rng.random() < cfg.chronic_fraction:
        recovery = 0.0
    elif cfg.recovery_lo > 0:
        recovery = float(math.exp(rng.uniform(math.log(cfg.recovery_lo), math.log(cfg.recovery_hi))))
    else:
        recovery = float(rng.uniform(cfg.recovery_lo, cfg.recovery_hi))
    return _Patient(
        age=float(np.clip(rng.normal(64, 14), 18, 95)), sex=sex, height=height, weight=weight, ibw=ibw,
        severity=float(rng.uniform(cfg.severity_lo, cfg.severity_hi)), recovery=recovery,
        bias=rng.normal(0.0, cfg.behavior_bias, 5) * QUALITY_SCALE,
        mode=PCV if rng.random() < cfg.pcv_fraction else VCV,
    )


def _behavior_action(p: _Patient, cfg: GeneratorConfig, rng) -> np.ndarray:
    if rng.random() < cfg.mode_switch:
        p.mode = 1 - p.mode
    ideal = ideal_settings(p.severity)
    lo, hi = SETTING_LO, SETTING_HI
    mean = np.minimum(np.maximum(ideal + p.bias, lo), hi)
    sd = cfg.behavior_noise * QUALITY_SCALE
    x = mean + sd * rng.standard_normal(5)
    bad = (x < lo) | (x > hi)
    while bad.any():  # truncated Gaussian by rejection
        x[bad] = mean[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
        bad = (x < lo) | (x > hi)
    x = np.minimum(np.maximum(np.round(x / SETTING_STEP) * SETTING_STEP, lo), hi)
    # the inactive setting is still reported: what the ventilator delivers
    compliance = 50.0 * (1.0 - 0.5 * p.severity)       # ml / cmH2O
    if p.mode == VCV:
        x[2] = min(max(round(x[1] * p.ibw / compliance), lo[2]), hi[2])
    else:
        x[1] = min(max(round(x[2] * compliance / p.ibw, 1), lo[1]), hi[1])
    return np.concatenate([[p.mode], x])


def _observe(p: _Patient, prev_action, noise) -> np.ndarray:
    s = p.severity
    ideal = ideal_settings(s)
    settings = prev_action[1:]
    d = settings - ideal
    mode = int(prev_action[0])
    compliance = 50.0 * (1.0 - 0.5 * s)
    vt_eff = settings[1] if mode == VCV else settings[2] * compliance / p.ibw
    x = np.empty(STATE_DIM)
    e = noise
    i = STATE_INDEX
    x[i["map"]] = 88 - 18 * s - 1.0 * d[3] + 5 * e[i["map"]]
    x[i["sbp"]] = x[i["map"]] + 38 + 6 * e[i["sbp"]]
    x[i["dbp"]] = x[i["map"]] - 18 + 4 * e[i["dbp"]]
    x[i["pinsp"]] = settings[3] + (settings[2] if mode == PCV else vt_eff * p.ibw / compliance) \
        + 1.5 * e[i["pinsp"]]
    x[i["vt_obs"]] = vt_eff * p.ibw + 20 * e[i["vt_obs"]]
    x[i["hb"]] = 11.5 - 2.5 * s + 0.6 * e[i["hb"]]
    x[i["wbc"]] = 8 + 9 * s + 2 * e[i["wbc"]]
    pao2 = 78 - 20 * s + 0.7 * d[4] + 2.0 * d[3] + 6 * e[i["pao2"]]
    x[i["pao2"]] = pao2
    sat = _hill_saturation(pao2)
    x[i["sao2"]] = sat + 0.5 * e[i["sao2"]]
    x[i["spo2"]] = sat + 1.2 * e[i["spo2"]]
    vent_term = d[1] * 4.0 if mode == VCV else d[2] * 1.0
    paco2 = 40 + 18 * s - 1.0 * d[0] - vent_term + 3 * e[i["paco2"]]
    x[i["paco2"]] = paco2
    be = -6 * s + 2 * e[i["base_excess"]]
    x[i["base_excess"]] = be
    x[i["ph"]] = 7.40 - 0.006 * (paco2 - 40) + 0.01 * be + 0.02 * e[i["ph"]]
    x[i["iv_fluid"]] = 1500 + 1500 * s + 400 * e[i["iv_fluid"]]
    x[i["urine"]] = 600 - 350 * s + 100 * e[i["urine"]]
    x[i["vaso"]] = max(0.0, 0.6 * (s - 0.3)) + 0.05 * e[i["vaso"]]
    x[i["potassium"]] = 4.2 + 0.5 * s + 0.3 * e[i["potassium"]]
    x[i["chloride"]] = 104 + 3 * e[i["chloride"]]
    x[i["sodium"]] = 140 + 3 * s + 2 * e[i["sodium"]]
    x[i["inr"]] = 1.1 + 0.8 * s + 0.1 * e[i["inr"]]
    x[i["hr"]] = 82 + 30 * s + 6 * e[i["hr"]]
    x[i["age"]] = p.age
    x[i["sex"]] = p.sex
    x[i["weight"]] = p.weight
    x[i["height"]] = p.height
    return np.minimum(np.maximum(np.round(x, 4), LO), HI)


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def _simulate_patient(pid: str, index: int, cfg: GeneratorConfig, policy=None) -> list:
    rng = make_rng(cfg.seed, "synth", index)
    p = _new_patient(cfg, rng)
    episodes = []
    clock = float(rng.integers(1, 48))   # hours from admission to first intubation
    noise = rng.standard_normal(STATE_DIM)
    innov = math.sqrt(1 - cfg.ar_coef ** 2)
    prev = None
    for k in range(cfg.max_episodes):
        states, actions = [], []
        outcome, death_h, reint_h = "extubated", None, None
        prev = prev if prev is not None else np.concatenate(
            [[p.mode], np.clip(ideal_settings(p.severity) + p.bias, SETTING_LO, SETTING_HI)])
        for t in range(cfg.max_hours):
            x = _observe(p, prev, noise)
            states.append(x)
            a = _behavior_action(p, cfg, rng) if policy is None else np.asarray(policy(x), dtype=float)
            actions.append(a)
            q = action_quality(a[1:], p.severity, int(a[0]))
            s_next = p.severity - p.recovery * q + cfg.severity_noise * rng.standard_normal()
            p.severity = min(max(float(s_next), 0.0), 1.0)
            noise = cfg.ar_coef * noise + innov * rng.standard_normal(STATE_DIM)
            prev = a
            if t + 1 < cfg.min_hours:
                continue
            if rng.random() < cfg.death_coef * p.severity ** 2:
                outcome, death_h = "died_on_vent", t + 1
                break
            h_ext = cfg.extubation_max * _sigmoid((cfg.extubation_threshold - p.severity)
                                                  / cfg.extubation_width)
            if rng.random() < h_ext:
                break
        n = len(states)
        ep = dict(states=np.array(states), actions=np.array(actions), start=clock)
        if outcome == "extubated" and n < cfg.max_hours:
            early = p.severity >= cfg.early_threshold
            if early and k + 1 < cfg.max_episodes and rng.random() < cfg.reintubation_fraction:
                delay = float(rng.uniform(cfg.reintubation_delay_lo, cfg.reintubation_delay_hi))
                reint_h = round(n + delay)
                outcome = "reintubated"
            elif rng.random() < cfg.post_death_coef * p.severity:
                days = float(rng.uniform(cfg.post_death_days_lo, cfg.post_death_days_hi))
                death_h = n + round(days * 24)
                outcome = "died_after_extubation"
        ep.update(outcome=outcome, death_h=death_h, reint_h=reint_h)
        episodes.append(ep)
        if outcome != "reintubated":
            break
        clock = clock + reint_h
        p.severity = min(1.0, p.severity + cfg.reintubation_jump)
    out = []
    for k, ep in enumerate(episodes):
        n = len(ep["states"])
        dt_death = ep["death_h"] / 24 if ep["death_h"] is not None else None
        dt_re = ep["reint_h"] / 24 if ep["reint_h"] is not None else None
        out.append(Episode(pid, k, ep["states"], ep["actions"], ep["outcome"], dt_death, dt_re,
                           start=ep["start"]))
    return out


def generate(config: GeneratorConfig | None = None, policy=None) -> Dataset:
    """Simulate ``config.n_patients`` patients under the behaviour policy.

    ``policy`` optionally replaces the clinician: it maps the raw observed
    state of one hour to a raw action row ``(mode, rr, vt, dp, peep, fio2)``.
    Patients, hazards and observation noise are drawn as usual, so the
    result is the policy's own rollout on the same kind of cohort.
    """
    cfg = config or GeneratorConfig()
    episodes = []
    width = max(5, len(str(cfg.n_patients)))
    for i in range(cfg.n_patients):
        episodes.extend(_simulate_patient(f"P{i:0{width}d}", i, cfg, policy))
    return Dataset(episodes)


# --- raw-record export -------------------------------------------------------------------

HOURLY = frozenset(("map", "dbp", "sbp", "hr", "spo2", "pinsp", "vt_obs") + ACTION_NAMES)
FLUIDS = frozenset(("iv_fluid", "urine", "vaso"))


def emit_records(dataset: Dataset, seed: int = 0, lab_missing: float = 0.6) -> list:
    """Flatten episodes into timestamped raw records, as an EHR extract would.

    Vitals and settings are charted hourly; labs are skipped at random
    after the first hour (imputation fills them forward); demographics are
    recorded once at admission. A ``death_time`` record carries deaths.
    """
    records = []
    by_patient: dict = {}
    for e in dataset.episodes:
        by_patient.setdefault(e.patient_id, []).append(e)
    for pid in sorted(by_patient):
        eps = sorted(by_patient[pid], key=lambda e: e.episode_id)
        rng = make_rng(seed, "records", pid)
        first = eps[0]
        for name in STATIC_VARIABLES:
            j = STATE_INDEX[name]
            value = first.states[0, j]
            if name == "sex":
                value = "female" if value == 1 else "male"
            records.append(RawRecord(pid, 0.0, name, value, "admission"))
        for e in eps:
            for t in range(e.n_steps):
                time = e.start + t
                for j, name in enumerate(STATE_NAMES):
                    if name in STATIC_VARIABLES:
                        continue
                    if t > 0 and name not in HOURLY and name not in FLUIDS and rng.random() < lab_missing:
                        continue
                    records.append(RawRecord(pid, time, name, float(e.states[t, j]), "chart"))
                for j, name in enumerate(ACTION_NAMES):
                    value = float(e.actions[t, j])
                    if name == "mode":
                        value = "pcv" if value == PCV else "vcv"
                    records.append(RawRecord(pid, time, name, value, "ventilator"))
        last = eps[-1]
        if last.dt_death is not None:
            records.append(RawRecord(pid, last.start + last.dt_death * 24, "death_time",
                                     last.start + last.dt_death * 24, "registry"))
    return records


def records_to_text(records) -> str:
    lines = ["patient_id,time,variable,value,source"]
    for r in records:
        value = r.value if isinstance(r.value, str) else fmt(r.value)
        lines.append(f"{r.patient_id},{fmt(r.time)},{r.variable},{value},{r.source or ''}")
    return "\n".join(lines) + "\n"


def records_from_text(text: str) -> list:
    out = []
    for line in text.splitlines()[1:]:
        if not line:
            continue
        pid, time, var, value, source = line.split(",")
        try:
            parsed: object = float(value)
        except ValueError:
            parsed = value
        out.append(RawRecord(pid, float(time), var, parsed, source or None))
    return out


# --- coverage report -------------------------------------------------------------------------


@dataclass
class CoverageReport:
    bin_counts: dict          # bin label -> count
    branch_fraction: dict     # VFD case -> fraction of episodes
    outcome_fraction: dict
    in_range_fraction: dict   # safe-range variable -> fraction of steps
    n_combinations: int
    n_episodes: int
    n_steps: int
    mean_hours: float

    @property
    def empty_bins(self) -> list:
        return [k for k, v in self.bin_counts.items() if v == 0]

    def to_text(self) -> str:
        lines = [f"episodes {self.n_episodes}", f"steps {self.n_steps}",
                 f"mean_hours {fmt(self.mean_hours)}", f"distinct_combinations {self.n_combinations}"]
        lines += [f"branch {k} {fmt(v)}" for k, v in self.branch_fraction.items()]
        lines += [f"outcome {k} {fmt(v)}" for k, v in self.outcome_fraction.items()]
        lines += [f"in_range {k} {fmt(v)}" for k, v in self.in_range_fraction.items()]
        lines += [f"bin {k} {v}" for k, v in self.bin_counts.items()]
        lines.append("empty_bins " + (" ".join(self.empty_bins) or "none"))
        return "\n".join(lines) + "\n"


def coverage_report(dataset: Dataset, spec: BinSpec | None = None, mask_inactive: bool = False,
                    ranges: RangeSpec | None = None, dt_max: float = 28.0) -> CoverageReport:
    if len(dataset) == 0:
        raise ValueError("coverage report needs a nonempty dataset")
    spec = spec or BinSpec.default()
    ranges = ranges or RangeSpec()
    actions = dataset.actions()
    bins = discretize(actions, spec, mask_inactive)
    labels = bin_names(spec)
    counts = np.zeros(spec.width, dtype=int)
    np.add.at(counts, (bins + spec.offsets).ravel(), 1)
    branches = {b: 0 for b in ("survived", "reintubated", "died", "otherwise")}
    outcomes = {}
    for e in dataset.episodes:
        branches[vfd_branch(e, dt_max)] += 1
        outcomes[e.outcome] = outcomes.get(e.outcome, 0) + 1
    n = len(dataset)
    mask = in_range_mask(dataset.states(), ranges)
    return CoverageReport(
        bin_counts=dict(zip(labels, counts.tolist())),
        branch_fraction={k: v / n for k, v in branches.items()},
        outcome_fraction={k: outcomes.get(k, 0) / n for k in
                          ("extubated", "died_on_vent", "died_after_extubation", "reintubated")},
        in_range_fraction={r.variable: float(m) for r, m in zip(ranges.ranges, mask.mean(axis=0))},
        n_combinations=len(np.unique(bins, axis=0)),
        n_episodes=n, n_steps=dataset.n_steps, mean_hours=dataset.n_steps / n,
    )
