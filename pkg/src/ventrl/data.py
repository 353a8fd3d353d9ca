"""Episodes, the on-disk dataset format, and preprocessing.

Raw measurements (:class:`RawRecord`) go through :func:`clean`,
:func:`build_episodes` and :func:`impute`; :func:`preprocess` chains the
three. Finished episodes are split with :func:`stratified_split` and
scaled with a :class:`Normalizer` fitted on the training split.

Dataset file layout (one step per line, comma separated)::

    # ventrl-dataset 1
    patient_id,episode_id,t,map,...,height,mode,rr,vt,dp,peep,fio2[,r_range,r_tp,r_vfd]
    P00001,0,0,82.5,...
    P00001,0,1,80.1,...
    #episode P00001,0,outcome=extubated,dt_death=,dt_re=,start=0,split=train

The ``#episode`` summary line closes each episode. ``dt_mv`` is implied by
the step count (hours / 24).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import make_rng
from .schema import (
    ACTION_NAMES,
    CATEGORICAL_VARIABLES,
    CONT_ACTION_NAMES,
    DEFAULT_ENCODINGS,
    STATE_DIM,
    STATE_NAMES,
    STATIC_VARIABLES,
    VARIABLES,
    VENT_VARIABLES,
    VARIABLES as _VARS,
)

log = logging.getLogger(__name__)

OUTCOMES = ("extubated", "died_on_vent", "died_after_extubation", "reintubated")
HOURS_PER_DAY = 24.0
DEATH_VARIABLE = "death_time"


class EpisodeRejected(ValueError):
    """An episode cannot be completed (e.g. a variable never observed)."""


def fmt(x) -> str:
    """Fixed 9-significant-digit decimal used by every text file we write."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".9g")


def fmt_exact(x) -> str:
    """Round-trip decimal, for outcome times that are checked against step counts."""
    return "" if x is None else repr(float(x))


# --- data model -------------------------------------------------------------------


@dataclass
class RawRecord:
    patient_id: str
    time: float          # hours on the patient's own timeline
    variable: str
    value: object
    source: str | None = None


@dataclass
class Step:
    t: int
    state: np.ndarray
    action: np.ndarray
    rewards: dict


@dataclass
class Episode:
    patient_id: str
    episode_id: int
    states: np.ndarray            # (T, STATE_DIM)
    actions: np.ndarray           # (T, 6): mode, rr, vt, dp, peep, fio2
    outcome: str = "extubated"
    dt_death: float | None = None  # days since ventilation start
    dt_re: float | None = None
    start: float = 0.0            # absolute hour of step 0
    rewards: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient_id, self.episode_id)

    @property
    def n_steps(self) -> int:
        return len(self.states)

    @property
    def dt_mv(self) -> float:
        return self.n_steps / HOURS_PER_DAY

    @property
    def died(self) -> bool:
        return self.outcome in ("died_on_vent", "died_after_extubation")

    def step(self, t: int) -> Step:
        return Step(t, self.states[t], self.actions[t], {k: v[t] for k, v in self.rewards.items()})

    def validate(self) -> None:
        if self.n_steps < 1:
            raise ValueError("empty episode")
        if self.dt_re is not None and self.dt_re < self.dt_mv - 1e-9:
            raise ValueError(f"{self.key}: reintubation before extubation")
        if self.dt_death is not None and self.dt_death < self.dt_mv - 1e-9:
            raise ValueError(f"{self.key}: death before end of ventilation")


@dataclass
class Dataset:
    episodes: list
    stats: "Normalizer | None" = None
    split: dict = field(default_factory=dict)   # episode key -> "train" | "test"
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_steps(self) -> int:
        return sum(e.n_steps for e in self.episodes)

    @property
    def patients(self) -> set:
        return {e.patient_id for e in self.episodes}

    def subset(self, name: str) -> "Dataset":
        eps = [e for e in self.episodes if self.split.get(e.key) == name]
        return Dataset(eps, self.stats, {e.key: name for e in eps}, self.normalized)

    def states(self) -> np.ndarray:
        return np.concatenate([e.states for e in self.episodes])

    def actions(self) -> np.ndarray:
        return np.concatenate([e.actions for e in self.episodes])


# --- cleaning -------------------------------------------------------------------------


def clean(records, encodings=None) -> tuple[list, dict]:
    """Encode categorical strings and drop out-of-range or unknown records.

    Returns ``(kept_records, counts)`` where counts has ``out_of_range``,
    ``unknown_variable`` and ``bad_value`` entries.
    """
    encodings = DEFAULT_ENCODINGS if encodings is None else encodings
    counts = {"out_of_range": 0, "unknown_variable": 0, "bad_value": 0}
    kept = []
    for rec in records:
        if rec.variable == DEATH_VARIABLE:
            kept.append(rec)
            continue
        var = VARIABLES.get(rec.variable)
        if var is None:
            counts["unknown_variable"] += 1
            continue
        value = rec.value
        if isinstance(value, str):
            table = encodings.get(rec.variable, {})
            key = value.strip().lower()
            if key in table:
                value = table[key]
            else:
                try:
                    value = float(key)
                except ValueError:
                    counts["bad_value"] += 1
                    continue
        value = float(value)
        if not math.isfinite(value):
            counts["bad_value"] += 1
            continue
        if not var.lo <= value <= var.hi:
            counts["out_of_range"] += 1
            continue
        kept.append(replace(rec, value=value) if value != rec.value else rec)
    if counts["unknown_variable"]:
        log.warning("skipped %d records with unknown variable names", counts["unknown_variable"])
    return kept, counts


# --- episode building -----------------------------------------------------------------


@dataclass
class EpisodeConfig:
    gap_hours: float = 6.0
    min_hours: int = 4
    lookback_hours: float = 24.0
    dt_max_days: float = 28.0
    source_priority: dict = field(default_factory=dict)  # variable -> [source, ...]


REQUIRED_VARIABLES = STATE_NAMES + ACTION_NAMES


def _resolve_numeric(recs, priority) -> float:
    if priority:
        rank = {s: i for i, s in enumerate(priority)}
        best = min(rank.get(r.source, len(rank)) for r in recs)
        recs = [r for r in recs if rank.get(r.source, len(rank)) == best]
    return float(np.median([r.value for r in recs]))


def _resolve_categorical(recs, window_end) -> float:
    # longest time in effect within the window; ties go to the earliest value
    recs = sorted(recs, key=lambda r: r.time)
    durations: dict = {}
    first_seen: dict = {}
    for i, r in enumerate(recs):
        end = recs[i + 1].time if i + 1 < len(recs) else window_end
        durations[r.value] = durations.get(r.value, 0.0) + (end - r.time)
        first_seen.setdefault(r.value, i)
    return float(max(durations, key=lambda v: (durations[v], -first_seen[v])))


def _bursts(times, gap):
    times = sorted(times)
    out = [[times[0], times[0]]]
    for t in times[1:]:
        if t - out[-1][1] >= gap:
            out.append([t, t])
        else:
            out[-1][1] = t
    return out


def build_episodes(records, config: EpisodeConfig | None = None) -> tuple[list, dict]:
    """Group cleaned records into hourly ventilation episodes.

    Returns ``(episodes, excluded)`` where ``excluded`` maps patient id to
    the reason the patient was dropped. Step-0 values missing inside the
    first hour are seeded from the latest earlier measurement (static
    demographics at any distance, other variables within ``lookback_hours``).
    """
    cfg = config or EpisodeConfig()
    by_patient = defaultdict(list)
    for r in records:
        by_patient[r.patient_id].append(r)

    episodes, excluded = [], {}
    for pid in sorted(by_patient):
        recs = sorted(by_patient[pid], key=lambda r: (r.time, r.variable, str(r.source), r.value))
        present = {r.variable for r in recs}
        missing = [v for v in REQUIRED_VARIABLES if v not in present]
        if missing:
            excluded[pid] = "missing " + ",".join(missing)
            continue
        death = [r.value for r in recs if r.variable == DEATH_VARIABLE]
        death_time = min(death) if death else None
        by_var = defaultdict(list)
        for r in recs:
            if r.variable != DEATH_VARIABLE:
                by_var[r.variable].append(r)
        vent_times = [r.time for r in recs if r.variable in VENT_VARIABLES]
        spans = []
        for lo, hi in _bursts(vent_times, cfg.gap_hours):
            n = int(math.floor(hi - lo + 1e-6)) + 1
            if n >= cfg.min_hours:
                spans.append((lo, n))
        pat_eps = []
        for k, (start, n) in enumerate(spans):
            pat_eps.append(_episode_from_span(pid, k, start, n, by_var, cfg))
        _assign_outcomes(pat_eps, death_time, cfg)
        episodes.extend(pat_eps)
    return episodes, excluded


def _episode_from_span(pid, k, start, n, by_var, cfg) -> Episode:
    names = STATE_NAMES + ACTION_NAMES
    table = np.full((n, len(names)), np.nan)
    end = start + n
    for j, name in enumerate(names):
        recs = by_var.get(name, [])
        buckets = defaultdict(list)
        for r in recs:
            if start <= r.time < end:
                buckets[min(int(math.floor(r.time - start + 1e-6)), n - 1)].append(r)
        for t, group in buckets.items():
            if name in CATEGORICAL_VARIABLES:
                table[t, j] = _resolve_categorical(group, start + t + 1)
            else:
                table[t, j] = _resolve_numeric(group, cfg.source_priority.get(name))
        if math.isnan(table[0, j]):
            horizon = -math.inf if name in STATIC_VARIABLES else start - cfg.lookback_hours
            prior = [r for r in recs if horizon <= r.time < start]
            if prior:
                table[0, j] = prior[-1].value
    return Episode(pid, k, table[:, :STATE_DIM], table[:, STATE_DIM:], start=float(start))


def _assign_outcomes(pat_eps, death_time, cfg) -> None:
    for i, ep in enumerate(pat_eps):
        end = ep.start + ep.n_steps
        nxt = pat_eps[i + 1] if i + 1 < len(pat_eps) else None
        if death_time is not None and ep.start <= death_time < end + 1.0:
            ep.outcome, ep.dt_death = "died_on_vent", ep.dt_mv
        elif nxt is not None and (nxt.start - ep.start) / HOURS_PER_DAY < cfg.dt_max_days:
            ep.outcome, ep.dt_re = "reintubated", (nxt.start - ep.start) / HOURS_PER_DAY
        elif nxt is None and death_time is not None and death_time >= end:
            ep.outcome = "died_after_extubation"
            ep.dt_death = max((death_time - ep.start) / HOURS_PER_DAY, ep.dt_mv)
        else:
            ep.outcome = "extubated"


def impute(episode: Episode) -> Episode:
    """Forward-fill missing values within the episode.

    Raises :class:`EpisodeRejected` when a variable has no value at step 0.
    """
    out = []
    for arr in (episode.states, episode.actions):
        arr = np.array(arr, dtype=np.float64, copy=True)
        lead = np.isnan(arr[0])
        if lead.any():
            names = STATE_NAMES if arr.shape[1] == STATE_DIM else ACTION_NAMES
            bad = [names[j] for j in np.flatnonzero(lead)]
            raise EpisodeRejected(f"{episode.key}: never observed at start: {','.join(bad)}")
        for t in range(1, len(arr)):
            gap = np.isnan(arr[t])
            arr[t, gap] = arr[t - 1, gap]
        out.append(arr)
    return replace(episode, states=out[0], actions=out[1], rewards=dict(episode.rewards))


@dataclass
class PipelineReport:
    cleaning: dict
    excluded_patients: dict
    rejected_episodes: list
    n_episodes: int
    n_steps: int

    @property
    def n_rejections(self) -> int:
        return (len(self.excluded_patients) + len(self.rejected_episodes)
                + self.cleaning.get("out_of_range", 0) + self.cleaning.get("unknown_variable", 0)
                + self.cleaning.get("bad_value", 0))


def preprocess(records, config: EpisodeConfig | None = None) -> tuple[Dataset, PipelineReport]:
    kept, counts = clean(records)
    episodes, excluded = build_episodes(kept, config)
    done, rejected = [], []
    for ep in episodes:
        try:
            done.append(impute(ep))
        except EpisodeRejected as exc:
            rejected.append(str(exc))
    report = PipelineReport(counts, excluded, rejected, len(done), sum(e.n_steps for e in done))
    return Dataset(done), report


def validate_dataset(dataset: Dataset) -> None:
    """Raise if any value is missing or outside its valid range."""
    lo_s = np.array([_VARS[n].lo for n in STATE_NAMES])
    hi_s = np.array([_VARS[n].hi for n in STATE_NAMES])
    lo_a = np.array([_VARS[n].lo for n in ACTION_NAMES])
    hi_a = np.array([_VARS[n].hi for n in ACTION_NAMES])
    for ep in dataset.episodes:
        ep.validate()
        for arr, lo, hi in ((ep.states, lo_s, hi_s), (ep.actions, lo_a, hi_a)):
            if np.isnan(arr).any():
                raise ValueError(f"{ep.key}: missing values")
            if (arr < lo).any() or (arr > hi).any():
                raise ValueError(f"{ep.key}: value outside valid range")


# --- splitting ---------------------------------------------------------------------------


def stratified_split(dataset: Dataset, test_frac: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Patient-disjoint split stratified by episode-length quartile x mortality.

    Quartile edges come from all episode lengths (no split exists yet).
    Each patient is stratified by their longest episode and by whether
    any of their episodes ended in death.
    """
    if len(dataset) < 10:
        raise ValueError("stratified split needs at least 10 episodes")
    lengths = np.array([e.n_steps for e in dataset.episodes])
    edges = np.quantile(lengths, [0.25, 0.5, 0.75])
    per_patient = defaultdict(list)
    for e in dataset.episodes:
        per_patient[e.patient_id].append(e)
    strata = defaultdict(list)
    for pid in sorted(per_patient):
        eps = per_patient[pid]
        quartile = int(np.searchsorted(edges, max(e.n_steps for e in eps), side="right"))
        strata[(quartile, any(e.died for e in eps))].append(pid)

    assignment = {}
    for key in sorted(strata):
        pids = strata[key]
        if len(pids) == 1:
            log.warning("stratum %s has a single patient; assigned to train", key)
            for e in per_patient[pids[0]]:
                assignment[e.key] = "train"
            continue
        rng = make_rng(seed, "split", key[0], int(key[1]))
        order = [pids[i] for i in rng.permutation(len(pids))]
        total = sum(len(per_patient[p]) for p in pids)
        target = round(test_frac * total)
        n_test = 0
        for pid in order:
            k = len(per_patient[pid])
            to_test = abs(n_test + k - target) < abs(n_test - target)
            n_test += k if to_test else 0
            for e in per_patient[pid]:
                assignment[e.key] = "test" if to_test else "train"
    split_ds = Dataset(dataset.episodes, dataset.stats, assignment, dataset.normalized)
    return split_ds.subset("train"), split_ds.subset("test")


def merge(train: Dataset, test: Dataset) -> Dataset:
    split = dict(train.split)
    split.update(test.split)
    return Dataset(train.episodes + test.episodes, train.stats or test.stats, split,
                   train.normalized)


# --- normalisation --------------------------------------------------------------------------


CONT_LO = np.array([_VARS[n].lo for n in CONT_ACTION_NAMES])
CONT_HI = np.array([_VARS[n].hi for n in CONT_ACTION_NAMES])


@dataclass
class Normalizer:
    """z-scores for states, fixed affine map of continuous settings onto [-1, 1]."""

    names: tuple
    mean: np.ndarray
    std: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, dataset: Dataset) -> "Normalizer":
        s = dataset.states()
        std = s.std(axis=0)
        small = std < 1e-6
        if small.any():
            log.warning("zero-variance state variables floored: %s",
                        [STATE_NAMES[i] for i in np.flatnonzero(small)])
        return cls(STATE_NAMES, s.mean(axis=0), np.maximum(std, 1e-6), s.min(axis=0), s.max(axis=0))

    def states(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse_states(self, z):
        return np.asarray(z) * self.std + self.mean

    @staticmethod
    def cont_actions(a):
        return 2.0 * (np.asarray(a) - CONT_LO) / (CONT_HI - CONT_LO) - 1.0

    @staticmethod
    def inverse_cont_actions(u):
        return (np.asarray(u) + 1.0) * 0.5 * (CONT_HI - CONT_LO) + CONT_LO

    def actions(self, a):
        a = np.array(a, dtype=np.float64, copy=True)
        a[..., 1:] = self.cont_actions(a[..., 1:])
        return a

    def inverse_actions(self, a):
        a = np.array(a, dtype=np.float64, copy=True)
        a[..., 1:] = self.inverse_cont_actions(a[..., 1:])
        return a

    def to_text(self) -> str:
        lines = ["name mean std min max"]
        for i, n in enumerate(self.names):
            lines.append(" ".join([n, fmt(self.mean[i]), fmt(self.std[i]), fmt(self.lo[i]), fmt(self.hi[i])]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Normalizer":
        rows = [ln.split() for ln in text.strip().splitlines()[1:]]
        cols = list(zip(*rows))
        arr = [np.array([float(v) for v in c]) for c in cols[1:]]
        return cls(tuple(cols[0]), *arr)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "Normalizer":
        return cls.from_text(Path(path).read_text())


def normalize(dataset: Dataset, stats: Normalizer | None = None) -> Dataset:
    """Return a copy with z-scored states and [-1, 1] continuous settings."""
    stats = stats or dataset.stats
    if stats is None:
        raise ValueError("normalisation needs training-split statistics")
    eps = [replace(e, states=stats.states(e.states), actions=stats.actions(e.actions),
                   rewards=dict(e.rewards)) for e in dataset.episodes]
    return Dataset(eps, stats, dict(dataset.split), normalized=True)


def denormalize(dataset: Dataset) -> Dataset:
    stats = dataset.stats
    eps = [replace(e, states=stats.inverse_states(e.states), actions=stats.inverse_actions(e.actions),
                   rewards=dict(e.rewards)) for e in dataset.episodes]
    return Dataset(eps, stats, dict(dataset.split), normalized=False)


# --- file format -------------------------------------------------------------------------------


HEADER = "# ventrl-dataset 1"


def dumps_dataset(dataset: Dataset) -> str:
    reward_keys = sorted({k for e in dataset.episodes for k in e.rewards if k != "reward"})
    cols = ["patient_id", "episode_id", "t", *STATE_NAMES, *ACTION_NAMES, *reward_keys]
    lines = [HEADER, ",".join(cols)]
    for e in dataset.episodes:
        for t in range(e.n_steps):
            row = [e.patient_id, str(e.episode_id), str(t)]
            row += [fmt(v) for v in e.states[t]]
            row += [fmt(v) for v in e.actions[t]]
            row += [fmt(e.rewards[k][t]) if k in e.rewards else "" for k in reward_keys]
            lines.append(",".join(row))
        summary = [e.patient_id, str(e.episode_id), f"outcome={e.outcome}",
                   f"dt_death={fmt_exact(e.dt_death)}", f"dt_re={fmt_exact(e.dt_re)}", f"start={fmt(e.start)}"]
        if e.key in dataset.split:
            summary.append(f"split={dataset.split[e.key]}")
        lines.append("#episode " + ",".join(summary))
    return "\n".join(lines) + "\n"


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(dumps_dataset(dataset))
    return path


def _opt(text):
    return float(text) if text else None


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0] != HEADER:
        raise ValueError("not a ventrl dataset file")
    cols = lines[1].split(",")
    n_s, n_a = len(STATE_NAMES), len(ACTION_NAMES)
    if cols[3:3 + n_s + n_a] != list(STATE_NAMES + ACTION_NAMES):
        raise ValueError("unexpected column order")
    reward_keys = cols[3 + n_s + n_a:]
    episodes, split, rows = [], {}, []
    for line in lines[2:]:
        if not line:
            continue
        if line.startswith("#episode "):
            fields = line[len("#episode "):].split(",")
            pid, eid = fields[0], int(fields[1])
            meta = dict(f.split("=", 1) for f in fields[2:])
            values = np.array([[float(v) if v else np.nan for v in r[3:]] for r in rows])
            states = values[:, :n_s]
            actions = values[:, n_s:n_s + n_a]
            rewards = {k: values[:, n_s + n_a + i] for i, k in enumerate(reward_keys)}
            if rewards:
                rewards["reward"] = sum(rewards[k] for k in reward_keys)
            ep = Episode(pid, eid, states, actions, meta["outcome"], _opt(meta.get("dt_death")),
                         _opt(meta.get("dt_re")), float(meta.get("start") or 0.0), rewards)
            if "split" in meta:
                split[ep.key] = meta["split"]
            episodes.append(ep)
            rows = []
        else:
            rows.append(line.split(","))
    if rows:
        raise ValueError("trailing steps without an episode summary line")
    return Dataset(episodes, split=split)


def read_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text())
