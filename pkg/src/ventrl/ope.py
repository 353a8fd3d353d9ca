"""Off-policy evaluation: fitted Q-evaluation (plain and quantile), a density
model for policy coverage, checkpoint selection, reward-effectiveness
correlations and the discrete-to-continuous reconstruction study."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .actions import METHODS, RestrictedActionSpace, discretize, reconstruct
from .data import CONT_HI, CONT_LO, Dataset, Normalizer
from .nn import (
    LOG_2PI,
    AdamState,
    Mlp,
    adam_step,
    log_softmax,
    polyak_update,
    quantile_huber_loss,
    quantile_huber_loss_grad,
    quantile_midpoints,
    softmax,
)
from .rewards import RangeSpec, range_reward
from .rng import make_rng
from .schema import CONT_ACTION_NAMES, N_CONT, N_MODES
from .transitions import Transitions

log = logging.getLogger(__name__)

BEHAVIOR_LABEL = "clinician (behavior)"


class FqeDiverged(RuntimeError):
    pass


def _input(obs, act_c, act_d):
    onehot = np.eye(N_MODES, dtype=obs.dtype)[np.asarray(act_d)]
    return np.concatenate([obs, np.asarray(act_c, dtype=obs.dtype), onehot], axis=-1)


def policy_actions(policy, obs: np.ndarray, chunk: int = 4096):
    """Deterministic actions for many states, evaluated in chunks."""
    cs, ds = [], []
    for i in range(0, len(obs), chunk):
        c, d = policy.act(obs[i:i + chunk], deterministic=True)
        cs.append(np.asarray(c, dtype=obs.dtype))
        ds.append(np.asarray(d))
    return np.concatenate(cs), np.concatenate(ds)


# --- fitted Q-evaluation ----------------------------------------------------------------------


@dataclass(frozen=True)
class FqeConfig:
    steps: int = 20_000
    batch_size: int = 256
    gamma: float = 0.99
    hidden: int = 256
    layers: int = 4
    lr: float = 1e-4
    polyak: float = 0.005
    n_quantiles: int = 32
    kappa: float = 1.0
    divergence_limit: float = 1e6


def fqe_preset(name: str) -> FqeConfig:
    if name == "paper":
        return FqeConfig()
    if name == "desk":
        return FqeConfig(hidden=64, layers=2, lr=3e-4)
    raise ValueError(f"unknown preset {name!r}")


@dataclass
class FqeModel:
    net: Mlp
    target: Mlp
    n_quantiles: int = 0         # 0: plain FQE with a scalar output
    losses: list = field(default_factory=list)

    @property
    def distributional(self) -> bool:
        return self.n_quantiles > 0

    def q(self, obs, act_c, act_d) -> np.ndarray:
        """Expected value; for the quantile model the mean of its quantiles."""
        return self.net.forward(_input(obs, act_c, act_d)).mean(axis=-1)

    def quantiles(self, obs, act_c, act_d) -> np.ndarray:
        """Quantile estimates sorted along the last axis (for reporting)."""
        if not self.distributional:
            raise ValueError("plain FQE has no quantiles")
        return np.sort(self.net.forward(_input(obs, act_c, act_d)), axis=-1)


def _next_actions(policy, data: Transitions):
    if policy is None:
        return data.next_act_c, data.next_act_d
    return policy_actions(policy, data.next_obs)


def fqe_fit(policy, data: Transitions, cfg: FqeConfig = FqeConfig(), seed: int = 0,
            distributional: bool = False) -> FqeModel:
    """Regress Q onto ``r + gamma (1 - done) Q_target(s', pi(s'))``.

    ``policy=None`` evaluates the behaviour policy: ``a'`` is the next
    dataset action. Raises :class:`FqeDiverged` if the loss blows up.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    nq = cfg.n_quantiles if distributional else 0
    rng = make_rng(seed, "fqe", "dist" if distributional else "plain")
    sizes = [data.obs.shape[1] + N_CONT + N_MODES] + [cfg.hidden] * cfg.layers + [max(nq, 1)]
    net = Mlp.init(sizes, rng, dtype=data.obs.dtype)
    target = net.copy()
    opt = AdamState.for_params(net.params(), cfg.lr)
    next_c, next_d = _next_actions(policy, data)
    x_all = _input(data.obs, data.act_c, data.act_d)
    xn_all = _input(data.next_obs, next_c, next_d)
    taus = quantile_midpoints(nq, data.obs.dtype) if nq else None
    model = FqeModel(net, target, nq)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), cfg.batch_size)
        nxt = target.forward(xn_all[idx])
        cont = (cfg.gamma * (1.0 - data.done[idx]))[:, None]
        y = data.reward[idx][:, None] + cont * nxt                  # (B, 1) or (B, N)
        pred, cache = net.forward_cache(x_all[idx])
        if nq:
            loss = quantile_huber_loss(pred, y, taus, cfg.kappa)
            grad = quantile_huber_loss_grad(pred, y, taus, cfg.kappa)
        else:
            diff = pred - y
            loss = float(np.mean(diff * diff))
            grad = 2.0 * diff / diff.size
        if not np.isfinite(loss) or loss > cfg.divergence_limit:
            raise FqeDiverged(f"FQE diverged at step {step}: loss {loss:.3g}")
        grads, _ = net.backward(cache, grad, need_input=False)
        adam_step(opt, net.params(), grads)
        polyak_update(target.params(), net.params(), cfg.polyak)
        if step % 100 == 0:
            model.losses.append(loss)
    return model


def dist_fqe_fit(policy, data: Transitions, cfg: FqeConfig = FqeConfig(), seed: int = 0) -> FqeModel:
    return fqe_fit(policy, data, cfg, seed, distributional=True)


def estimate_v_pi(model: FqeModel, data: Transitions, policy=None) -> float:
    """Mean of Q(s0, pi(s0)) over first steps of the episodes in ``data``.

    ``policy=None`` uses the logged first action (behaviour value).
    """
    first = data.initial
    if len(first) == 0:
        raise ValueError("no initial states to evaluate")
    obs = data.obs[first]
    if policy is None:
        return float(model.q(obs, data.act_c[first], data.act_d[first]).mean())
    c, d = policy_actions(policy, obs)
    return float(model.q(obs, c, d).mean())


def bellman_residual(model: FqeModel, data: Transitions, policy, gamma: float) -> float:
    """Mean squared one-step Bellman error of the expected-value estimate."""
    next_c, next_d = _next_actions(policy, data)
    q = model.q(data.obs, data.act_c, data.act_d)
    y = data.reward + gamma * (1.0 - data.done) * model.q(data.next_obs, next_c, next_d)
    return float(np.mean((q - y) ** 2))


# --- coverage model -----------------------------------------------------------------------------

STATE_HEAD = "state"
MODE_HEAD = "mode"


@dataclass(frozen=True)
class CoverageConfig:
    steps: int = 5_000
    batch_size: int = 256
    hidden: int = 256
    layers: int = 2
    latent: int | None = None  # optional narrower layer before the heads
    lr: float = 1e-3
    log_var_min: float = -6.0
    log_var_max: float = 2.0


def coverage_preset(name: str) -> CoverageConfig:
    if name == "paper":
        return CoverageConfig()
    if name == "desk":
        return CoverageConfig(hidden=64)
    raise ValueError(f"unknown preset {name!r}")


def _split_heads(out, n_state):
    i = 0
    parts = []
    for w in (n_state, n_state, N_CONT, N_CONT, N_MODES):
        parts.append(out[:, i:i + w])
        i += w
    return parts


def _gauss_terms(x, mean, log_var, lo, hi):
    """Log-density per element with std = exp(clamped log_var) + 1e-6, plus backward helpers."""
    c = np.clip(log_var, lo, hi)
    ec = np.exp(c)
    std = ec + 1e-6
    z = (x - mean) / std
    lp = -0.5 * z * z - np.log(std) - 0.5 * LOG_2PI
    d_mean = z / std
    d_lv = (z * z - 1.0) / std * ec * ((log_var >= lo) & (log_var <= hi))
    return lp, d_mean, d_lv


@dataclass
class CoverageModel:
    """Density of (s, a^c, a^d): shared trunk, Gaussian heads for the
    state and the continuous settings, categorical head for the mode."""

    net: Mlp
    cfg: CoverageConfig
    nll: list = field(default_factory=list)

    @classmethod
    def init(cls, obs_dim: int, cfg: CoverageConfig, rng, dtype=np.float32) -> "CoverageModel":
        trunk = [cfg.hidden] * cfg.layers + ([cfg.latent] if cfg.latent else [])
        sizes = [obs_dim + N_CONT + N_MODES] + trunk + [2 * obs_dim + 2 * N_CONT + N_MODES]
        return cls(Mlp.init(sizes, rng, dtype=dtype), cfg)

    @property
    def obs_dim(self) -> int:
        return self.net.sizes[0] - N_CONT - N_MODES

    def log_likelihood(self, obs, act_c, act_d) -> dict:
        """Per-row log-likelihood terms.

        ``state`` and the settings terms are per-element Gaussian log-densities
        averaged over their dimensions, ``mode`` is the categorical log-mass;
        ``total`` is state + settings + mode, matching the training objective.
        Each setting is also reported on its own.
        """
        out = self.net.forward(_input(obs, act_c, act_d))
        sm, slv, cm, clv, logits = _split_heads(out, self.obs_dim)
        lo, hi = self.cfg.log_var_min, self.cfg.log_var_max
        lp_s, _, _ = _gauss_terms(obs, sm, slv, lo, hi)
        lp_c, _, _ = _gauss_terms(np.asarray(act_c, dtype=obs.dtype), cm, clv, lo, hi)
        lp_d = log_softmax(logits)[np.arange(len(obs)), np.asarray(act_d)]
        res = {STATE_HEAD: lp_s.mean(axis=1), "settings": lp_c.mean(axis=1), MODE_HEAD: lp_d}
        for j, name in enumerate(CONT_ACTION_NAMES):
            res[name] = lp_c[:, j]
        res["total"] = res[STATE_HEAD] + res["settings"] + res[MODE_HEAD]
        return res

    def score(self, obs, act_c, act_d) -> dict:
        """Mean of every log-likelihood term over the rows."""
        return {k: float(v.mean()) for k, v in self.log_likelihood(obs, act_c, act_d).items()}


def coverage_loss(net: Mlp, obs, act_c, act_d, cfg: CoverageConfig):
    """Negative log-likelihood (state + settings + mode, each averaged) and gradients."""
    out, cache = net.forward_cache(_input(obs, act_c, act_d))
    n_state = obs.shape[1]
    sm, slv, cm, clv, logits = _split_heads(out, n_state)
    lo, hi = cfg.log_var_min, cfg.log_var_max
    lp_s, dsm, dslv = _gauss_terms(obs, sm, slv, lo, hi)
    lp_c, dcm, dclv = _gauss_terms(act_c, cm, clv, lo, hi)
    b = len(obs)
    ls = log_softmax(logits)
    rows = np.arange(b)
    loss = -lp_s.mean() - lp_c.mean() - ls[rows, act_d].mean()
    ws, wc = -1.0 / lp_s.size, -1.0 / lp_c.size
    g_logits = (softmax(logits) - np.eye(N_MODES, dtype=obs.dtype)[act_d]) / b
    grad = np.concatenate([ws * dsm, ws * dslv, wc * dcm, wc * dclv, g_logits], axis=1)
    grads, _ = net.backward(cache, grad.astype(out.dtype), need_input=False)
    return float(loss), grads


def coverage_fit(data: Transitions, cfg: CoverageConfig = CoverageConfig(), seed: int = 0) -> CoverageModel:
    """Fit the density model on dataset (s, a) pairs by minimising the NLL."""
    rng = make_rng(seed, "coverage")
    model = CoverageModel.init(data.obs.shape[1], cfg, rng, dtype=data.obs.dtype)
    opt = AdamState.for_params(model.net.params(), cfg.lr)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), cfg.batch_size)
        loss, grads = coverage_loss(model.net, data.obs[idx], data.act_c[idx], data.act_d[idx], cfg)
        if not np.isfinite(loss):
            raise FloatingPointError(f"coverage NLL not finite at step {step}")
        adam_step(opt, model.net.params(), grads)
        model.nll.append(loss)
    return model


def coverage_score(model: CoverageModel, obs: np.ndarray, policy) -> dict:
    """d^pi = mean log p(s, pi(s)) over the given states, with its per-head parts."""
    c, d = policy_actions(policy, obs)
    return model.score(obs, c, d)


# --- reconstruction study ------------------------------------------------------------------------

STUDY_METHODS = ("none",) + METHODS


def reconstruction_study(policy, obs: np.ndarray, space: RestrictedActionSpace, model: CoverageModel,
                         methods=STUDY_METHODS, seed: int = 0, mask_inactive: bool = False) -> list:
    """Score the policy's own continuous actions against binned-then-reconstructed ones.

    Returns rows ``{method, d_pi, rank, same_bins}`` sorted by d^pi,
    best first.
    """
    cont, mode = policy_actions(policy, obs)
    raw = np.column_stack([mode, np.clip(Normalizer.inverse_cont_actions(cont), CONT_LO, CONT_HI)])
    bins = discretize(raw, space.spec, mask_inactive)
    rows = []
    for method in methods:
        if method == "none":
            c, same = cont, True
        else:
            rec = reconstruct(bins, method, space, make_rng(seed, "reconstruct", method))
            same = bool((discretize(rec, space.spec, mask_inactive) == bins).all())
            c = Normalizer.cont_actions(rec[:, 1:]).astype(obs.dtype)
        rows.append({"method": method, "d_pi": model.score(obs, c, mode)["total"], "same_bins": same})
    rows.sort(key=lambda r: -r["d_pi"])
    for i, r in enumerate(rows, 1):
        r["rank"] = i
    return rows


# --- policy selection -----------------------------------------------------------------------------


@dataclass
class CheckpointScore:
    label: str
    step: int
    v_pi: float
    d_pi: float


def select_policy(scores: list, top_frac: float = 0.1) -> CheckpointScore:
    """Keep the top ``ceil(top_frac * n)`` checkpoints by d^pi (all tied values
    at the cut are kept), then return the highest V^pi; earliest step wins ties.

    With fewer than 10 checkpoints only the best d^pi is kept.
    """
    if not scores:
        raise ValueError("no checkpoints to select from")
    n = len(scores)
    if n < 10:
        log.warning("only %d checkpoints; selecting among the best coverage only", n)
        k = 1
    else:
        k = math.ceil(top_frac * n)
    cut = sorted((s.d_pi for s in scores), reverse=True)[k - 1]
    kept = [s for s in scores if s.d_pi >= cut]
    return min(kept, key=lambda s: (-s.v_pi, s.step, s.label))


# --- reward effectiveness -------------------------------------------------------------------------


def spearman(x, y) -> tuple[float, bool]:
    """Rank correlation with average ranks for ties. Returns ``(rho, defined)``;
    a constant input gives ``(0.0, False)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("inputs differ in length")
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0, False
    rx = rankdata(x) - (len(x) + 1) / 2
    ry = rankdata(y) - (len(y) + 1) / 2
    return float((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry))), True


def episode_means(values: np.ndarray, episode: np.ndarray) -> np.ndarray:
    ids, inv = np.unique(episode, return_inverse=True)
    return np.bincount(inv, weights=values) / np.bincount(inv)


def _range_component(episode, ranges):
    if "r_range" in episode.rewards:
        return np.asarray(episode.rewards["r_range"])
    return range_reward(episode.states, ranges)


def reward_effectiveness(model: FqeModel, data: Transitions, dataset: Dataset, policy=None,
                         ranges: RangeSpec = RangeSpec()) -> dict:
    """Spearman rho of episode-mean Q against episode-mean safe-range reward and
    against episode length.

    Q is evaluated at (s, pi(s)), or at the logged actions when ``policy`` is
    None. The safe-range reward is the episode's ``r_range`` component when
    annotated, otherwise the state-based score.
    """
    if policy is None:
        q = model.q(data.obs, data.act_c, data.act_d)
    else:
        c, d = policy_actions(policy, data.obs)
        q = model.q(data.obs, c, d)
    eps = np.unique(data.episode)
    mean_q = episode_means(q, data.episode)
    mean_range = np.array([_range_component(dataset.episodes[i], ranges).mean() for i in eps])
    length = np.array([dataset.episodes[i].n_steps for i in eps])
    rho_r, ok_r = spearman(mean_q, mean_range)
    rho_l, ok_l = spearman(mean_q, length)
    if not (ok_r and ok_l):
        log.warning("Spearman undefined (constant input); reported as 0")
    return {"rho_range": rho_r, "rho_length": rho_l, "defined": ok_r and ok_l}


# --- report ------------------------------------------------------------------------------------


@dataclass
class EvalReport:
    seed: int
    rows: list = field(default_factory=list)            # one dict per checkpoint
    behavior: dict = field(default_factory=dict)         # {"v_pi": ...}
    selected: dict | None = None
    correlations: list = field(default_factory=list)
    reconstruction: list = field(default_factory=list)

    COLUMNS = ("seed", "label", "algo", "step", "v_pi", "d_pi", "status")

    def to_csv(self) -> str:
        buf = io.StringIO()
        extra = sorted({k for r in self.rows for k in r} - set(self.COLUMNS))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.COLUMNS) + extra)
        for r in self.rows + ([{"label": BEHAVIOR_LABEL, "algo": "behavior", "step": "",
                                 **self.behavior}] if self.behavior else []):
            w.writerow([_fmt(r.get(k, self.seed if k == "seed" else "")) for k in list(self.COLUMNS) + extra])
        return buf.getvalue()

    def reconstruction_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "label", "rank", "method", "d_pi", "same_bins"])
        for r in self.reconstruction:
            w.writerow([self.seed, r.get("label", ""), r["rank"], r["method"], _fmt(r["d_pi"]), r["same_bins"]])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"evaluation report (seed {self.seed})", ""]
        lines.append(f"{'policy':<28} {'step':>8} {'V_pi':>10} {'d_pi':>10}  status")
        for r in self.rows:
            lines.append(f"{r['label']:<28} {r['step']:>8} {_fmt(r.get('v_pi')):>10} "
                         f"{_fmt(r.get('d_pi')):>10}  {r.get('status', 'ok')}")
        if self.behavior:
            lines.append(f"{BEHAVIOR_LABEL:<28} {'':>8} {_fmt(self.behavior.get('v_pi')):>10} "
                         f"{_fmt(self.behavior.get('d_pi')):>10}")
        if self.selected:
            lines += ["", f"selected: {self.selected['label']} step {self.selected['step']}"]
        if self.correlations:
            lines += ["", "reward effectiveness (Spearman)"]
            for c in self.correlations:
                lines.append(f"  {c['label']}: rho_range={_fmt(c['rho_range'])} rho_length={_fmt(c['rho_length'])}")
        if self.reconstruction:
            lines += ["", "reconstruction study"]
            for r in self.reconstruction:
                lines.append(f"  {r['rank']}. {r['method']:<18} d_pi={_fmt(r['d_pi'])}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return "" if v is None else str(v)
