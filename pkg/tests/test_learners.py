from dataclasses import replace

import numpy as np
import pytest
from helpers import central_diff, max_rel_err
from hypothesis import given, settings, strategies as st

from ventrl.actions import BinDim, BinSpec, RestrictedActionSpace
from ventrl.checkpoint import Checkpoint
from ventrl.learners import (
    EXP_ADV_MAX,
    FactoredPolicy,
    HybridActor,
    TrainConfig,
    TrainingDiverged,
    act,
    factored_cql_loss,
    factored_cql_update,
    hybrid_input,
    load_policy,
    preset,
    train,
)
from ventrl.learners.edac import (
    HybridEdac,
    actor_sample,
    diversity_loss,
    edac_actor_loss,
    edac_alpha_loss,
    edac_critic_loss,
    hybrid_edac_update,
)
from ventrl.learners.iql import HybridIql, iql_actor_loss, iql_critic_loss, iql_value_loss
from ventrl.nn import AdamState, Mlp, expectile_loss
from ventrl.pipeline import Splits
from ventrl.synth import GeneratorConfig, generate
from ventrl.transitions import Batch

OBS = 4
HIDDEN = [8, 8]
F64 = np.float64


def _raw_actions(rng, n):
    return np.column_stack([
        rng.integers(0, 2, n), rng.uniform(5, 60, n), rng.uniform(3, 12, n),
        rng.uniform(0, 26, n), rng.uniform(0, 20, n), rng.uniform(21, 100, n)])


def toy_batch(rng, n=6, space=None):
    combo = rng.integers(0, space.size, n) if space is not None else np.full(n, -1)
    return Batch(
        obs=rng.normal(size=(n, OBS)), act_c=rng.uniform(-0.9, 0.9, (n, 5)), act_d=rng.integers(0, 2, n),
        combo=combo, reward=rng.normal(size=n), next_obs=rng.normal(size=(n, OBS)),
        next_act_c=rng.uniform(-0.9, 0.9, (n, 5)), next_act_d=rng.integers(0, 2, n),
        next_combo=combo, done=(rng.random(n) < 0.3).astype(F64))


@pytest.fixture(scope="module")
def toy_space():
    return RestrictedActionSpace.build(_raw_actions(np.random.default_rng(0), 40))


@pytest.fixture(scope="module")
def small():
    return Splits.build(generate(GeneratorConfig(n_patients=40, seed=1)), seed=0)


def tiny(algo, **kw):
    return replace(preset("desk", algo), steps=40, hidden=16, layers=2, checkpoint_interval=20,
                   log_interval=10, batch_size=32, **kw)


# --- gradient checks (float64, two hidden layers of 8 units) ---


def test_cql_gradient_matches_fd(toy_space):
    rng = np.random.default_rng(1)
    critics = Mlp.init([OBS] + HIDDEN + [37], rng, ensemble=2, dtype=F64)
    targets = Mlp.init([OBS] + HIDDEN + [37], rng, ensemble=2, dtype=F64)
    batch = toy_batch(rng, space=toy_space)
    _, grads = factored_cql_loss(critics, targets, batch, toy_space, 10.0, 0.99)
    num = central_diff(lambda: factored_cql_loss(critics, targets, batch, toy_space, 10.0, 0.99)[0]["loss"],
                       critics.params(), h=1e-6)
    assert max_rel_err(grads, num) < 1e-3


def test_iql_value_gradient_matches_fd():
    rng = np.random.default_rng(2)
    value = Mlp.init([OBS] + HIDDEN + [1], rng, dtype=F64)
    targets = Mlp.init([OBS + 7] + HIDDEN + [1], rng, ensemble=2, dtype=F64)
    batch = toy_batch(rng)
    _, grads, _ = iql_value_loss(value, targets, batch, 0.8)
    num = central_diff(lambda: iql_value_loss(value, targets, batch, 0.8)[0], value.params(), h=1e-6)
    assert max_rel_err(grads, num) < 1e-3


def test_iql_critic_gradient_matches_fd():
    rng = np.random.default_rng(3)
    critics = Mlp.init([OBS + 7] + HIDDEN + [1], rng, ensemble=2, dtype=F64)
    batch = toy_batch(rng)
    next_v = rng.normal(size=len(batch))
    _, grads = iql_critic_loss(critics, next_v, batch, 0.99)
    num = central_diff(lambda: iql_critic_loss(critics, next_v, batch, 0.99)[0], critics.params(), h=1e-6)
    assert max_rel_err(grads, num) < 1e-3


def test_iql_actor_gradient_matches_fd():
    rng = np.random.default_rng(4)
    actor = HybridActor.init(OBS, HIDDEN, rng, state_dependent=False, dtype=F64)
    actor.log_std[:] = rng.normal(scale=0.3, size=5)
    batch = toy_batch(rng)
    adv = rng.normal(scale=0.02, size=len(batch))
    _, grads, _ = iql_actor_loss(actor, batch, adv, 100.0)
    num = central_diff(lambda: iql_actor_loss(actor, batch, adv, 100.0)[0], actor.params(), h=1e-6)
    assert max_rel_err(grads, num) < 1e-3


def _edac_parts(seed):
    rng = np.random.default_rng(seed)
    actor = HybridActor.init(OBS, HIDDEN, rng, state_dependent=True, dtype=F64)
    critics = Mlp.init([OBS + 7] + HIDDEN + [1], rng, ensemble=3, dtype=F64)
    targets = Mlp.init([OBS + 7] + HIDDEN + [1], rng, ensemble=3, dtype=F64)
    batch = toy_batch(rng)
    eps = rng.normal(size=(len(batch), 5))
    u = rng.random(len(batch))
    return rng, actor, critics, targets, batch, eps, u


def test_edac_actor_gradient_matches_fd():
    _, actor, critics, _, batch, eps, u = _edac_parts(5)
    alphas = (0.7, 0.4)
    _, grads, _ = edac_actor_loss(actor, critics, batch.obs, alphas, eps, u)
    num = central_diff(lambda: edac_actor_loss(actor, critics, batch.obs, alphas, eps, u)[0],
                       actor.params(), h=1e-6)
    assert max_rel_err(grads, num) < 1e-3


def test_edac_critic_gradient_matches_fd():
    _, actor, critics, targets, batch, eps, u = _edac_parts(6)
    args = (critics, targets, actor, (0.7, 0.4), batch, eps, u, 0.99, 0.1)
    _, grads = edac_critic_loss(*args)
    num = central_diff(lambda: edac_critic_loss(*args)[0]["critic_loss"], critics.params(), h=1e-6)
    assert max_rel_err(grads, num) < 1e-3


def test_edac_diversity_gradient_matches_fd():
    # second-order path: the loss is built from dQ/da^c
    _, _, critics, _, batch, _, _ = _edac_parts(7)
    x = hybrid_input(batch.obs, batch.act_c, batch.act_d)
    cont = slice(OBS, OBS + 5)
    _, grads = diversity_loss(critics, x, cont)
    num = central_diff(lambda: diversity_loss(critics, x, cont)[0], critics.params(), h=1e-6)
    assert max_rel_err(grads, num) < 1e-3


def test_edac_alpha_gradient_matches_fd():
    _, actor, _, _, batch, eps, u = _edac_parts(8)
    s = actor_sample(actor, batch.obs, eps, u)
    log_alpha = np.array([0.2, -0.5])

    def total():
        c, d, _ = edac_alpha_loss(log_alpha, s, -0.3, 0.3)
        return c + d

    _, _, grad = edac_alpha_loss(log_alpha, s, -0.3, 0.3)
    assert max_rel_err([grad], central_diff(total, [log_alpha], h=1e-6)) < 1e-3


# --- factored CQL ---


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conservative_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    space = RestrictedActionSpace.build(_raw_actions(rng, int(rng.integers(1, 30))))
    scale = float(rng.uniform(0.1, 50))
    critics = Mlp.init([OBS, 8, 37], rng, ensemble=2, dtype=np.float32)
    critics.weights[-1] *= scale
    batch = toy_batch(rng, n=16, space=space).astype(np.float32)
    losses, _ = factored_cql_loss(critics, critics.copy(), batch, space, 10.0, 0.99)
    assert losses["conservative_1"] >= 0 and losses["conservative_2"] >= 0


def test_cql_rejects_action_outside_space(toy_space):
    rng = np.random.default_rng(0)
    critics = Mlp.init([OBS, 8, 37], rng, ensemble=2, dtype=F64)
    batch = toy_batch(rng, space=toy_space)
    batch.combo[2] = -1
    with pytest.raises(ValueError, match="restricted"):
        factored_cql_loss(critics, critics.copy(), batch, toy_space, 10.0, 0.99)


def test_cql_without_penalty_reaches_value_iteration_fixed_point():
    # two states, two actions, deterministic transitions, never terminal
    spec = BinSpec((BinDim("x", (0, 1, 2)),))
    space = RestrictedActionSpace.build(np.array([[0.5], [1.5]]), spec)
    reward = np.array([[1.0, 0.0], [0.0, 2.0]])
    nxt = np.array([[1, 0], [0, 1]])
    gamma = 0.5
    q = np.zeros((2, 2))
    for _ in range(200):
        q = reward + gamma * q[nxt].max(axis=-1)
    s, a = np.meshgrid([0, 1], [0, 1], indexing="ij")
    s, a = s.ravel(), a.ravel()
    eye = np.eye(2)
    batch = Batch(obs=eye[s], act_c=np.zeros((4, 5)), act_d=np.zeros(4, int), combo=a,
                  reward=reward[s, a], next_obs=eye[nxt[s, a]], next_act_c=np.zeros((4, 5)),
                  next_act_d=np.zeros(4, int), next_combo=a, done=np.zeros(4))
    rng = np.random.default_rng(0)
    critics = Mlp.init([2, 2], rng, ensemble=2, dtype=F64)     # linear on one-hot state: tabular
    targets = critics.copy()
    cfg = TrainConfig(cql_alpha=0.0, gamma=gamma, cql_clip=100.0, polyak=0.05)
    opt = AdamState.for_params(critics.params(), 1e-2)
    for _ in range(4000):
        factored_cql_update(critics, targets, opt, batch, space, cfg)
    learned = critics.forward(eye)
    np.testing.assert_allclose(learned[0], q, atol=1e-2)
    np.testing.assert_allclose(learned[1], q, atol=1e-2)


def test_greedy_policy_stays_in_restricted_space(toy_space):
    rng = np.random.default_rng(3)
    critics = Mlp.init([OBS, 16, 37], rng, ensemble=2)
    policy = FactoredPolicy(critics, toy_space)
    bins = policy.bins(rng.normal(size=(200, OBS)).astype(np.float32))
    assert toy_space.contains(bins).all()


# --- hybrid IQL ---


def test_half_expectile_is_half_mse():
    d = np.random.default_rng(0).normal(size=50)
    assert expectile_loss(d, 0.5) == pytest.approx(0.5 * np.mean(d * d))


def test_zero_beta_is_behaviour_cloning():
    rng = np.random.default_rng(5)
    actor = HybridActor.init(OBS, HIDDEN, rng, state_dependent=False, dtype=F64)
    batch = toy_batch(rng)
    adv = rng.normal(size=len(batch))
    loss, _, w = iql_actor_loss(actor, batch, adv, 0.0)
    plain, _, _ = iql_actor_loss(actor, batch, np.zeros(len(batch)), 1.0)
    assert (w == 1).all() and loss == pytest.approx(plain)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 1000))
def test_advantage_weight_capped(adv, beta):
    rng = np.random.default_rng(0)
    actor = HybridActor.init(OBS, [8], rng, state_dependent=False)
    batch = toy_batch(rng).astype(np.float32)
    _, _, w = iql_actor_loss(actor, batch, np.full(len(batch), adv, np.float32), beta)
    assert np.all(w <= EXP_ADV_MAX) and np.all(np.isfinite(w))


class RecordingMlp(Mlp):
    seen: list

    def forward(self, x):
        self.seen.append(x.copy())
        return super().forward(x)

    def forward_cache(self, x):
        self.seen.append(x.copy())
        return super().forward_cache(x)


def test_iql_queries_critics_only_at_dataset_actions(small):
    cfg = tiny("hybrid-iql")
    learner = HybridIql.init(small.train_tr.obs.shape[1], cfg, np.random.default_rng(0))
    seen = []
    for name in ("critics", "targets"):
        net = getattr(learner, name)
        spy = RecordingMlp(net.weights, net.biases)
        spy.seen = seen
        setattr(learner, name, spy)
    rng = np.random.default_rng(1)
    for _ in range(5):
        batch = small.train_tr.sample(rng, 32)
        n0 = len(seen)
        learner.update(batch, rng)
        expected = hybrid_input(batch.obs, batch.act_c, batch.act_d)
        assert len(seen) > n0
        for x in seen[n0:]:
            np.testing.assert_array_equal(x, expected)


def test_iql_nonfinite_advantage_skips_batch(small):
    cfg = tiny("hybrid-iql")
    learner = HybridIql.init(small.train_tr.obs.shape[1], cfg, np.random.default_rng(0))
    learner.targets.weights[-1][:] = np.nan
    before = [p.copy() for p in learner.actor.params()]
    losses = learner.update(small.train_tr.sample(np.random.default_rng(0), 32), None)
    assert losses == {"skipped": 1} and learner.skipped == 1
    for a, b in zip(before, learner.actor.params()):
        np.testing.assert_array_equal(a, b)


def test_iql_update_orders_agree_on_first_step(small):
    # the actor step uses the pre-update advantage either way, so a single step matches
    batch = small.train_tr.sample(np.random.default_rng(0), 32)
    out = []
    for last in (True, False):
        cfg = tiny("hybrid-iql", iql_actor_last=last)
        learner = HybridIql.init(small.train_tr.obs.shape[1], cfg, np.random.default_rng(0))
        learner.update(batch, None)
        out.append(learner.actor.params())
    for a, b in zip(*out):
        np.testing.assert_array_equal(a, b)


# --- hybrid EDAC ---


def test_identical_critics_have_maximal_diversity_loss():
    rng = np.random.default_rng(0)
    one = Mlp.init([OBS + 7, 16, 16, 1], rng, dtype=F64)
    twin = Mlp([np.stack([w, w]) for w in one.weights], [np.stack([b, b]) for b in one.biases])
    batch = toy_batch(rng, n=32)
    x = hybrid_input(batch.obs, batch.act_c, batch.act_d)
    loss, _ = diversity_loss(twin, x, slice(OBS, OBS + 5))
    assert loss == pytest.approx(1.0)


def test_diversity_step_decreases_loss():
    # exactly identical members sit at a stationary maximum, so start from a
    # slightly perturbed pair
    rng = np.random.default_rng(1)
    one = Mlp.init([OBS + 7, 16, 16, 1], rng, dtype=F64)
    pair = Mlp([np.stack([w, w + rng.normal(scale=1e-2, size=w.shape)]) for w in one.weights],
               [np.stack([b, b]) for b in one.biases])
    batch = toy_batch(rng, n=32)
    x = hybrid_input(batch.obs, batch.act_c, batch.act_d)
    cont = slice(OBS, OBS + 5)
    before, grads = diversity_loss(pair, x, cont)
    assert before > 0.95
    for p, g in zip(pair.params(), grads):
        p -= 0.1 * 0.1 * g          # eta * lr * gradient
    after, _ = diversity_loss(pair, x, cont)
    assert after < before


def test_zero_temperature_actor_loss_is_negative_q():
    _, actor, critics, _, batch, _, _ = _edac_parts(9)
    loss, _, s = edac_actor_loss(actor, critics, batch.obs, (0.0, 0.0), None, None)
    q = critics.forward(hybrid_input(batch.obs, s.action, s.mode)).min(axis=0)[:, 0]
    # continuous and discrete parts each reduce to -E[Q_min]; the total is their sum
    assert loss == pytest.approx(-2 * q.mean())


def test_discrete_probabilities():
    _, actor, _, _, batch, eps, u = _edac_parts(10)
    actor.net.weights[-1] *= 50
    s = actor_sample(actor, batch.obs, eps, u)
    np.testing.assert_allclose(s.prob_d.sum(-1), 1.0)
    assert (s.log_prob_d <= 1e-8).all()


def test_edac_divergence_aborts(small):
    cfg = tiny("hybrid-edac")
    learner = HybridEdac.init(small.train_tr.obs.shape[1], cfg, np.random.default_rng(0))
    batch = small.train_tr.sample(np.random.default_rng(0), 32)
    batch.reward[:] = 1e5
    with pytest.raises(TrainingDiverged, match="exceeds"):
        hybrid_edac_update(learner.actor, learner.critics, learner.targets, learner.log_alpha,
                           learner.opts, batch, cfg, np.random.default_rng(0))


def test_edac_q_stays_bounded(small):
    cfg = replace(tiny("hybrid-edac"), steps=300)
    rows = []
    train("hybrid-edac", small.train_tr, cfg, 0, log_rows=rows)
    r = small.train_tr.reward
    bound = max(abs(r.min()), abs(r.max())) / (1 - cfg.gamma)
    # entropy bonus per step is at most alpha * (5 * (3 + log 1e6) + log 2); alphas stay near 1
    c = 2.0 * (5 * (3 + np.log(1e6)) + np.log(2)) / (1 - cfg.gamma)
    assert all(abs(row["q_mean"]) < 10 * (bound + c) for row in rows)


# --- policies and act() ---


@pytest.mark.parametrize("state_dependent", [False, True])
def test_act_contract(state_dependent):
    rng = np.random.default_rng(0)
    actor = HybridActor.init(25, [16], rng, state_dependent=state_dependent)
    obs = rng.normal(size=(300, 25)).astype(np.float32)
    a1, a2 = act(actor, obs), act(actor, obs)
    np.testing.assert_array_equal(a1.settings, a2.settings)
    np.testing.assert_array_equal(a1.mode, a2.mode)
    cont, mode = actor.act(obs, deterministic=False, rng=np.random.default_rng(1))
    assert np.all(np.abs(cont) <= 1) and set(np.unique(mode)) <= {0, 1}
    for a in (a1, act(actor, obs, deterministic=False, rng=np.random.default_rng(2))):
        assert np.all((a.settings[:, 1] >= 3) & (a.settings[:, 1] <= 12))


def test_edac_stochastic_action_strictly_inside():
    rng = np.random.default_rng(0)
    actor = HybridActor.init(25, [16], rng, state_dependent=True)
    cont, _ = actor.act(rng.normal(size=(500, 25)).astype(np.float32), deterministic=False, rng=rng)
    assert np.all(np.abs(cont) < 1)


# --- training loop ---


@pytest.mark.parametrize("algo", ["factored-cql", "hybrid-iql", "hybrid-edac"])
def test_training_is_deterministic(small, algo):
    cfg = tiny(algo)
    a = train(algo, small.train_tr, cfg, 3, small.space)
    b = train(algo, small.train_tr, cfg, 3, small.space)
    assert [c.step for c in a] == [20, 40]
    assert a[-1].to_bytes() == b[-1].to_bytes()
    c = train(algo, small.train_tr, cfg, 4, small.space)
    assert a[-1].to_bytes() != c[-1].to_bytes()


def test_checkpoints_and_log_written(small, tmp_path):
    cfg = tiny("factored-cql")
    ckpts = train("factored-cql", small.train_tr, cfg, 0, small.space, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == ["ckpt_0000020.bin", "ckpt_0000040.bin"]
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["step", "conservative_1"] and len(lines) == 5
    loaded = Checkpoint.load(tmp_path / "ckpt_0000040.bin")
    assert loaded.meta["algo"] == "factored-cql" and loaded.step == 40
    policy = load_policy(loaded, small.space)
    obs = small.test_tr.obs[:50]
    np.testing.assert_array_equal(policy.combo_index(obs), load_policy(ckpts[-1], small.space).combo_index(obs))


@pytest.mark.parametrize("algo", ["hybrid-iql", "hybrid-edac"])
def test_actor_checkpoint_roundtrip(small, algo):
    ck = train(algo, small.train_tr, tiny(algo), 0)[-1]
    policy = load_policy(Checkpoint.from_bytes(ck.to_bytes()))
    cont, mode = policy.act(small.test_tr.obs[:20])
    assert cont.shape == (20, 5) and mode.shape == (20,)


def test_cql_short_run_finite_and_conservative(small):
    rows = []
    train("factored-cql", small.train_tr, replace(tiny("factored-cql"), steps=300), 0, small.space, log_rows=rows)
    assert all(np.isfinite(v) for r in rows for v in r.values())
    assert all(r["conservative_1"] >= 0 and r["conservative_2"] >= 0 for r in rows)


# --- configuration ---


def test_full_scale_presets():
    cql = preset("paper", "factored-cql")
    assert (cql.cql_alpha, cql.gamma, cql.cql_lr, cql.steps, cql.cql_clip, cql.polyak) == (
        10.0, 0.99, 1e-5, 400_000, 0.01, 0.005)
    iql = preset("paper", "hybrid-iql")
    assert (iql.iql_beta, iql.iql_tau, iql.iql_lr) == (100.0, 0.8, 3e-4)
    edac = preset("paper", "hybrid-edac")
    assert (edac.edac_eta, edac.edac_lr, edac.edac_entropy_cont, edac.edac_entropy_disc) == (0.1, 3e-5, -0.3, 0.3)
    assert cql.batch_size == 256 and edac.edac_ensemble == 10


def test_config_text_roundtrip():
    cfg = replace(preset("desk", "hybrid-iql"), iql_actor_last=False)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert TrainConfig.from_text("steps = 5\niql_tau = 0.7  # comment").iql_tau == 0.7


@pytest.mark.parametrize("bad", ["gamma = 0", "iql_tau = 1", "cql_lr = 0", "algo = dqn", "nope = 1",
                                 "edac_ensemble = 1"])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig.from_text(bad)
