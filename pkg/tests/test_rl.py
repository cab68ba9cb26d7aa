import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _gradcheck import max_relative_error, numeric_grads
from dynafs.errors import ConfigError, TrainingError
from dynafs.nn import adam_init, adam_step
from dynafs.rl import (
    ActorNet, CriticNet, DiagnosticsWriter, PpoConfig, PpoOptimizer, RolloutBuffer, actor_loss_and_grads,
    critic_loss_and_grads, gae, gae_padded, joint_log_prob, ppo_update, sample_actions,
)


def test_fresh_actor_probability(rng):
    actor = ActorNet(5, hidden=16, rng=np.random.default_rng(0))
    X = rng.standard_normal((3, 7, 10)) * 2
    p, _ = actor.forward(X)
    assert np.all(np.abs(p - 0.8) < 0.01)
    assert np.array_equal(actor.forward(X)[0], p)


def test_actor_streaming_matches_full_pass(rng):
    actor = ActorNet(3, hidden=6, rng=np.random.default_rng(1))
    X = rng.standard_normal((2, 5, 6))
    full, _ = actor.forward(X)
    state = actor.begin(2)
    for t in range(5):
        p, state = actor.probs_step(X[:, t, :3], X[:, t, 3:], state)
        assert np.allclose(p, full[:, t], atol=1e-14)


def test_actor_rejects_nan_parameters():
    actor = ActorNet(2, hidden=3)
    actor.net.params["Wh"][0, 0] = np.nan
    with pytest.raises(TrainingError):
        actor.forward(np.zeros((1, 2, 4)))


def test_sampling_examples():
    rng = np.random.default_rng(0)
    a, lp = sample_actions(np.full((1, 4), 1 - 1e-15), rng)
    assert a.all() and abs(lp[0]) < 1e-10
    assert joint_log_prob(np.full(6, 0.5), np.zeros(6, bool)) == pytest.approx(6 * np.log(0.5))
    a, _ = sample_actions(np.full(100_000, 0.8), rng)
    assert abs(a.mean() - 0.8) < 0.01


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), st.integers(0, 63))
def test_joint_log_prob_additive(p, bits):
    a = np.array([(bits >> k) & 1 for k in range(len(p))], bool)
    parts = [joint_log_prob(np.array([pk]), np.array([ak])) for pk, ak in zip(p, a)]
    assert joint_log_prob(np.array(p), a) == pytest.approx(sum(parts))


def test_gae_examples():
    adv, ret = gae([1.0], [0.0], [True], 0.8, 0.95)
    assert adv.tolist() == [1.0] and ret.tolist() == [1.0]
    r, v = np.array([1.0, 0.0, 1.0]), np.array([0.5, 0.5, 0.5])
    adv, _ = gae(r, v, [False, False, True], 0.8, 0.0)
    delta = r + 0.8 * np.r_[v[1:], 0.0] - v
    assert np.allclose(adv, delta, atol=1e-15)
    # hand-unrolled recursion
    g, lam = 0.8, 0.95
    d2 = 1.0 - 0.5
    d1 = 0.0 + g * 0.5 - 0.5
    d0 = 1.0 + g * 0.5 - 0.5
    expected = [d0 + g * lam * (d1 + g * lam * d2), d1 + g * lam * d2, d2]
    adv, _ = gae(r, v, [False, False, True], g, lam)
    assert np.allclose(adv, expected, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.floats(0.01, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_gae_equals_explicit_sum(n, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal(n), rng.standard_normal(n)
    term = np.zeros(n, bool)
    term[-1] = True
    adv, ret = gae(r, v, term, gamma, lam)
    v_next = np.r_[v[1:], 0.0]
    delta = r + gamma * v_next - v
    explicit = [sum((gamma * lam) ** l * delta[t + l] for l in range(n - t)) for t in range(n)]
    assert np.allclose(adv, explicit, atol=1e-12, rtol=0)
    assert np.allclose(ret, adv + v, atol=1e-15)


def test_gae_padded_matches_flat(rng):
    lengths = [3, 5, 1]
    R, V = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    valid = np.arange(5)[None, :] < np.array(lengths)[:, None]
    adv, _ = gae_padded(R, V, valid, 0.8, 0.95)
    for i, n in enumerate(lengths):
        flat, _ = gae(R[i, :n], V[i, :n], np.arange(n) == n - 1, 0.8, 0.95)
        assert np.allclose(adv[i, :n], flat, atol=1e-14)
        assert np.all(adv[i, n:] == 0)


def test_actor_gradient_check(rng):
    actor = ActorNet(2, hidden=4, rng=np.random.default_rng(3))
    actor.net.params["Wo"] = rng.standard_normal(actor.net.params["Wo"].shape) * 0.5
    X = rng.standard_normal((2, 4, 4))
    probs, _ = actor.forward(X)
    actions = rng.random(probs.shape) < 0.5
    # old log-probs near current ones keep every ratio inside the trust region
    logp_old = joint_log_prob(probs, actions) + rng.uniform(-0.05, 0.05, (2, 4))
    adv = rng.standard_normal((2, 4))
    valid = np.ones((2, 4), bool)
    valid[1, 3] = False
    _, grads, _ = actor_loss_and_grads(actor, X, actions, logp_old, adv, valid, 0.2)
    num = numeric_grads(lambda: actor_loss_and_grads(actor, X, actions, logp_old, adv, valid, 0.2)[0],
                        actor.net.params)
    assert max_relative_error(grads, num) < 1e-4


def test_critic_gradient_check(rng):
    critic = CriticNet(3, hidden=4, rng=np.random.default_rng(4))
    X = rng.standard_normal((2, 5, 3))
    ret = rng.standard_normal((2, 5))
    valid = np.ones((2, 5), bool)
    valid[0, 4] = False
    _, grads = critic_loss_and_grads(critic, X, ret, valid)
    num = numeric_grads(lambda: critic_loss_and_grads(critic, X, ret, valid)[0], critic.net.params)
    assert max_relative_error(grads, num) < 1e-4


def _buffer(actor, critic, rng, B=8, T=3, F=2, adv=None):
    states = rng.standard_normal((B, T + 1, F))
    X = rng.standard_normal((B, T, F))
    probs, _ = actor.forward(ActorNet.inputs(states, np.zeros((B, T, F), bool)))
    actions = rng.random(probs.shape) < probs
    Xa = ActorNet.inputs(states, actions)
    probs, _ = actor.forward(Xa)
    buf = RolloutBuffer(Xa, CriticNet.inputs(states), actions, joint_log_prob(probs, actions),
                        np.zeros((B, T)), rng.standard_normal((B, T)), np.ones((B, T), bool))
    buf.compute_advantages(0.8, 0.95)
    if adv is not None:
        buf.advantages = adv
    return buf


def test_zero_advantage_leaves_actor_unchanged(rng):
    actor, critic = ActorNet(2, hidden=4), CriticNet(2, hidden=4)
    buf = _buffer(actor, critic, rng, adv=np.zeros((8, 3)))
    before = {k: v.copy() for k, v in actor.net.params.items()}
    ppo_update(buf, actor, critic, PpoConfig(epochs_per_batch=2))
    assert all(np.array_equal(before[k], actor.net.params[k]) for k in before)


def test_positive_advantage_increases_log_prob(rng):
    actor, critic = ActorNet(3, hidden=4), CriticNet(3, hidden=4)
    buf = _buffer(actor, critic, rng, B=1, T=1, F=3, adv=np.ones((1, 1)))
    ppo_update(buf, actor, critic, PpoConfig(epochs_per_batch=1, minibatches=1))
    probs, _ = actor.forward(buf.actor_in)
    assert joint_log_prob(probs, buf.actions)[0, 0] > buf.logp[0, 0]


def test_clip_boundary_gives_clipped_gradient(rng):
    actor = ActorNet(1, hidden=4)
    X = rng.standard_normal((1, 1, 2))
    probs, _ = actor.forward(X)
    a = np.ones((1, 1, 1), bool)
    logp = joint_log_prob(probs, a)
    eps = 0.2
    old = logp - np.log1p(eps)
    while np.exp(logp - old)[0, 0] < 1 + eps:
        old = np.nextafter(old, -np.inf)
    valid = np.ones((1, 1), bool)
    loss, grads, diag = actor_loss_and_grads(actor, X, a, old, np.ones((1, 1)), valid, eps)
    assert loss == pytest.approx(-(1 + eps))
    assert all(np.all(g == 0) for g in grads.values())
    # just inside the region the gradient is live
    _, grads, _ = actor_loss_and_grads(actor, X, a, logp - np.log1p(eps / 2), np.ones((1, 1)), valid, eps)
    assert any(np.any(g != 0) for g in grads.values())


def test_loss_uses_raw_advantages(rng):
    actor = ActorNet(2, hidden=4)
    X = rng.standard_normal((2, 3, 4))
    probs, _ = actor.forward(X)
    a = rng.random(probs.shape) < 0.5
    adv = rng.standard_normal((2, 3)) * 7 + 3
    valid = np.ones((2, 3), bool)
    loss, _, _ = actor_loss_and_grads(actor, X, a, joint_log_prob(probs, a), adv, valid, 0.2)
    assert loss == pytest.approx(-adv.mean())


def test_one_feature_bandit_learns_to_fetch():
    rng = np.random.default_rng(0)
    actor, critic = ActorNet(1, hidden=8, rng=np.random.default_rng(1)), CriticNet(1, hidden=8)
    cfg = PpoConfig(lr=3e-3, epochs_per_batch=4)
    opt = PpoOptimizer.create(actor, critic)
    B = 32
    states = np.full((B, 2, 1), -4.0)
    for _ in range(200):
        Xa = ActorNet.inputs(states, np.zeros((B, 1, 1), bool))
        probs, _ = actor.forward(Xa)
        a, logp = sample_actions(probs, rng)
        values, _ = critic.forward(CriticNet.inputs(states))
        buf = RolloutBuffer(Xa, CriticNet.inputs(states), a, logp, values, a[..., 0].astype(float),
                            np.ones((B, 1), bool))
        buf.compute_advantages(cfg.gamma, cfg.lam)
        ppo_update(buf, actor, critic, cfg, opt, rng)
    assert actor.forward(Xa)[0].min() > 0.95


def test_update_requires_advantages(rng):
    actor, critic = ActorNet(2, hidden=4), CriticNet(2, hidden=4)
    buf = _buffer(actor, critic, rng)
    buf.advantages = None
    with pytest.raises(TrainingError):
        ppo_update(buf, actor, critic, PpoConfig())


def test_adam_first_step():
    params = {"w": np.zeros(1)}
    adam_step(params, {"w": np.array([0.5])}, adam_init(params), 1e-3, 1e-5)
    assert params["w"][0] == pytest.approx(-9.99980e-4, rel=1e-6)
    same = {"w": np.zeros(1)}
    adam_step(same, {"w": np.array([0.5])}, adam_init(same), 1e-3, 1e-5)
    assert same["w"][0] == params["w"][0]
    still = {"w": np.ones(2)}
    adam_step(still, {"w": np.zeros(2)}, adam_init(still), 1e-3, 1e-5)
    assert still["w"].tolist() == [1.0, 1.0]


def test_ppo_config_validation():
    with pytest.raises(ConfigError):
        PpoConfig(gamma=0).validate()
    with pytest.raises(ConfigError):
        PpoConfig(min_steps=10, max_steps=5).validate()


def test_actor_round_trip(rng):
    actor = ActorNet(3, hidden=5, rng=np.random.default_rng(2))
    back = ActorNet.from_dict(json.loads(json.dumps(actor.to_dict())))
    X = rng.standard_normal((1, 4, 6))
    assert np.array_equal(actor.forward(X)[0], back.forward(X)[0])


def test_diagnostics_writer(tmp_path):
    w = DiagnosticsWriter(tmp_path / "h.jsonl")
    w.write({"b": np.float64(1.5), "a": 1})
    assert (tmp_path / "h.jsonl").read_text() == '{"a": 1, "b": 1.5}\n'
