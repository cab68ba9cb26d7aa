import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynafs import FILL_VALUE
from dynafs.data import EpisodeData, FeatureSpec
from dynafs.env import (
    DETERMINISTIC, SAMPLE, AcquisitionEnv, ConstantPolicy, choose, column_targets, export_synthesized,
    rollout_batch, states_from_actions, synthesize_states, transition,
)
from dynafs.errors import DataError


def _ep(x, sid="s"):
    x = np.asarray(x, float)
    return EpisodeData(x, np.zeros(x.shape[1]), sid)


def test_reset_gives_fill_column():
    env = AcquisitionEnv()
    ep = _ep(np.arange(6).reshape(3, 2))
    first = env.reset(ep)
    assert first.shape == (3,) and np.all(first == FILL_VALUE)
    assert np.array_equal(env.reset(ep), first)


def test_step_examples():
    env = AcquisitionEnv()
    env.reset(_ep([[2.0, 5.0], [3.0, 6.0]]))
    s, done = env.step([1, 0])
    assert s.tolist() == [2.0, -4.0] and not done
    s, done = env.step([0, 0])
    assert s.tolist() == [2.0, -4.0] and done
    with pytest.raises(DataError):
        env.step([1, 1])


def test_step_before_reset_and_bad_shape():
    env = AcquisitionEnv()
    with pytest.raises(DataError):
        env.step([1])
    env.reset(_ep([[1.0, 2.0]]))
    with pytest.raises(DataError):
        env.step([1, 0])


def test_transition_all_ones_and_zeros():
    s, x = np.array([1.0, 2.0]), np.array([7.0, 8.0])
    assert transition(s, x, [1, 1]).tolist() == [7.0, 8.0]
    assert transition(s, x, [0, 0]).tolist() == [1.0, 2.0]


def test_column_targets_alignment():
    y = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(column_targets(y), [1.0, 2.0, 3.0, np.nan], equal_nan=True)
    assert np.array_equal(column_targets(y, True), [np.nan, 1.0, 2.0, 3.0], equal_nan=True)


def test_synthesize_always_and_never(rng):
    eps = [_ep(rng.standard_normal((3, n)), f"s{n}") for n in (4, 7)]
    always = synthesize_states(eps, ConstantPolicy(3, 1.0))
    for e, s in zip(eps, always):
        assert s.states.shape == (3, e.n_ticks + 1) and s.actions.shape == (3, e.n_ticks)
        assert np.all(s.states[:, 0] == FILL_VALUE)
        assert np.array_equal(s.states[:, 1:], e.x)
    never = synthesize_states(eps, ConstantPolicy(3, 0.0))
    assert all(np.all(s.states == FILL_VALUE) for s in never)


def test_sample_mode_is_seeded(rng):
    eps = [_ep(rng.standard_normal((4, 9)), f"s{i}") for i in range(5)]
    a = synthesize_states(eps, ConstantPolicy(4, 0.4), SAMPLE, seed=11)
    b = synthesize_states(eps, ConstantPolicy(4, 0.4), SAMPLE, seed=11)
    assert all(np.array_equal(p.states, q.states) for p, q in zip(a, b))


def test_choose_deterministic_threshold():
    assert choose(np.array([0.49, 0.5, 0.9]), DETERMINISTIC, None).tolist() == [False, True, True]
    with pytest.raises(DataError):
        choose(np.array([0.5]), "greedy", None)


def test_transition_disjunction_on_random_rollouts():
    rng = np.random.default_rng(0)
    eps = [_ep(rng.standard_normal((5, int(rng.integers(2, 15)))), f"s{i}") for i in range(1000)]
    pol = ConstantPolicy(5, rng.random(5))
    ro = rollout_batch(eps, pol, SAMPLE, np.random.default_rng(1))
    for i, e in enumerate(eps):
        s, a = ro.episode(i)
        prev, new = s[:, :-1], s[:, 1:]
        keep = new == prev
        fetch = new == e.x
        assert np.all(keep | fetch)
        assert np.all(np.where(a, fetch, keep))
        assert np.array_equal(s, states_from_actions(e.x, a))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_states_from_actions_matches_stepping(nf, nt, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((nf, nt))
    a = rng.random((nf, nt)) < 0.5
    env = AcquisitionEnv()
    cols = [env.reset(_ep(x))]
    for t in range(nt):
        cols.append(env.step(a[:, t])[0])
    assert np.array_equal(np.stack(cols, axis=1), states_from_actions(x, a))


def test_information_hiding(rng):
    x = rng.standard_normal((3, 8))
    a = rng.random((3, 8)) < 0.5
    y = x.copy()
    y[:, 5:] += 100.0
    # columns up to 5 depend on x[:, :5] only
    assert np.array_equal(states_from_actions(x, a)[:, :6], states_from_actions(y, a)[:, :6])


def test_padded_ticks_inert(rng):
    eps = [_ep(rng.standard_normal((2, 3)), "a"), _ep(rng.standard_normal((2, 6)), "b")]
    ro = rollout_batch(eps, ConstantPolicy(2, 1.0), DETERMINISTIC)
    assert not ro.actions[0, 3:].any()
    assert ro.valid.sum() == 9


def test_policy_feature_mismatch(rng):
    with pytest.raises(DataError):
        rollout_batch([_ep(rng.standard_normal((2, 3)))], ConstantPolicy(3, 1.0))


def test_export_synthesized(tmp_path, rng):
    syn = synthesize_states([_ep(rng.standard_normal((2, 3)), "a")], ConstantPolicy(2, 1.0))
    export_synthesized(syn, [FeatureSpec("u"), FeatureSpec("v")], tmp_path / "e.csv", tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert len(rows) == 2 * 4 and rows[0]["value"] == repr(FILL_VALUE)
    mask = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(mask) == 2 * 3 and all(r["action"] == "1" for r in mask)
