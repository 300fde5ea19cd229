import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillseg.core import ConfigError, RangeError, Trajectory
from skillseg.predictor import (
    CountPredictor,
    MixtureOraclePredictor,
    step_loss,
    train_count_predictor,
)


def _ten_ones():
    return Trajectory.from_arrays("t", [0] * 10, [1] * 10, 1, 2)


def test_untrained_is_uniform():
    m = CountPredictor(3, 4, order=1)
    assert np.allclose(m.predict(2), 0.25)


def test_order0_smoothing():
    m = train_count_predictor([_ten_ones()], order=0, alpha=1.0)
    assert m.predict(0)[1] == pytest.approx(11 / 12, abs=1e-12)


def test_step_loss_from_counts():
    m = train_count_predictor([_ten_ones()], order=0, alpha=1.0)
    assert step_loss(m, 0, 1).loss == pytest.approx(-math.log(11 / 12), abs=1e-12)
    assert step_loss(m, 0, 1).loss == pytest.approx(0.0870, abs=1e-4)


def test_step_loss_e_minus_two():
    m = MixtureOraclePredictor([[[math.exp(-2), 1 - math.exp(-2)]]], 0.0)
    assert step_loss(m, 0, 0).loss == pytest.approx(2.0, abs=1e-12)


def test_step_loss_leaves_context_alone():
    m = CountPredictor(2, 2, order=2)
    m.observe(1, 0)
    step_loss(m, 0, 1)
    assert m.context_length == 1


def _brute_order1(corpus, obs_vocab, act_vocab, alpha, prev, obs):
    counts = np.zeros(act_vocab)
    for t in corpus:
        o, a = t.obs.tolist(), t.acts.tolist()
        for i in range(1, len(o)):
            if o[i - 1] == prev and o[i] == obs:
                counts[a[i]] += 1
    return (counts + alpha) / (counts.sum() + alpha * act_vocab)


def test_order1_matches_brute_force():
    rng = np.random.default_rng(3)
    corpus = [Trajectory.from_arrays("x", rng.integers(3, size=20), rng.integers(2, size=20), 3, 2)]
    m = train_count_predictor(corpus, order=1, alpha=1.0)
    for prev, obs in itertools.product(range(3), range(3)):
        m.reset()
        m.observe(prev, 0)
        assert np.allclose(m.predict(obs), _brute_order1(corpus, 3, 2, 1.0, prev, obs), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2)), min_size=1, max_size=40),
       st.integers(0, 3), st.integers(1, 5))
def test_count_predict_is_distribution_and_window_caps_context(data, order, window):
    obs, acts = zip(*data)
    m = train_count_predictor([Trajectory.from_arrays("h", obs, acts, 4, 3)], order=order, alpha=0.5)
    ctx = m.spawn(window=window)
    for o, a in data:
        p = ctx.predict(o)
        assert p.shape == (3,) and np.all(p > 0) and p.sum() == pytest.approx(1.0)
        ctx.observe(o, a)
        assert ctx.context_length <= window
    assert m.context_length == 0


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    corpus = [Trajectory.from_arrays(f"{i}", rng.integers(5, size=50), rng.integers(4, size=50), 5, 4) for i in range(3)]
    m = train_count_predictor(corpus, order=2, alpha=0.3)
    m.save(tmp_path / "m.json")
    back = CountPredictor.load(tmp_path / "m.json")
    for o in range(5):
        for prev in range(5):
            for ctx in (m, back):
                ctx.reset()
                ctx.observe(prev, 0)
            assert np.array_equal(m.predict(o), back.predict(o))
    back.save(tmp_path / "n.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "n.json").read_bytes()


def test_train_rejects_vocab_mismatch():
    a = Trajectory.from_arrays("a", [0], [0], 2, 2)
    b = Trajectory.from_arrays("b", [0], [0], 3, 2)
    with pytest.raises(ConfigError):
        train_count_predictor([a, b])
    with pytest.raises(ConfigError):
        train_count_predictor([])


def test_out_of_vocab_token():
    m = CountPredictor(2, 2)
    with pytest.raises(RangeError):
        m.check_tokens(5, 0)


# -- mixture oracle ----------------------------------------------------------

DET = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])  # two skills, one obs


def test_single_skill_returns_its_policy():
    pol = np.array([[[0.2, 0.8], [0.6, 0.4]]])
    m = MixtureOraclePredictor(pol, 0.3)
    m.observe(0, 1)
    assert np.allclose(m.predict(1), [0.6, 0.4])


def test_symmetric_mixture():
    m = MixtureOraclePredictor(DET, 0.0)
    assert np.allclose(m.predict(0), [0.5, 0.5])


def test_switch_probability_after_certain_posterior():
    m = MixtureOraclePredictor.from_K(DET, 100)
    m.posterior = np.array([1.0, 0.0])
    assert m.predict(0)[0] == pytest.approx(0.99, abs=1e-12)


def _brute_oracle(pol, s, history, query_obs):
    n = pol.shape[0]
    T = len(history) + 1
    pred = np.zeros(pol.shape[2])
    post = np.zeros(n)
    for path in itertools.product(range(n), repeat=T):
        w = 1.0 / n
        for i in range(1, T):
            w *= (1 - s) if path[i] == path[i - 1] else s / (n - 1)
        for (o, a), k in zip(history, path):
            w *= pol[k, o, a]
        pred += w * pol[path[-1], query_obs]
        post[path[-2]] += w
    return pred / pred.sum(), post / post.sum()


def test_oracle_matches_path_enumeration():
    rng = np.random.default_rng(11)
    pol = rng.dirichlet(np.ones(3), size=(2, 2))
    history = [(int(rng.integers(2)), int(rng.integers(3))) for _ in range(5)]
    m = MixtureOraclePredictor(pol, 0.15)
    for o, a in history:
        m.observe(o, a)
    pred, post = _brute_oracle(pol, 0.15, history, 1)
    assert np.allclose(m.predict(1), pred, atol=1e-9)
    assert np.allclose(m.posterior, post, atol=1e-9)


def test_oracle_window_refilters_last_steps():
    rng = np.random.default_rng(5)
    pol = rng.dirichlet(np.ones(3), size=(3, 2))
    history = [(int(rng.integers(2)), int(rng.integers(3))) for _ in range(9)]
    m = MixtureOraclePredictor(pol, 0.1, window=4)
    for o, a in history:
        m.observe(o, a)
    fresh = MixtureOraclePredictor(pol, 0.1)
    for o, a in history[-4:]:
        fresh.observe(o, a)
    assert np.allclose(m.predict(0), fresh.predict(0), atol=1e-12)


def test_oracle_rejects_impossible_action():
    m = MixtureOraclePredictor(DET[:1], 0.0)
    with pytest.raises(Exception):
        m.observe(0, 1)
