import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillseg.core import ConfigError, DetectorConfig, Reason, Trajectory
from skillseg.detection import (
    IndicatorTrack,
    detect_boundaries,
    loss_excesses,
    mark_event_indicators,
    segment_corpus,
)
from skillseg.predictor import train_count_predictor
from skillseg.synth import GeneratorConfig, build_skill_library, generate_corpus

from conftest import ScriptedModel, scripted_trajectory

PICK_IRON = ("use_item:iron_pickaxe", "mine_block:iron_ore")
PICK_DIAMOND = ("use_item:iron_pickaxe", "mine_block:diamond_ore")
TORCH = ("use_item:torch",)


def _events_traj(events):
    n = len(events)
    return Trajectory.from_arrays("e", [0] * n, [0] * n, 1, 1, events=events)


def test_worked_event_example():
    t = _events_traj([PICK_IRON, PICK_IRON, PICK_DIAMOND, TORCH, TORCH])
    assert mark_event_indicators(t).indices == [1, 2, 4]


def test_no_events_no_flags():
    assert mark_event_indicators(_events_traj([()] * 6)).indices == []


def test_kill_offset_clamped_to_end():
    ev = [()] * 10
    ev[4] = ("kill_entity:zombie",)
    assert mark_event_indicators(_events_traj(ev)).indices == [9]


def test_kill_offset_inside_trajectory():
    ev = [()] * 40
    ev[3] = ("kill_entity:zombie",)
    assert mark_event_indicators(_events_traj(ev), kill_offset=16).indices == [19]


def _run(losses, gap, **kw):
    model = ScriptedModel(losses)
    traj = scripted_trajectory(losses)
    return detect_boundaries(traj, model, DetectorConfig(gap=gap, **kw))


def test_hand_trace():
    b, losses = _run([1.0, 1.0, 1.0, 30.0], 18.0, use_events=False)
    assert b.indices == [3]
    assert b.boundaries[0].reason is Reason.LOSS
    assert [round(s.loss, 9) for s in losses] == [1.0, 1.0, 1.0, 30.0]


def test_constant_losses_never_fire():
    b, _ = _run([2.5] * 50, 0.0)
    assert b.indices == []


def test_indicators_pass_through_when_loss_is_off():
    losses = [1.0] * 8
    ind = IndicatorTrack.from_indices(8, [2, 3, 5])
    b, _ = detect_boundaries(scripted_trajectory(losses), ScriptedModel(losses),
                             DetectorConfig(gap=math.inf, use_loss=False), ind)
    assert b.indices == [2, 3, 5]
    assert all(x.reason is Reason.EVENT for x in b.boundaries)


def test_flag_at_step_zero_ignored():
    losses = [1.0] * 4
    b, _ = detect_boundaries(scripted_trajectory(losses), ScriptedModel(losses),
                             DetectorConfig(gap=1.0), IndicatorTrack.from_indices(4, [0]))
    assert b.indices == []


def test_indicator_length_mismatch():
    with pytest.raises(ConfigError):
        detect_boundaries(scripted_trajectory([1.0] * 3), ScriptedModel([1.0] * 3),
                          DetectorConfig(gap=1.0), IndicatorTrack.empty(4))


def test_reset_then_boundary_step_is_first_context():
    losses = [1.0, 1.0, 1.0, 30.0, 1.0, 1.0]
    model = ScriptedModel(losses)
    detect_boundaries(scripted_trajectory(losses), model, DetectorConfig(gap=18.0))
    calls = [c for c in model.log if c[0] == "predict"]
    contexts = {c[1]: c[2] for c in calls}
    assert contexts[3] == (0, 1, 2)
    assert contexts[4] == (3,)
    assert contexts[5] == (3, 4)


def test_window_caps_context():
    losses = [1.0] * 10
    model = ScriptedModel(losses)
    detect_boundaries(scripted_trajectory(losses), model, DetectorConfig(gap=100.0, window=3))
    assert max(len(c[2]) for c in model.log if c[0] == "predict") == 3


def test_caller_model_untouched():
    losses = [1.0, 5.0, 1.0]
    model = ScriptedModel(losses)
    model.observe(0, 0)
    detect_boundaries(scripted_trajectory(losses), model, DetectorConfig(gap=0.5))
    assert model.ctx == [0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20).map(float), min_size=1, max_size=60))
def test_reference_trace(losses):
    gap = 3 + 1 / 61  # never ties with a mean of at most 60 integers
    b, _ = _run(losses, gap, use_events=False)
    expected, hist = [], []
    for i, x in enumerate(losses):
        hist.append(x)
        if i > 0 and x - sum(hist) / len(hist) > gap:
            expected.append(i)
            hist = []
    assert b.indices == expected


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=60), st.sets(st.integers(1, 59), max_size=6))
def test_first_combined_boundary_is_min_of_modes(losses, flags):
    n = len(losses)
    ind = IndicatorTrack.from_indices(n, [f for f in flags if f < n])
    traj = scripted_trajectory(losses)

    def first(**kw):
        b, _ = detect_boundaries(traj, ScriptedModel(losses), DetectorConfig(gap=2.0, **kw), ind)
        return b.indices[0] if len(b) else None

    candidates = [x for x in (first(use_events=False), first(use_loss=False)) if x is not None]
    assert first() == (min(candidates) if candidates else None)


def test_excesses_match_infinite_gap_trace():
    losses = [1.0, 3.0, 0.5, 2.0]
    exc = loss_excesses(scripted_trajectory(losses), ScriptedModel(losses))
    means = np.cumsum(losses) / np.arange(1, 5)
    assert np.allclose(exc, np.array(losses) - means)


@pytest.fixture(scope="module")
def small_corpus():
    cfg = GeneratorConfig(K=50, horizon=400, seed=3, obs_process="echo", greedy=True,
                          forced_deviance=True, cross_prob=0.0005, event_prob=0.5)
    lib = build_skill_library(cfg)
    train = [lt.trajectory for lt in generate_corpus(cfg, 20, 0, lib)]
    test = [lt.trajectory for lt in generate_corpus(cfg, 6, 100, lib)]
    return train_count_predictor(train, order=1), test


def test_gap_monotone(small_corpus):
    model, test = small_corpus
    for t in test:
        counts = [len(detect_boundaries(t, model, DetectorConfig(gap=g, use_events=False))[0])
                  for g in np.linspace(0, 8, 10)]
        assert counts == sorted(counts, reverse=True)


def test_corpus_results_order_and_determinism(small_corpus):
    model, test = small_corpus
    cfg = DetectorConfig(gap=1.0)
    a = segment_corpus(test, model, cfg)
    b = segment_corpus(test, model, cfg, workers=2)
    assert [r.boundaries for r in a] == [r.boundaries for r in b]
    assert [r.boundaries.trajectory_id for r in a] == [t.id for t in test]
    rev = segment_corpus(test[::-1], model, cfg)
    assert [r.boundaries for r in rev[::-1]] == [r.boundaries for r in a]


def test_single_planted_switch_found():
    cfg = GeneratorConfig(K=math.inf, horizon=100, seed=1, obs_process="echo", greedy=True,
                          forced_deviance=True, cross_prob=0.0005)
    lib = build_skill_library(cfg)
    train = [lt.trajectory for lt in generate_corpus(cfg, 10, 0, lib)]
    model = train_count_predictor(train, order=1)
    a = generate_corpus(cfg, 1, 50, lib)[0].trajectory
    skills = [(s + 1) % cfg.n_skills if i >= 50 else s for i, s in enumerate(a.skills)]
    # replay the echo process with the new skill from step 50 on
    dom = lib.dominant
    obs, acts = [int(a.obs[0])], []
    for i in range(100):
        if i:
            obs.append(acts[-1] % cfg.obs_vocab)
        acts.append(int(dom[skills[i], obs[i]]))
    traj = Trajectory.from_arrays("planted", obs, acts, cfg.obs_vocab, cfg.act_vocab, skills=skills)
    b, _ = detect_boundaries(traj, model, DetectorConfig(gap=1.0, use_events=False))
    assert any(abs(i - 50) <= 2 for i in b.indices)
