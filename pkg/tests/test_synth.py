import math

import numpy as np
import pytest

from skillseg.core import ConfigError, validate_trajectory
from skillseg.synth import (
    GeneratorConfig,
    SkillLibrary,
    build_skill_library,
    derive_rng,
    deviance_violations,
    generate,
    generate_corpus,
    segment_ages,
)


def test_determinism():
    cfg = GeneratorConfig(horizon=100, seed=42)
    assert generate(cfg, 3) == generate(cfg, 3)
    assert generate(cfg, 3) != generate(cfg, 4)


def test_library_bytes_deterministic(tmp_path):
    cfg = GeneratorConfig(seed=9)
    build_skill_library(cfg).save(tmp_path / "a.json")
    build_skill_library(cfg).save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = SkillLibrary.load(tmp_path / "a.json")
    assert np.array_equal(back.policies, build_skill_library(cfg).policies)


def test_no_switching():
    cfg = GeneratorConfig(K=math.inf, horizon=500)
    assert all(len(lt.true_boundaries) == 0 for lt in generate_corpus(cfg, 5))


@pytest.mark.parametrize("proc", ["iid", "markov", "echo"])
def test_trajectories_are_valid(proc):
    mat = np.full((8, 8), 1 / 8) if proc == "markov" else None
    cfg = GeneratorConfig(horizon=300, obs_process=proc, obs_matrix=mat, event_prob=0.5)
    lib = build_skill_library(cfg)
    for lt in generate_corpus(cfg, 3, library=lib):
        t = lt.trajectory
        assert validate_trajectory(t).ok
        pol = lib.policies
        assert all(pol[s, o, a] > 0 for s, o, a in zip(t.skills, t.obs, t.acts))
        flagged = [i for i, st in enumerate(t.steps) if st.events]
        assert set(flagged) <= set(lt.true_boundaries.indices)


def test_switch_counts_binomial():
    K, T, n = 50, 10_000, 100
    cfg = GeneratorConfig(K=K, horizon=T, seed=5)
    counts = np.array([len(lt.true_boundaries) for lt in generate_corpus(cfg, n)])
    p, trials = 1 / K, T - 1  # step 0 cannot switch
    mu, sd = trials * p, math.sqrt(trials * p * (1 - p))
    # per trajectory the 3-sigma band holds with probability ~0.997
    assert np.mean(np.abs(counts - mu) <= 3 * sd) >= 0.97
    # pooled over T * trials >= 1e6 steps the frequency concentrates at 1/K
    total = n * trials
    assert abs(counts.sum() / total - p) <= 3 * math.sqrt(p * (1 - p) / total)


def test_library_single_skill():
    lib = build_skill_library(GeneratorConfig(n_skills=1))
    assert len(lib) == 1 and np.allclose(lib.policies.sum(-1), 1.0)


def test_two_skills_two_actions_rejected():
    with pytest.raises(ConfigError):
        GeneratorConfig(n_skills=2, act_vocab=2, c=0.9, m=0.1)


def test_three_actions_satisfy_deviance_exhaustively():
    cfg = GeneratorConfig(n_skills=2, act_vocab=3, obs_vocab=4, c=0.9, m=0.1)
    lib = build_skill_library(cfg)
    assert deviance_violations(lib, cfg.m, cfg.c) == []
    pol, dom = lib.policies, lib.dominant
    assert np.allclose(pol.sum(-1), 1.0, atol=1e-9)
    for o in range(cfg.obs_vocab):
        assert dom[0, o] != dom[1, o]


def test_default_library_deviance():
    cfg = GeneratorConfig()
    assert deviance_violations(build_skill_library(cfg), cfg.m, cfg.c) == []


def test_realized_deviance_at_boundaries():
    cfg = GeneratorConfig(K=100, horizon=2000, seed=2, forced_deviance=True)
    lib = build_skill_library(cfg)
    pol = lib.policies
    ok = total = 0
    for lt in generate_corpus(cfg, 20, library=lib):
        t = lt.trajectory
        s, o, a = np.array(t.skills), t.obs, t.acts
        start = 0
        for b in lt.true_boundaries.indices:
            old = s[b - 1]
            logs = np.log(pol[old, o[start:b], a[start:b]])
            ratio = pol[old, o[b], a[b]] / math.exp(logs.mean())
            ok += ratio < cfg.m / 2
            total += 1
            start = b
    assert total > 300 and ok / total >= 1 - cfg.delta


def test_segment_ages():
    cfg = GeneratorConfig(horizon=400, seed=1)
    lt = generate(cfg)
    ages = segment_ages(lt.trajectory)
    assert ages[0] == 0
    for b in lt.true_boundaries.indices:
        assert ages[b] == 0 and ages[b - 1] >= 0


def test_config_roundtrip_and_validation():
    cfg = GeneratorConfig(K=20, seed=3)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        GeneratorConfig(K=0.5)
    with pytest.raises(ConfigError):
        GeneratorConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        GeneratorConfig(K=5, c=0.5, m=0.4, act_vocab=8).check_separation()


def test_derived_streams_independent():
    a = derive_rng(1, "x").random(4)
    assert np.array_equal(a, derive_rng(1, "x").random(4))
    assert not np.array_equal(a, derive_rng(1, "y").random(4))
    assert not np.array_equal(a, derive_rng(2, "x").random(4))
