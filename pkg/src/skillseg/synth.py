"""Synthetic switching-skill trajectories with known boundaries.

A library of skills maps each observation to a peaked action distribution.
An agent executes one skill at a time and, before each step, switches to a
uniformly chosen *other* skill with probability ``1/K``.  Observations are
exogenous (``iid`` or ``markov``) or echo the previous action (``echo``),
which mimics how an agent's own actions show up in what it sees next.  None
of the processes lets an observation depend on the skill except through past
actions, so the mixture oracle stays exact.

Randomness: every component draws from
``SeedSequence([seed, blake2b64(component), *extra])`` (see :func:`derive_rng`).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BoundarySet, ConfigError, EventSet, Trajectory
from .predictor import MixtureOraclePredictor

OBS_PROCESSES = ("iid", "markov", "echo")
SWITCH_EVENT = "synthetic:switch"


def component_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def derive_rng(seed: int, component: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``component`` (and e.g. a trajectory index)."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), component_key(component), *map(int, extra)])
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the switching process and the skill library.

    ``dominant_prob`` defaults to ``c`` and ``cross_prob`` (mass each skill
    puts on another skill's dominant action) to ``m * c / 20``.  ``K`` may be
    ``inf`` to disable switching.
    """

    K: float = 100.0
    c: float = 0.9
    delta: float = 0.01
    m: float = 0.1
    obs_vocab: int = 8
    act_vocab: int = 8
    n_skills: int = 4
    horizon: int = 2000
    seed: int = 0
    obs_process: str = "iid"
    obs_matrix: tuple[tuple[float, ...], ...] | None = None
    echo_noise: float = 0.0
    enforce_deviance: bool = True
    dominant_prob: float | None = None
    cross_prob: float | None = None
    greedy: bool = False
    forced_deviance: bool = False
    event_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.obs_matrix is not None:
            object.__setattr__(self, "obs_matrix", tuple(tuple(map(float, r)) for r in self.obs_matrix))
        self.validate()

    @property
    def switch_prob(self) -> float:
        return 0.0 if math.isinf(self.K) else 1.0 / self.K

    @property
    def dominant(self) -> float:
        return self.c if self.dominant_prob is None else self.dominant_prob

    @property
    def cross(self) -> float:
        if self.enforce_deviance and self.act_vocab == self.n_skills and self.n_skills > 1:
            return (1.0 - self.dominant) / (self.n_skills - 1)
        return self.m * self.c / 20.0 if self.cross_prob is None else self.cross_prob

    def validate(self) -> None:
        if not self.K > 1:
            raise ConfigError(f"K must exceed 1 (switch probability 1/K < 1), got K={self.K}")
        if not 0 < self.c < 1:
            raise ConfigError(f"c must lie in (0, 1), got {self.c}")
        if not 0 <= self.delta < 1:
            raise ConfigError(f"delta must lie in [0, 1), got {self.delta}")
        if not 0 < self.m < 1:
            raise ConfigError(f"m must lie in (0, 1), got {self.m}")
        if self.obs_vocab < 1 or self.act_vocab < 1:
            raise ConfigError("obs_vocab and act_vocab must be positive")
        if self.n_skills < 1:
            raise ConfigError(f"n_skills must be positive, got {self.n_skills}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.obs_process not in OBS_PROCESSES:
            raise ConfigError(f"obs_process must be one of {OBS_PROCESSES}, got {self.obs_process!r}")
        if self.obs_process == "markov":
            mat = np.asarray(self.obs_matrix, dtype=float) if self.obs_matrix is not None else None
            if mat is None or mat.shape != (self.obs_vocab, self.obs_vocab):
                raise ConfigError("markov obs_process needs an obs_vocab x obs_vocab obs_matrix")
            if (mat < 0).any() or not np.allclose(mat.sum(1), 1.0, atol=1e-9):
                raise ConfigError("obs_matrix must be row-stochastic")
        if not 0 <= self.echo_noise <= 1:
            raise ConfigError(f"echo_noise must lie in [0, 1], got {self.echo_noise}")
        if not self.c <= self.dominant <= 1:
            raise ConfigError(f"dominant_prob must lie in [c, 1], got {self.dominant}")
        if not 0 <= self.event_prob <= 1:
            raise ConfigError(f"event_prob must lie in [0, 1], got {self.event_prob}")
        if self.enforce_deviance and self.n_skills > 1:
            if self.act_vocab < self.n_skills:
                raise ConfigError(
                    f"act_vocab ({self.act_vocab}) < n_skills ({self.n_skills}): "
                    "dominant actions cannot be distinct per observation"
                )
            limit = self.m * self.c / 2
            if self.cross < 0 or self.cross > limit:
                raise ConfigError(
                    f"cross-skill probability {self.cross:.6g} exceeds m*c/2 = {limit:.6g}; "
                    "increase act_vocab or lower cross_prob"
                )
            if self.dominant + (self.n_skills - 1) * self.cross > 1 + 1e-12:
                raise ConfigError("dominant_prob + (n_skills-1)*cross_prob exceeds 1")

    def check_separation(self) -> None:
        """Raise unless ``c > m`` and ``(K-4) c^2 > 2``."""
        if not (self.c > self.m and (self.K - 4) * self.c**2 > 2):
            raise ConfigError(
                f"separation fails: need c > m and (K-4)c^2 > 2 (c={self.c}, m={self.m}, K={self.K})"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["obs_matrix"] is not None:
            d["obs_matrix"] = [list(r) for r in d["obs_matrix"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SkillSpec:
    id: int
    policy: np.ndarray  # (obs_vocab, act_vocab)
    dominant: np.ndarray  # (obs_vocab,)


@dataclass(frozen=True)
class SkillLibrary:
    skills: tuple[SkillSpec, ...]

    def __len__(self) -> int:
        return len(self.skills)

    @property
    def policies(self) -> np.ndarray:
        return np.stack([s.policy for s in self.skills])

    @property
    def dominant(self) -> np.ndarray:
        return np.stack([s.dominant for s in self.skills])

    def oracle(self, K: float, window: int | None = None) -> MixtureOraclePredictor:
        switch = 0.0 if math.isinf(K) else 1.0 / K
        return MixtureOraclePredictor(self.policies, switch, window)

    def to_dict(self) -> dict:
        return {
            "n_skills": len(self.skills),
            "policies": [s.policy.tolist() for s in self.skills],
            "dominant": [s.dominant.tolist() for s in self.skills],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkillLibrary":
        return cls(
            tuple(
                SkillSpec(i, np.asarray(p, dtype=float), np.asarray(dm, dtype=np.int64))
                for i, (p, dm) in enumerate(zip(d["policies"], d["dominant"]))
            )
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "SkillLibrary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_skill_library(cfg: GeneratorConfig) -> SkillLibrary:
    """Construct ``n_skills`` policies.

    With ``enforce_deviance`` the dominant actions of different skills are
    distinct under every observation, each skill gives ``cross`` to the other
    skills' dominant actions and spreads what remains over the rest.
    """
    rng = derive_rng(cfg.seed, "library")
    n, O, A = cfg.n_skills, cfg.obs_vocab, cfg.act_vocab
    dom_p = cfg.dominant
    policy = np.zeros((n, O, A))
    dominant = np.zeros((n, O), dtype=np.int64)
    for o in range(O):
        if cfg.enforce_deviance and n > 1:
            perm = rng.permutation(A)
            doms = perm[:n]
            free = perm[n:]
            cross = cfg.cross
            rest = 1.0 - dom_p - (n - 1) * cross
            for j in range(n):
                row = np.zeros(A)
                row[doms] = cross
                row[doms[j]] = dom_p
                if len(free):
                    row[free] = rest / len(free)
                policy[j, o] = row
                dominant[j, o] = doms[j]
        else:
            for j in range(n):
                d = int(rng.integers(A))
                row = np.full(A, (1.0 - dom_p) / (A - 1)) if A > 1 else np.zeros(A)
                row[d] = dom_p if A > 1 else 1.0
                policy[j, o] = row
                dominant[j, o] = d
    return SkillLibrary(tuple(SkillSpec(j, policy[j], dominant[j]) for j in range(n)))


def deviance_violations(lib: SkillLibrary, m: float, c: float) -> list[tuple[int, int, int, float]]:
    """All ``(obs, old_skill, new_skill, prob)`` with ``pi_old(dom_new | obs) > m*c/2``.

    Also reports rows whose dominant probability falls below ``c`` as
    ``(obs, skill, skill, prob)``.
    """
    pol, dom = lib.policies, lib.dominant
    n, O, _ = pol.shape
    bad = []
    for o in range(O):
        for j in range(n):
            if pol[j, o, dom[j, o]] < c:
                bad.append((o, j, j, float(pol[j, o, dom[j, o]])))
            for i in range(n):
                if i != j:
                    p = float(pol[j, o, dom[i, o]])
                    if p > m * c / 2:
                        bad.append((o, j, i, p))
    return bad


@dataclass(frozen=True)
class LabeledTrajectory:
    trajectory: Trajectory
    true_boundaries: BoundarySet

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "LabeledTrajectory":
        return cls(traj, true_boundaries(traj))


def true_boundaries(traj: Trajectory) -> BoundarySet:
    skills = traj.skills
    if any(s is None for s in skills):
        raise ConfigError(f"trajectory {traj.id!r} lacks skill labels")
    idx = [i for i in range(1, len(skills)) if skills[i] != skills[i - 1]]
    return BoundarySet.from_indices(traj.id, idx)


def _sample(cum_rows: np.ndarray, u: float) -> int:
    a = int(np.searchsorted(cum_rows, u, side="right"))
    return min(a, cum_rows.shape[-1] - 1)


def generate(
    cfg: GeneratorConfig, index: int = 0, library: SkillLibrary | None = None
) -> LabeledTrajectory:
    """Draw trajectory number ``index`` of the stream defined by ``cfg.seed``."""
    lib = library if library is not None else build_skill_library(cfg)
    rng = derive_rng(cfg.seed, "trajectory", index)
    n, O, A, T = cfg.n_skills, cfg.obs_vocab, cfg.act_vocab, cfg.horizon
    pol = lib.policies
    dom = lib.dominant
    cum = np.cumsum(pol, axis=-1)

    # fixed draw order keeps the stream identical across obs processes
    s0 = int(rng.integers(n))
    u_switch = rng.random(T)
    offsets = rng.integers(1, n, size=T) if n > 1 else np.zeros(T, dtype=np.int64)
    u_act = rng.random(T)
    u_obs = rng.random(T)
    obs_draw = rng.integers(O, size=T)
    u_event = rng.random(T)

    switch = u_switch < cfg.switch_prob
    switch[0] = False
    if n == 1:
        switch[:] = False
    skills = (s0 + np.cumsum(np.where(switch, offsets, 0))) % n

    obs = np.empty(T, dtype=np.int64)
    acts = np.empty(T, dtype=np.int64)
    if cfg.obs_process == "iid":
        obs[:] = obs_draw
    elif cfg.obs_process == "markov":
        mcum = np.cumsum(np.asarray(cfg.obs_matrix, dtype=float), axis=1)
        obs[0] = obs_draw[0]
        for t in range(1, T):
            obs[t] = _sample(mcum[obs[t - 1]], u_obs[t])

    if cfg.obs_process == "echo":
        for t in range(T):
            if t == 0 or u_obs[t] < cfg.echo_noise:
                obs[t] = obs_draw[t]
            else:
                obs[t] = acts[t - 1] % O
            s, o = skills[t], obs[t]
            if cfg.greedy or (cfg.forced_deviance and switch[t]):
                acts[t] = dom[s, o]
            else:
                acts[t] = _sample(cum[s, o], u_act[t])
    else:
        rows = cum[skills, obs]
        acts[:] = np.minimum((rows <= u_act[:, None]).sum(axis=1), A - 1)
        forced = np.ones(T, dtype=bool) if cfg.greedy else (switch if cfg.forced_deviance else None)
        if forced is not None:
            acts[forced] = dom[skills[forced], obs[forced]]

    events = [
        (SWITCH_EVENT,) if switch[t] and u_event[t] < cfg.event_prob else ()
        for t in range(T)
    ]
    traj = Trajectory.from_arrays(
        f"traj_{index:05d}", obs, acts, O, A, events=events, skills=skills.tolist()
    )
    return LabeledTrajectory(traj, true_boundaries(traj))


def generate_corpus(
    cfg: GeneratorConfig, n: int, start: int = 0, library: SkillLibrary | None = None
) -> list[LabeledTrajectory]:
    lib = library if library is not None else build_skill_library(cfg)
    return [generate(cfg, i, lib) for i in range(start, start + n)]


def segment_ages(traj: Trajectory) -> np.ndarray:
    """Steps since the current true segment started (0 at each segment start)."""
    skills = traj.skills
    ages = np.zeros(len(skills), dtype=np.int64)
    for i in range(1, len(skills)):
        ages[i] = 0 if skills[i] != skills[i - 1] else ages[i - 1] + 1
    return ages
