"""Unconditional next-action predictors.

Two models implement the same streaming protocol (``reset`` / ``observe`` /
``predict``):

* :class:`CountPredictor` -- additive-smoothed counts of the action given the
  current observation and up to ``order`` preceding observations.  This is
  the trainable model used for segmentation.
* :class:`MixtureOraclePredictor` -- the exact predictive distribution of a
  known switching-skill process, obtained by Bayesian filtering over the
  hidden skill.  Used to check the detection bounds numerically.

Trained parameters are never mutated by inference; :meth:`PredictorModel.spawn`
returns an independent inference context that shares them.
"""

from __future__ import annotations

import copy
import json
import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ConfigError, ContractError, RangeError, Trajectory

MODEL_FORMAT = "skillseg.count_predictor"
MODEL_VERSION = 1


@dataclass(frozen=True, slots=True)
class StepLoss:
    index: int
    loss: float


class PredictorModel(ABC):
    """Streaming conditional distribution over actions.

    ``window`` caps how many of the most recent observed steps the model
    may condition on; ``None`` means unbounded.
    """

    obs_vocab: int
    act_vocab: int
    window: int | None = None

    @abstractmethod
    def reset(self) -> None:
        """Forget all observed context."""

    @abstractmethod
    def observe(self, obs: int, act: int) -> None:
        """Append one step to the context."""

    @abstractmethod
    def predict(self, obs: int) -> np.ndarray:
        """Distribution over actions given the context and the current observation."""

    @property
    @abstractmethod
    def context_length(self) -> int:
        """Number of past steps currently held in context."""

    def spawn(self, window: int | None = None) -> "PredictorModel":
        """Return a fresh, reset inference context sharing this model's parameters."""
        other = copy.copy(self)
        if window is not None:
            other.window = window
        other._init_context()
        return other

    @abstractmethod
    def _init_context(self) -> None: ...

    def check_tokens(self, obs: int, act: int | None = None) -> None:
        if not 0 <= obs < self.obs_vocab:
            raise RangeError(f"obs token {obs} outside [0, {self.obs_vocab})")
        if act is not None and not 0 <= act < self.act_vocab:
            raise RangeError(f"action token {act} outside [0, {self.act_vocab})")


def step_loss(model: PredictorModel, obs: int, act: int, index: int = 0) -> StepLoss:
    """Negative log-likelihood (nats) of ``act``; the context is left untouched."""
    model.check_tokens(obs, act)
    p = float(model.predict(obs)[act])
    loss = math.inf if p <= 0.0 else -math.log(p)
    # p may exceed 1 by rounding only
    return StepLoss(index, max(loss, 0.0))


class CountPredictor(PredictorModel):
    """Additive-smoothed n-gram style model of ``P(a_t | o_{t-k..t-1}, o_t)``.

    Counts are kept for every context length ``k = 0..order`` so that the
    model can predict right after a reset.  Prediction uses the longest
    available context, i.e. ``min(order, window, steps since reset)``.

    Parameters
    ----------
    obs_vocab, act_vocab : int
        Vocabulary sizes.
    order : int
        Maximum number of preceding observation tokens in the context key.
    alpha : float
        Additive smoothing constant, > 0.
    """

    def __init__(
        self,
        obs_vocab: int,
        act_vocab: int,
        order: int = 1,
        alpha: float = 1.0,
        counts: dict[tuple[int, ...], np.ndarray] | None = None,
        window: int | None = None,
    ) -> None:
        if obs_vocab < 1 or act_vocab < 1:
            raise ConfigError("vocabulary sizes must be positive")
        if order < 0:
            raise ConfigError(f"order must be >= 0, got {order}")
        if not alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {alpha}")
        self.obs_vocab = int(obs_vocab)
        self.act_vocab = int(act_vocab)
        self.order = int(order)
        self.alpha = float(alpha)
        self.counts: dict[tuple[int, ...], np.ndarray] = counts if counts is not None else {}
        self.window = window
        self._uniform = np.full(self.act_vocab, 1.0 / self.act_vocab)
        self._probs: dict[tuple[int, ...], np.ndarray] = {}
        self._init_context()

    def _init_context(self) -> None:
        self._history: deque[int] = deque(maxlen=self.window)

    def reset(self) -> None:
        self._history.clear()

    def observe(self, obs: int, act: int) -> None:
        self._history.append(int(obs))

    @property
    def context_length(self) -> int:
        return len(self._history)

    def _key(self, obs: int) -> tuple[int, ...]:
        k = min(self.order, len(self._history))
        if k == 0:
            return (obs,)
        h = self._history
        return tuple(h[i] for i in range(len(h) - k, len(h))) + (obs,)

    def predict(self, obs: int) -> np.ndarray:
        key = self._key(int(obs))
        p = self._probs.get(key)
        if p is None:
            c = self.counts.get(key)
            if c is None:
                p = self._uniform
            else:
                p = (c + self.alpha) / (c.sum() + self.alpha * self.act_vocab)
            self._probs[key] = p
        return p

    def add_trajectory(self, traj: Trajectory) -> None:
        obs = traj.obs.tolist()
        acts = traj.acts.tolist()
        for t, (o, a) in enumerate(zip(obs, acts)):
            for k in range(min(self.order, t) + 1):
                key = tuple(obs[t - k : t + 1])
                c = self.counts.get(key)
                if c is None:
                    c = self.counts[key] = np.zeros(self.act_vocab, dtype=np.int64)
                c[a] += 1
        self._probs.clear()

    # persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        entries = [[list(k), c.tolist()] for k, c in sorted(self.counts.items())]
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "order": self.order,
            "alpha": self.alpha,
            "obs_vocab": self.obs_vocab,
            "act_vocab": self.act_vocab,
            "counts": entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CountPredictor":
        if d.get("format") != MODEL_FORMAT:
            raise ContractError(f"not a count predictor file (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ContractError(f"unsupported model version {d.get('version')!r}")
        counts = {tuple(k): np.asarray(c, dtype=np.int64) for k, c in d["counts"]}
        return cls(d["obs_vocab"], d["act_vocab"], d["order"], d["alpha"], counts)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "CountPredictor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def train_count_predictor(
    corpus: Sequence[Trajectory], order: int = 1, alpha: float = 1.0
) -> CountPredictor:
    """Fit a :class:`CountPredictor` on every step of every trajectory."""
    if not corpus:
        raise ConfigError("training corpus is empty")
    ov, av = corpus[0].obs_vocab, corpus[0].act_vocab
    for t in corpus[1:]:
        if (t.obs_vocab, t.act_vocab) != (ov, av):
            raise ConfigError(
                f"vocab mismatch: trajectory {t.id!r} has ({t.obs_vocab}, {t.act_vocab}), "
                f"expected ({ov}, {av})"
            )
    model = CountPredictor(ov, av, order=order, alpha=alpha)
    for t in corpus:
        model.add_trajectory(t)
    return model


class MixtureOraclePredictor(PredictorModel):
    """Exact predictive distribution for a known switching-skill process.

    The hidden skill starts uniform and, before every step, keeps its value
    with probability ``1 - switch_prob`` or jumps uniformly to one of the
    other skills.  ``posterior`` is the filtered belief over the skill that
    produced the most recently observed action.

    Observations must carry no information about the skill beyond what the
    past actions carry; then the filter below is the exact Bayes posterior.
    """

    def __init__(
        self,
        policies: np.ndarray | Sequence,
        switch_prob: float,
        window: int | None = None,
    ) -> None:
        pol = np.asarray(policies, dtype=float)
        if pol.ndim != 3 or pol.shape[0] == 0:
            raise ConfigError("policies must be a non-empty (n_skills, obs_vocab, act_vocab) array")
        if not 0.0 <= switch_prob < 1.0:
            raise ConfigError(f"switch_prob must lie in [0, 1), got {switch_prob}")
        self.policies = pol
        self.n_skills, self.obs_vocab, self.act_vocab = pol.shape
        self.switch_prob = float(switch_prob)
        self.window = window
        self._init_context()

    @classmethod
    def from_K(cls, policies, K: float, window: int | None = None) -> "MixtureOraclePredictor":
        if K <= 1:
            raise RangeError(f"K must exceed 1, got {K}")
        return cls(policies, 1.0 / K, window)

    def _init_context(self) -> None:
        self._uniform = np.full(self.n_skills, 1.0 / self.n_skills)
        self.posterior = self._uniform.copy()
        self._history: deque[tuple[int, int]] = deque(maxlen=self.window)

    @property
    def context_length(self) -> int:
        return len(self._history)

    def reset(self) -> None:
        self.posterior = self._uniform.copy()
        self._history.clear()

    def _advance(self, post: np.ndarray) -> np.ndarray:
        n = self.n_skills
        if n == 1 or self.switch_prob == 0.0:
            return post
        s = self.switch_prob
        return (1.0 - s) * post + s * (1.0 - post) / (n - 1)

    def prior(self) -> np.ndarray:
        """Belief over the skill at the next step, before seeing its action."""
        return self._advance(self.posterior)

    def _condition(self, post: np.ndarray, obs: int, act: int) -> np.ndarray:
        w = self._advance(post) * self.policies[:, obs, act]
        z = w.sum()
        if z <= 0.0:
            raise ContractError(f"action {act} has zero probability under every skill")
        return w / z

    def observe(self, obs: int, act: int) -> None:
        full = self.window is not None and len(self._history) == self.window
        self._history.append((int(obs), int(act)))
        if full:
            # oldest step fell out of the window: refilter from scratch
            post = self._uniform
            for o, a in self._history:
                post = self._condition(post, o, a)
            self.posterior = post
        else:
            self.posterior = self._condition(self.posterior, int(obs), int(act))

    def predict(self, obs: int) -> np.ndarray:
        return self.prior() @ self.policies[:, int(obs), :]


def oracle_predict(oracle: MixtureOraclePredictor, obs: int) -> np.ndarray:
    return oracle.predict(obs)
