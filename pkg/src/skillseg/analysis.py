"""Verification of the detection bounds, segmentation metrics and baselines."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    BoundarySet,
    ConfigError,
    DetectorConfig,
    RangeError,
    Segment,
    Trajectory,
)
from .detection import loss_excesses, segment_corpus
from .predictor import PredictorModel
from .synth import LabeledTrajectory, derive_rng, true_boundaries


# -- theoretical bounds -------------------------------------------------------


@dataclass(frozen=True)
class AssumptionParams:
    """Switch rarity ``K``, confidence ``c``, slack ``delta``, deviance ``m``."""

    K: float
    c: float
    delta: float
    m: float

    def __post_init__(self) -> None:
        if not self.K > 1:
            raise RangeError(f"K must exceed 1, got {self.K}")
        if not 0 < self.c < 1:
            raise RangeError(f"c must lie in (0, 1), got {self.c}")
        if not 0 <= self.delta < 1:
            raise RangeError(f"delta must lie in [0, 1), got {self.delta}")
        if not 0 < self.m < 1:
            raise RangeError(f"m must lie in (0, 1), got {self.m}")


@dataclass(frozen=True)
class TheoremBounds:
    lower_nontransition: float
    upper_transition: float
    separated: bool

    def __iter__(self):
        return iter((self.lower_nontransition, self.upper_transition, self.separated))


def theorem_bounds(p: AssumptionParams) -> TheoremBounds:
    """Bounds on the relative predictive probability.

    Without a skill switch the ratio exceeds ``(K-1)c/K`` with probability
    above ``1 - delta``; at a switch after ``t`` steps it stays below
    ``Km / (2(K-1)) + 1 / (c(K-1))`` with probability above ``1 - t*delta``.
    The two are separated when ``c > m`` and ``(K-4)c^2 > 2``.
    """
    K, c, m = p.K, p.c, p.m
    if K <= 1:
        raise RangeError(f"K must exceed 1, got {K}")
    lower = (K - 1) * c / K
    upper = K * m / (2 * (K - 1)) + 1 / (c * (K - 1))
    return TheoremBounds(lower, upper, bool(c > m and (K - 4) * c * c > 2))


# -- ratio traces -------------------------------------------------------------


@dataclass(frozen=True)
class RatioTrace:
    """Log relative predictive probabilities of one trajectory.

    Entry ``k`` concerns step ``index[k]``: its action's log-probability
    minus the mean log-probability of the ``age[k]`` preceding steps of the
    same true segment.  For a transition step those preceding steps belong
    to the segment that just ended.
    """

    trajectory_id: str
    index: np.ndarray
    age: np.ndarray
    log_ratio: np.ndarray
    is_transition: np.ndarray
    n_infinite: int = 0

    @property
    def ratio(self) -> np.ndarray:
        return np.exp(self.log_ratio)

    def __len__(self) -> int:
        return len(self.index)


def _skill_labels(traj) -> tuple[Trajectory, list[int]]:
    t = traj.trajectory if isinstance(traj, LabeledTrajectory) else traj
    skills = t.skills
    if any(s is None for s in skills):
        raise ConfigError(f"trajectory {t.id!r} lacks skill labels")
    return t, skills


def _logp(model: PredictorModel, obs: int, act: int) -> float:
    p = float(model.predict(obs)[act])
    return math.log(p) if p > 0 else -math.inf


def ratio_trace(traj: LabeledTrajectory | Trajectory, model: PredictorModel) -> RatioTrace:
    """Compute ``ln r`` for every step with at least one step of history.

    The model is reset at each true segment start, and the history used for
    the geometric mean restarts there too.  Entries whose history or next
    probability is zero are skipped and counted in ``n_infinite``.
    """
    t, skills = _skill_labels(traj)
    ctx = model.spawn()
    ctx.reset()
    obs = t.obs.tolist()
    acts = t.acts.tolist()
    n = len(obs)
    idx, ages, logr, trans = [], [], [], []
    n_inf = 0
    hist_sum = _logp(ctx, obs[0], acts[0])
    hist_n = 1
    ctx.observe(obs[0], acts[0])
    for i in range(1, n):
        lp = _logp(ctx, obs[i], acts[i])
        is_trans = skills[i] != skills[i - 1]
        if math.isfinite(lp) and math.isfinite(hist_sum):
            idx.append(i)
            ages.append(hist_n)
            logr.append(lp - hist_sum / hist_n)
            trans.append(is_trans)
        else:
            n_inf += 1
        if is_trans:
            ctx.reset()
            hist_sum = _logp(ctx, obs[i], acts[i])
            hist_n = 1
        else:
            hist_sum += lp
            hist_n += 1
        ctx.observe(obs[i], acts[i])
    return RatioTrace(
        t.id,
        np.asarray(idx, dtype=np.int64),
        np.asarray(ages, dtype=np.int64),
        np.asarray(logr, dtype=float),
        np.asarray(trans, dtype=bool),
        n_inf,
    )


# -- Monte Carlo verification --------------------------------------------------


class NotSeparatedError(ConfigError):
    """The parameters do not separate the two bounds, so comparing them is vacuous."""


def _binomial_floor(p: float, n: int, sigmas: float = 3.0) -> float:
    if n == 0:
        return p
    return p - sigmas * math.sqrt(max(p * (1 - p), 0.0) / n)


@dataclass(frozen=True)
class BucketResult:
    age_lo: int
    age_hi: int
    n: int
    pass_rate: float
    required: float
    checked: bool
    passed: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class TheoremReport:
    params: AssumptionParams
    lower_bound: float
    upper_bound: float
    n_nontransition: int
    nontransition_pass_rate: float
    nontransition_required: float
    nontransition_passed: bool
    buckets: tuple[BucketResult, ...]
    transition_passed: bool
    n_transition: int
    n_excluded: int
    histograms: dict = field(default_factory=dict)
    shuffled: bool = False

    @property
    def passed(self) -> bool:
        return self.nontransition_passed and self.transition_passed

    def to_dict(self) -> dict:
        return {
            "params": {k: getattr(self.params, k) for k in ("K", "c", "delta", "m")},
            "lower_bound_nontransition": self.lower_bound,
            "upper_bound_transition": self.upper_bound,
            "shuffled_labels": self.shuffled,
            "nontransition": {
                "n": self.n_nontransition,
                "pass_rate": self.nontransition_pass_rate,
                "required": self.nontransition_required,
                "passed": self.nontransition_passed,
            },
            "transition": {
                "n": self.n_transition,
                "passed": self.transition_passed,
                "buckets": [b.to_dict() for b in self.buckets],
            },
            "n_excluded": self.n_excluded,
            "histograms": self.histograms,
            "passed": self.passed,
        }


def age_buckets(max_age: int) -> list[tuple[int, int]]:
    """Power-of-two age ranges ``[1,1], [2,3], [4,7], ...`` covering ``max_age``."""
    out = []
    lo = 1
    while lo <= max(max_age, 1):
        out.append((lo, 2 * lo - 1))
        lo *= 2
    return out


def verify_theorem(
    corpus: Sequence[LabeledTrajectory | Trajectory],
    oracle: PredictorModel,
    p: AssumptionParams,
    min_bucket: int = 100,
    shuffle_labels: bool = False,
    seed: int = 0,
    traces: Sequence[RatioTrace] | None = None,
) -> TheoremReport:
    """Monte Carlo check of both bounds on a labelled corpus.

    Non-transition steps must exceed the lower bound at a rate of at least
    ``1 - delta`` minus three binomial standard errors.  Transition steps are
    bucketed by history length ``t`` (power-of-two ranges); a bucket with at
    least ``min_bucket`` samples must stay below the upper bound at a rate of
    at least ``1 - t_max * delta`` minus three standard errors, ``t_max``
    being the bucket's largest age.  The transition side passes only if at
    least one bucket was checked and every checked bucket passed.

    ``shuffle_labels`` permutes the transition flags first (negative control).
    """
    bounds = theorem_bounds(p)
    if not bounds.separated:
        raise NotSeparatedError(
            f"bounds not separated for K={p.K}, c={p.c}, m={p.m}: need c > m and (K-4)c^2 > 2"
        )
    if traces is None:
        traces = [ratio_trace(traj, oracle) for traj in corpus]
    logr = np.concatenate([tr.log_ratio for tr in traces]) if traces else np.zeros(0)
    age = np.concatenate([tr.age for tr in traces]) if traces else np.zeros(0, dtype=np.int64)
    trans = np.concatenate([tr.is_transition for tr in traces]) if traces else np.zeros(0, dtype=bool)
    n_excl = sum(tr.n_infinite for tr in traces)
    if shuffle_labels:
        trans = derive_rng(seed, "shuffle").permutation(trans)

    log_lo, log_hi = math.log(bounds.lower_nontransition), math.log(bounds.upper_transition)
    non = logr[~trans]
    n_non = len(non)
    rate_non = float(np.mean(non > log_lo)) if n_non else float("nan")
    req_non = _binomial_floor(1 - p.delta, n_non)
    non_ok = n_non > 0 and rate_non >= req_non

    buckets = []
    tr_logr, tr_age = logr[trans], age[trans]
    for lo, hi in age_buckets(int(tr_age.max()) if len(tr_age) else 1):
        sel = (tr_age >= lo) & (tr_age <= hi)
        k = int(sel.sum())
        rate = float(np.mean(tr_logr[sel] < log_hi)) if k else float("nan")
        target = max(0.0, 1 - hi * p.delta)
        req = _binomial_floor(target, k)
        checked = k >= min_bucket and target > 0
        buckets.append(BucketResult(lo, hi, k, rate, req, checked, (not checked) or rate >= req))
    trans_ok = any(b.checked for b in buckets) and all(b.passed for b in buckets)

    edges = np.linspace(-8, 4, 49)
    hist = {
        "log10_edges": edges.tolist(),
        "nontransition": np.histogram(np.clip(non / math.log(10), -8, 4), edges)[0].tolist(),
        "transition": np.histogram(np.clip(tr_logr / math.log(10), -8, 4), edges)[0].tolist(),
    }
    return TheoremReport(
        p,
        bounds.lower_nontransition,
        bounds.upper_transition,
        n_non,
        rate_non,
        req_non,
        bool(non_ok),
        tuple(buckets),
        bool(trans_ok),
        int(trans.sum()),
        n_excl,
        hist,
        shuffle_labels,
    )


# -- segmentation metrics -----------------------------------------------------


@dataclass(frozen=True)
class BoundaryMetrics:
    precision: float
    recall: float
    f1: float
    tolerance: int
    matched_pairs: tuple[tuple[int, int], ...] = ()
    n_predicted: int = 0
    n_true: int = 0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tolerance": self.tolerance,
            "n_predicted": self.n_predicted,
            "n_true": self.n_true,
            "n_matched": len(self.matched_pairs),
        }


def match_boundaries(pred: Sequence[int], truth: Sequence[int], tolerance: int) -> list[tuple[int, int]]:
    """One-to-one greedy sweep: each prediction, left to right, takes the
    earliest unmatched true boundary within ``tolerance``.

    All windows have the same width, so this yields a maximum matching and
    the number of matches does not depend on which side is called "pred".
    """
    pairs = []
    j = 0
    truth = sorted(truth)
    for p in sorted(pred):
        while j < len(truth) and truth[j] < p - tolerance:
            j += 1
        if j < len(truth) and truth[j] <= p + tolerance:
            pairs.append((p, truth[j]))
            j += 1
    return pairs


def _prf(n_match: int, n_pred: int, n_true: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_true == 0:
        return 1.0, 1.0, 1.0
    prec = n_match / n_pred if n_pred else 0.0
    rec = n_match / n_true if n_true else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def boundary_metrics(predicted: BoundarySet, truth: BoundarySet, tolerance: int) -> BoundaryMetrics:
    if tolerance < 0:
        raise RangeError(f"tolerance must be >= 0, got {tolerance}")
    pairs = match_boundaries(predicted.indices, truth.indices, tolerance)
    prec, rec, f1 = _prf(len(pairs), len(predicted), len(truth))
    return BoundaryMetrics(prec, rec, f1, tolerance, tuple(pairs), len(predicted), len(truth))


def corpus_metrics(
    predicted: Iterable[BoundarySet], truth: Iterable[BoundarySet], tolerance: int
) -> BoundaryMetrics:
    """Micro-averaged metrics over trajectories matched by id."""
    if tolerance < 0:
        raise RangeError(f"tolerance must be >= 0, got {tolerance}")
    pmap = {b.trajectory_id: b for b in predicted}
    tmap = {b.trajectory_id: b for b in truth}
    n_match = n_pred = n_true = 0
    for tid in sorted(set(pmap) | set(tmap)):
        pi = pmap[tid].indices if tid in pmap else []
        ti = tmap[tid].indices if tid in tmap else []
        n_match += len(match_boundaries(pi, ti, tolerance))
        n_pred += len(pi)
        n_true += len(ti)
    prec, rec, f1 = _prf(n_match, n_pred, n_true)
    return BoundaryMetrics(prec, rec, f1, tolerance, (), n_pred, n_true)


# -- length statistics ----------------------------------------------------------


@dataclass(frozen=True)
class LengthStats:
    count: int
    mean: float
    std: float
    log_mean: float
    log_std: float
    log_skew: float
    bins: tuple[tuple[float, float, int], ...]

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
            "log_mean": self.log_mean,
            "log_std": self.log_std,
            "log_skew": self.log_skew,
            "abs_log_skew": abs(self.log_skew),
            "histogram": [list(b) for b in self.bins],
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in self.bins:
                w.writerow([repr(lo), repr(hi), c])


def length_stats(segments: Sequence[Segment] | Sequence[int], n_bins: int = 30) -> LengthStats:
    """Summary of segment lengths, in linear and log scale.

    Standard deviations are population (``ddof=0``); the skewness is the
    population moment ratio.  The histogram uses ``n_bins`` log-spaced bins
    spanning ``[1, max length]``.
    """
    if len(segments) == 0:
        raise ValueError("length_stats needs at least one segment")
    lengths = np.asarray(
        [s.length if isinstance(s, Segment) else int(s) for s in segments], dtype=float
    )
    logs = np.log(lengths)
    top = float(lengths.max())
    if lengths.min() == top:
        # constant sample: avoid float noise in the spread and use one bin
        return LengthStats(len(lengths), top, 0.0, float(logs[0]), 0.0, 0.0, ((top, top, len(lengths)),))
    lstd = float(logs.std())
    skew = float(np.mean((logs - logs.mean()) ** 3) / lstd**3) if lstd > 0 else 0.0
    if top > 1:
        edges = np.geomspace(1.0, top, n_bins + 1)
        counts, _ = np.histogram(lengths, edges)
        bins = tuple((float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(n_bins))
    else:
        bins = ((1.0, 1.0, len(lengths)),)
    return LengthStats(
        len(lengths),
        float(lengths.mean()),
        float(lengths.std()),
        float(logs.mean()),
        lstd,
        skew,
        bins,
    )


# -- baselines ------------------------------------------------------------------


@dataclass(frozen=True)
class FixedLength:
    length: int


@dataclass(frozen=True)
class UniformLength:
    min_len: int
    max_len: int
    seed: int = 0


def baseline_segment(
    traj_len: int, strategy: FixedLength | UniformLength, trajectory_id: str = "", index: int = 0
) -> BoundarySet:
    """Sequential-sampling boundaries that ignore the data.

    ``index`` selects an independent random stream per trajectory for the
    uniform strategy.
    """
    if isinstance(strategy, FixedLength):
        if strategy.length < 1:
            raise RangeError(f"segment length must be >= 1, got {strategy.length}")
        return BoundarySet.from_indices(trajectory_id, range(strategy.length, traj_len, strategy.length))
    if isinstance(strategy, UniformLength):
        lo, hi = strategy.min_len, strategy.max_len
        if lo < 1 or lo > hi:
            raise RangeError(f"need 1 <= min_len <= max_len, got {lo}, {hi}")
        rng = derive_rng(strategy.seed, "uniform_baseline", index)
        out = []
        pos = int(rng.integers(lo, hi + 1))
        while pos < traj_len:
            out.append(pos)
            pos += int(rng.integers(lo, hi + 1))
        return BoundarySet.from_indices(trajectory_id, out)
    raise ConfigError(f"unknown baseline strategy {strategy!r}")


def parse_strategy(spec: str, seed: int = 0) -> FixedLength | UniformLength:
    """``fixed:L`` or ``uniform:MIN:MAX``."""
    parts = spec.split(":")
    try:
        if parts[0] == "fixed" and len(parts) == 2:
            return FixedLength(int(parts[1]))
        if parts[0] == "uniform" and len(parts) == 3:
            return UniformLength(int(parts[1]), int(parts[2]), seed)
    except ValueError:
        pass
    raise ConfigError(f"bad baseline spec {spec!r}; expected fixed:L or uniform:MIN:MAX")


def reward_driven_segment(*_args, **_kwargs):
    """Reward-driven segmentation needs a reward signal, which synthetic
    corpora do not have."""
    raise NotImplementedError("reward-driven segmentation is not supported: no reward signal")


# -- gap calibration --------------------------------------------------------------


@dataclass(frozen=True)
class GapCalibration:
    gap: float
    quantile: float
    n_steps: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "gap": self.gap,
            "quantile": self.quantile,
            "n_steps": self.n_steps,
            "degenerate": self.degenerate,
        }


def calibrate_gap(
    corpus: Sequence[Trajectory], model: PredictorModel, target_quantile: float, window: int = 128
) -> GapCalibration:
    """Pick ``gap`` as a quantile of the loss excess over the running mean.

    Excesses come from running the detector with an infinite gap (so the
    running mean spans each whole trajectory).  This is a heuristic: the
    quantile should roughly match one minus the expected boundary rate.
    """
    if not corpus:
        raise ConfigError("calibration corpus is empty")
    if not 0 < target_quantile <= 1:
        raise RangeError(f"target_quantile must lie in (0, 1], got {target_quantile}")
    exc = np.concatenate([loss_excesses(t, model, window) for t in corpus])
    gap = float(np.quantile(exc, target_quantile))
    degenerate = bool(np.all(exc == exc[0]))
    if degenerate:
        warnings.warn("all loss excesses are equal; calibrated gap is degenerate", RuntimeWarning)
    return GapCalibration(max(gap, 0.0), target_quantile, len(exc), degenerate)


# -- ablation -------------------------------------------------------------------


ABLATION_MODES = ("none", "info", "loss", "both")


@dataclass(frozen=True)
class AblationRow:
    mode: str
    metrics: BoundaryMetrics
    n_segments: int
    lengths: LengthStats | None

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "n_segments": self.n_segments, **self.metrics.to_dict()}
        if self.lengths is not None:
            d["log_length_mean"] = self.lengths.log_mean
            d["log_length_std"] = self.lengths.log_std
        return d


def detector_config_for(mode: str, gap: float, window: int = 128, kill_offset: int = 16) -> DetectorConfig:
    if mode == "loss":
        return DetectorConfig(gap, window, kill_offset, use_loss=True, use_events=False)
    if mode == "info":
        return DetectorConfig(gap, window, kill_offset, use_loss=False, use_events=True)
    if mode == "both":
        return DetectorConfig(gap, window, kill_offset, use_loss=True, use_events=True)
    raise ConfigError(f"no detector configuration for mode {mode!r}")


def run_ablation(
    corpus: Sequence[LabeledTrajectory | Trajectory],
    model: PredictorModel,
    gap: float,
    tolerance: int = 3,
    baseline: FixedLength | UniformLength = FixedLength(128),
    window: int = 128,
    workers: int = 1,
) -> list[AblationRow]:
    """Evaluate the four arms: baseline (no loss, no info), info, loss, both."""
    trajs = [c.trajectory if isinstance(c, LabeledTrajectory) else c for c in corpus]
    truth = [true_boundaries(t) for t in trajs]
    rows = []
    for mode in ABLATION_MODES:
        if mode == "none":
            pred = [baseline_segment(len(t), baseline, t.id, i) for i, t in enumerate(trajs)]
        else:
            cfg = detector_config_for(mode, gap, window)
            pred = [r.boundaries for r in segment_corpus(trajs, model, cfg, workers)]
        n_seg = sum(len(b) + 1 for b in pred)
        seg_lengths = []
        for t, b in zip(trajs, pred):
            cuts = [0] + b.indices + [len(t)]
            seg_lengths.extend(e - s for s, e in zip(cuts, cuts[1:]))
        rows.append(AblationRow(mode, corpus_metrics(pred, truth, tolerance), n_seg, length_stats(seg_lengths)))
    return rows
