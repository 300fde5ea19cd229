"""Command-line pipeline: generate -> train -> calibrate -> segment -> prune -> evaluate.

Every subcommand writes its fully resolved parameters to ``<out>/config.json``.
Values come from, in increasing precedence: built-in defaults, the JSON file
given with ``--config`` (either flat or with a section named after the
subcommand), and explicit flags.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure,
4 failed verification (``verify-bounds`` only).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Callable, Sequence

from . import analysis, formats
from .core import (
    BoundarySet,
    ContractError,
    SkillSegError,
    segments_from_boundaries,
)
from .detection import segment_corpus
from .predictor import CountPredictor, train_count_predictor
from .pruning import PruneConfig, prune_segments
from .synth import GeneratorConfig, SkillLibrary, build_skill_library, generate

log = logging.getLogger("skillseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VERIFY = 0, 2, 3, 4


class VerificationFailed(Exception):
    pass


# -- helpers ---------------------------------------------------------------------


def _float(s: str) -> float:
    return math.inf if s.lower() in ("inf", "infinity") else float(s)


def _write_json(obj: Any, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(cmd: str, args: argparse.Namespace, defaults: dict[str, Any]) -> dict[str, Any]:
    params = dict(defaults)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        section = file_cfg[cmd] if isinstance(file_cfg.get(cmd), dict) else file_cfg
        for k, v in section.items():
            if k in params:
                params[k] = v
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            params[k] = v
    return params


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(out: Path, cmd: str, params: dict[str, Any]) -> None:
    _write_json({"command": cmd, "params": params}, out / "config.json")


def _workers(args: argparse.Namespace) -> int:
    return args.workers if args.workers else (os.cpu_count() or 1)


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _load_model(path: str | None) -> CountPredictor:
    if not path:
        raise ContractError("--model is required for this mode")
    return CountPredictor.load(path)


def _load_gap(params: dict[str, Any]) -> float | None:
    if params.get("gap") is not None:
        return float(params["gap"])
    if params.get("gap_file"):
        with open(params["gap_file"], encoding="utf-8") as fh:
            return float(json.load(fh)["gap"])
    return None


def _truth_sets(path: str) -> list[BoundarySet]:
    p = Path(path)
    if p.is_dir():
        p = p / "truth.jsonl"
    groups = formats.group_segments(formats.read_segments(p))
    return [BoundarySet.from_indices(tid, [s.start for s in segs if s.start > 0]) for tid, segs in groups.items()]


# -- subcommands ------------------------------------------------------------------

GEN_FIELDS = [f for f in GeneratorConfig.__dataclass_fields__]


def _gen_one(index: int, cfg: GeneratorConfig, lib: SkillLibrary):
    return generate(cfg, index, lib)


def cmd_generate(args: argparse.Namespace) -> int:
    defaults = {"n": 10, "start": 0, **GeneratorConfig().to_dict()}
    params = _resolve("generate", args, defaults)
    gen_params = {k: params[k] for k in GEN_FIELDS}
    cfg = GeneratorConfig.from_dict(gen_params)
    if params["n"] < 1 or params["start"] < 0:
        raise ContractError("--n must be >= 1 and --start >= 0")
    out = _out_dir(args)
    lib = build_skill_library(cfg)
    labeled = _pmap(partial(_gen_one, cfg=cfg, lib=lib), list(range(params["start"], params["start"] + params["n"])), _workers(args))
    formats.save_corpus([lt.trajectory for lt in labeled], out / "trajectories")
    truth = []
    for lt in labeled:
        truth.extend(segments_from_boundaries(len(lt.trajectory), lt.true_boundaries))
    formats.write_segments(truth, out / "truth.jsonl")
    lib.save(out / "library.json")
    _write_json(cfg.to_dict(), out / "generator.json")
    _provenance(out, "generate", params)
    log.info("wrote %d trajectories to %s", len(labeled), out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    params = _resolve("train", args, {"data": None, "order": 1, "alpha": 1.0})
    if not params["data"]:
        raise ContractError("--data is required")
    corpus = formats.load_corpus(params["data"])
    model = train_count_predictor(corpus, order=int(params["order"]), alpha=float(params["alpha"]))
    out = _out_dir(args)
    model.save(out / "model.json")
    _provenance(out, "train", params)
    log.info("trained order-%d model on %d trajectories", model.order, len(corpus))
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    params = _resolve("calibrate", args, {"data": None, "model": None, "quantile": 0.999, "window": 128})
    corpus = formats.load_corpus(params["data"])
    model = _load_model(params["model"])
    cal = analysis.calibrate_gap(corpus, model, float(params["quantile"]), int(params["window"]))
    out = _out_dir(args)
    _write_json(cal.to_dict(), out / "calibration.json")
    _provenance(out, "calibrate", params)
    print(f"gap = {cal.gap!r} (quantile {cal.quantile}, {cal.n_steps} steps)")
    return EXIT_OK


def cmd_segment(args: argparse.Namespace) -> int:
    defaults = {
        "data": None,
        "model": None,
        "mode": "both",
        "gap": None,
        "gap_file": None,
        "window": 128,
        "kill_offset": 16,
        "seed": 0,
    }
    params = _resolve("segment", args, defaults)
    corpus = formats.load_corpus(params["data"])
    mode = params["mode"]
    out = _out_dir(args)
    if mode.startswith(("fixed:", "uniform:")):
        strategy = analysis.parse_strategy(mode, int(params["seed"]))
        sets = [analysis.baseline_segment(len(t), strategy, t.id, i) for i, t in enumerate(corpus)]
        results = None
    elif mode in ("loss", "info", "both"):
        gap = _load_gap(params)
        if gap is None:
            if mode != "info":
                raise ContractError("loss-based modes need --gap or --gap-file (see `calibrate`)")
            gap = math.inf
        if mode == "info" and not params["model"]:
            t0 = corpus[0]
            model = CountPredictor(t0.obs_vocab, t0.act_vocab, order=0)
        else:
            model = _load_model(params["model"])
        cfg = analysis.detector_config_for(mode, gap, int(params["window"]), int(params["kill_offset"]))
        results = segment_corpus(corpus, model, cfg, _workers(args))
        sets = [r.boundaries for r in results]
    else:
        raise ContractError(f"unknown mode {mode!r}")

    segs = []
    for t, b in zip(corpus, sets):
        segs.extend(segments_from_boundaries(len(t), b))
    formats.write_segments(segs, out / "segments.jsonl")
    formats.write_boundaries(sets, out / "boundaries.jsonl")
    if results is not None:
        (out / "losses").mkdir(exist_ok=True)
        for t, r in zip(corpus, results):
            formats.write_loss_trace(r.losses, r.boundaries, out / "losses" / f"{t.id}.jsonl")
    _provenance(out, "segment", params)
    log.info("%d trajectories -> %d segments", len(corpus), len(segs))
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    params = _resolve("prune", args, {"segments": None, "min_len": 15, "max_len": 200, "tail_policy": "drop"})
    if not params["segments"]:
        raise ContractError("--segments is required")
    cfg = PruneConfig(int(params["min_len"]), int(params["max_len"]), params["tail_policy"])
    pruned, res = prune_segments(formats.read_segments(params["segments"]), cfg)
    out = _out_dir(args)
    formats.write_segments(pruned, out / "segments.jsonl")
    report = res.report()
    report["undersized_tail"] = res.undersized_tail
    _write_json(report, out / "prune_report.json")
    _provenance(out, "prune", params)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _parse_named(spec: str) -> tuple[str, str]:
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).parent.name or Path(spec).stem, spec


def cmd_evaluate(args: argparse.Namespace) -> int:
    params = _resolve("evaluate", args, {"pred": None, "truth": None, "tolerance": 3})
    if not params["pred"] or not params["truth"]:
        raise ContractError("--pred and --truth are required")
    truth = _truth_sets(params["truth"])
    out = _out_dir(args)
    rows = []
    for spec in params["pred"]:
        name, path = _parse_named(spec)
        segs = formats.read_segments(path)
        groups = formats.group_segments(segs)
        pred = [BoundarySet.from_indices(tid, [s.start for s in g if s.start > 0]) for tid, g in groups.items()]
        m = analysis.corpus_metrics(pred, truth, int(params["tolerance"]))
        ls = analysis.length_stats(segs)
        ls.write_csv(out / f"histogram_{name}.csv")
        rows.append({"name": name, **m.to_dict(), "lengths": ls.to_dict()})
        print(f"{name:>12}  P={m.precision:.3f}  R={m.recall:.3f}  F1={m.f1:.3f}  segments={ls.count}")
    _write_json({"rows": rows}, out / "metrics.json")
    _provenance(out, "evaluate", params)
    return EXIT_OK


def cmd_ablation(args: argparse.Namespace) -> int:
    defaults = {"data": None, "model": None, "gap": None, "gap_file": None, "tolerance": 3,
                "baseline": "fixed:128", "window": 128, "seed": 0}
    params = _resolve("ablation", args, defaults)
    corpus = formats.load_corpus(params["data"])
    model = _load_model(params["model"])
    gap = _load_gap(params)
    if gap is None:
        raise ContractError("ablation needs --gap or --gap-file")
    rows = analysis.run_ablation(
        corpus, model, gap, int(params["tolerance"]),
        analysis.parse_strategy(params["baseline"], int(params["seed"])),
        int(params["window"]), _workers(args),
    )
    out = _out_dir(args)
    _write_json({"rows": [r.to_dict() for r in rows]}, out / "ablation.json")
    _provenance(out, "ablation", params)
    for r in rows:
        m = r.metrics
        print(f"{r.mode:>6}  P={m.precision:.3f}  R={m.recall:.3f}  F1={m.f1:.3f}  segments={r.n_segments}")
    return EXIT_OK


def cmd_verify_bounds(args: argparse.Namespace) -> int:
    defaults = {"data": None, "K": None, "c": None, "delta": None, "m": None,
                "min_bucket": 100, "shuffle_labels": False, "trials": None, "seed": 0}
    params = _resolve("verify-bounds", args, defaults)
    data = Path(params["data"])
    with open(data / "generator.json", encoding="utf-8") as fh:
        gen = GeneratorConfig.from_dict(json.load(fh))
    for k in ("K", "c", "delta", "m"):
        if params[k] is None:
            params[k] = getattr(gen, k)
    p = analysis.AssumptionParams(params["K"], params["c"], params["delta"], params["m"])
    corpus = formats.load_corpus(data)
    if params["trials"]:
        corpus = corpus[: int(params["trials"])]
    lib = SkillLibrary.load(data / "library.json")
    oracle = lib.oracle(gen.K)
    report = analysis.verify_theorem(
        corpus, oracle, p, int(params["min_bucket"]), bool(params["shuffle_labels"]), int(params["seed"])
    )
    out = _out_dir(args)
    _write_json(report.to_dict(), out / "theorem_report.json")
    _provenance(out, "verify-bounds", params)
    print(
        f"non-transition: {report.nontransition_pass_rate:.5f} >= {report.nontransition_required:.5f} "
        f"({'pass' if report.nontransition_passed else 'FAIL'})"
    )
    for b in report.buckets:
        if b.checked:
            print(f"transition age {b.age_lo}-{b.age_hi}: {b.pass_rate:.4f} >= {b.required:.4f} "
                  f"({'pass' if b.passed else 'FAIL'}, n={b.n})")
    if not any(b.checked for b in report.buckets):
        print(f"no transition age bucket reached {int(params['min_bucket'])} samples; transition bound unverified")
    print("verdict:", "PASS" if report.passed else "FAIL")
    if not report.passed:
        raise VerificationFailed()
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with parameter values")
    common.add_argument("--seed", type=int, help="64-bit master seed")
    common.add_argument("--workers", type=int, default=0, help="worker processes (default: all cores)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="skillseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic labelled corpus")
    g.add_argument("--n", type=int)
    g.add_argument("--start", type=int, help="index of the first trajectory in the seeded stream")
    g.add_argument("--horizon", type=int)
    g.add_argument("--K", type=_float)
    g.add_argument("--c", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--m", type=float)
    g.add_argument("--obs-vocab", dest="obs_vocab", type=int)
    g.add_argument("--act-vocab", dest="act_vocab", type=int)
    g.add_argument("--n-skills", dest="n_skills", type=int)
    g.add_argument("--obs-process", dest="obs_process", choices=["iid", "markov", "echo"])
    g.add_argument("--echo-noise", dest="echo_noise", type=float)
    g.add_argument("--dominant-prob", dest="dominant_prob", type=float)
    g.add_argument("--cross-prob", dest="cross_prob", type=float)
    g.add_argument("--event-prob", dest="event_prob", type=float)
    for flag in ("greedy", "forced-deviance", "enforce-deviance"):
        g.add_argument(f"--{flag}", dest=flag.replace("-", "_"), action=argparse.BooleanOptionalAction, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="fit the count predictor")
    t.add_argument("--data")
    t.add_argument("--order", type=int)
    t.add_argument("--alpha", type=float)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[common], help="pick a gap from a loss-excess quantile")
    c.add_argument("--data")
    c.add_argument("--model")
    c.add_argument("--quantile", type=float)
    c.add_argument("--window", type=int)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("segment", parents=[common], help="detect boundaries")
    s.add_argument("--data")
    s.add_argument("--model")
    s.add_argument("--mode", help="loss | info | both | fixed:L | uniform:MIN:MAX")
    s.add_argument("--gap", type=_float)
    s.add_argument("--gap-file", dest="gap_file")
    s.add_argument("--window", type=int)
    s.add_argument("--kill-offset", dest="kill_offset", type=int)
    s.set_defaults(func=cmd_segment)

    p = sub.add_parser("prune", parents=[common], help="enforce min/max segment lengths")
    p.add_argument("--segments")
    p.add_argument("--min", dest="min_len", type=int)
    p.add_argument("--max", dest="max_len", type=int)
    p.add_argument("--tail", dest="tail_policy", choices=["drop", "keep_flagged"])
    p.set_defaults(func=cmd_prune)

    e = sub.add_parser("evaluate", parents=[common], help="boundary metrics and length statistics")
    e.add_argument("--pred", action="append", help="[NAME=]segments.jsonl (repeatable)")
    e.add_argument("--truth", help="truth segments file or dataset directory")
    e.add_argument("--tolerance", type=int)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablation", parents=[common], help="baseline / info / loss / both comparison")
    a.add_argument("--data")
    a.add_argument("--model")
    a.add_argument("--gap", type=_float)
    a.add_argument("--gap-file", dest="gap_file")
    a.add_argument("--tolerance", type=int)
    a.add_argument("--baseline")
    a.add_argument("--window", type=int)
    a.set_defaults(func=cmd_ablation)

    v = sub.add_parser("verify-bounds", parents=[common], help="Monte Carlo check of the detection bounds")
    v.add_argument("--data")
    v.add_argument("--K", type=_float)
    v.add_argument("--c", type=float)
    v.add_argument("--delta", type=float)
    v.add_argument("--m", type=float)
    v.add_argument("--min-bucket", dest="min_bucket", type=int)
    v.add_argument("--trials", type=int, help="use only the first N trajectories")
    v.add_argument("--shuffle-labels", dest="shuffle_labels", action="store_true", default=None)
    v.set_defaults(func=cmd_verify_bounds)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except VerificationFailed:
        return EXIT_VERIFY
    except analysis.NotSeparatedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SkillSegError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
