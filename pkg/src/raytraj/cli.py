"""Command-line surface: synth, train, predict, eval, gradcheck, validate.

Every command writes exactly one manifest (command, full config echo, seed,
tool version, input/output paths, wall time) next to its outputs. Exit
codes: 0 success, 2 input/config error, 3 numerical divergence, 4
verification failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, bench, metrics, synth
from .geometry import DegenerateBundleError
from .learn import (
    DivergenceError,
    GradCheckReport,
    LossWeights,
    TrainConfig,
    grad_check,
    make_gradcheck_batch,
    train_toy,
)
from .model import (
    ModelDims,
    ModelParams,
    TrainSample,
    TurnTask,
    dialogue_forward,
    load_checkpoint,
    save_checkpoint,
    stack_tokens,
)
from .encoding import FourierTimeConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4

GOLD_POOL_SIGMA = 0.25  # meters; width of the gt-conditioned pooling kernel

_NAME_RE = re.compile(r"target (\w+)")
_CHECKPOINT_RE = re.compile(r"checkpoint (\d+)")


class VerificationFailure(RuntimeError):
    pass


def _manifest_path(out: Path) -> Path:
    if out.is_dir():
        return out / "manifest.json"
    return out.parent / (out.stem + ".manifest.json")


def _write_manifest(out: Path, command: str, config: dict, seed,
                    inputs: list[str], outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": round(time.time() - started, 3),
    }
    _manifest_path(out).write_text(json.dumps(manifest, indent=2) + "\n",
                                   encoding="utf-8")


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}")


def _dataclass_from(cls, data: dict, where: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValueError(f"{where}: {exc}")


# ---------------------------------------------------------------------------
# synth


def _parse_corpus_config(data: dict) -> synth.CorpusConfig:
    scene = _dataclass_from(synth.SceneConfig, data.get("scene", {}), "scene")
    cfg = synth.CorpusConfig(
        num_clips=int(data.get("num_clips", 8)),
        num_turns=int(data.get("num_turns", 5)),
        scene=scene,
        type_mix=data.get("type_mix"),
    )
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    started = time.time()
    data = _load_json(Path(args.config))
    cfg = _parse_corpus_config(data)
    if args.seed is not None:
        cfg.scene.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = synth.gen_corpus(cfg)
    written = []
    for scene in scenes:
        base = out / f"{scene.clip.clip_id}.json"
        bench.save_clip(scene.clip, base)
        bench.save_tokens(scene.tokens, scene.clip,
                          out / f"{scene.clip.clip_id}.tokens.json",
                          feature_layout=cfg.scene.feature_layout)
        bench.save_trace(scene.trace, out / f"{scene.clip.clip_id}.trace.json")
        written.append(base.name)
    _write_manifest(out, "synth", {"num_clips": cfg.num_clips,
                                   "num_turns": cfg.num_turns,
                                   "type_mix": cfg.type_mix,
                                   "scene": asdict(cfg.scene)},
                    cfg.scene.seed, [str(args.config)], written, started)
    print(f"wrote {len(scenes)} clips to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _build_train_samples(entries) -> list[TrainSample]:
    samples = []
    for entry in entries:
        clip = entry["clip"]
        trace = entry["trace"]
        identity = trace["identity_by_target"] if trace else {}
        turns = []
        for turn in clip.turns:
            if turn.geometric:
                primary = turn.targets[0]
                key = identity.get(primary.target_id)
                turns.append(TurnTask(
                    question=turn.question, geometric=True,
                    question_type=turn.question_type, n_targets=1,
                    gt_points=primary.points, gt_valid=primary.valid,
                    target_key=None if key is None else f"id{key}"))
            else:
                turns.append(TurnTask(question=turn.question, geometric=False,
                                      question_type=turn.question_type))
        samples.append(TrainSample(clip_id=clip.clip_id,
                                   tokens=stack_tokens(entry["tokens"]),
                                   turns=turns))
    return samples


def _parse_train_config(data: dict) -> TrainConfig:
    weights = data.pop("weights", None)
    cfg = _dataclass_from(TrainConfig, data, "train config")
    if weights is not None:
        cfg.weights = _dataclass_from(LossWeights, weights, "weights")
    return cfg


def cmd_train(args) -> int:
    started = time.time()
    data = _load_json(Path(args.config)) if args.config else {}
    cfg = _parse_train_config(data)
    if args.seed is not None:
        cfg.seed = args.seed
    entries = bench.load_corpus(args.corpus, with_tokens=True, with_traces=True)
    if not entries:
        raise ValueError(f"no clips found in {args.corpus}")
    samples = _build_train_samples(entries)
    result = train_toy(cfg, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.rtc"
    save_checkpoint(result.params, ckpt, header_extra={
        "seed": cfg.seed,
        "train_config": {
            "learning_rate": cfg.learning_rate, "iterations": cfg.iterations,
            "batch_size": cfg.batch_size, "detach_anchor": cfg.detach_anchor,
            "weights": asdict(cfg.weights), "identity_margin": cfg.identity_margin,
        },
        "corpus": str(args.corpus),
    })
    curve_path = out / "loss.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("iteration,total,l_traj,l_smooth,l_id\n")
        for row in result.curve:
            fh.write(f"{row[0]},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g},{row[4]:.9g}\n")
    _write_manifest(out, "train",
                    {"learning_rate": cfg.learning_rate, "iterations": cfg.iterations,
                     "batch_size": cfg.batch_size, "seed": cfg.seed,
                     "detach_anchor": cfg.detach_anchor, "weights": asdict(cfg.weights)},
                    cfg.seed, [str(args.corpus)], [ckpt.name, curve_path.name], started)
    if result.curve:
        print(f"trained {cfg.iterations} iterations: initial L_traj "
              f"{result.initial_traj:.4g}, final L_traj {result.final_traj:.4g}")
    else:
        print("trained 0 iterations: checkpoint equals initialization")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def _gold_pool_weights(turn: bench.DialogueTurn, tok) -> np.ndarray:
    """GT-conditioned pooling: gaussian in ray-to-trajectory distance."""
    pts = turn.targets[0].points[turn.targets[0].valid]
    rel = pts[None, :, :] - tok.origins[:, None, :]  # (R, T, 3)
    along = np.einsum("rti,ri->rt", rel, tok.dirs)
    d2 = np.einsum("rti,rti->rt", rel, rel) - along * along
    w = np.exp(-d2.min(axis=1) / (2.0 * GOLD_POOL_SIGMA ** 2))
    total = w.sum()
    if total < 1e-12:
        return np.full(tok.count, 1.0 / tok.count)
    return w / total


def _predicted_answer(turn: bench.DialogueTurn, points: np.ndarray,
                      layout: dict, clip: bench.ClipSample,
                      tok_features: np.ndarray) -> str:
    def fmt(p):
        return f"({p[0]:.1f}, {p[1]:.1f}, {p[2]:.1f})"

    m = _NAME_RE.search(turn.question.lower())
    name = m.group(1) if m else "the target"
    cm = _CHECKPOINT_RE.search(turn.question.lower())
    step = min(int(cm.group(1)), points.shape[0]) - 1 if cm else points.shape[0] - 1
    qtype = turn.question_type
    if qtype == "trajectory":
        return f"Target {name} moves from {fmt(points[0])} to {fmt(points[-1])}."
    if qtype == "motion trend":
        second = points[2:] - 2.0 * points[1:-1] + points[:-2]
        steady = float(np.abs(second).max()) < 0.05 if len(second) else True
        trend = "keeps a steady pace" if steady else "arcs under gravity"
        return f"Target {name} {trend} and ends near {fmt(points[-1])}."
    if qtype == "scene-level":
        block = layout.get("identity_block")
        scale = float(layout.get("identity_scale", 1.0))
        if block:
            peak = tok_features[:, block[0]:block[1]].max(axis=0)
            n = int((peak > 0.5 * scale).sum())
        else:
            n = 0
        return (f"There are {n} moving targets in view of "
                f"{len(clip.views)} cameras.")
    return f"Target {name} is near {fmt(points[step])} at checkpoint {step + 1}."


def _predict_corpus(params: ModelParams, entries, history: str,
                    audit: bool) -> list[bench.PredictionRecord]:
    records = []
    for entry in sorted(entries, key=lambda e: e["clip"].clip_id):
        clip = entry["clip"]
        layout = entry["feature_layout"] or {}
        tok = stack_tokens(entry["tokens"])
        if tok.token_dim != params.dims.token_dim:
            raise ValueError(
                f"clip {clip.clip_id!r}: token dim {tok.token_dim} does not match "
                f"checkpoint dim {params.dims.token_dim}")
        tasks = []
        for turn in clip.turns:
            task = TurnTask(question=turn.question, geometric=turn.geometric,
                            question_type=turn.question_type,
                            n_targets=max(1, len(turn.targets)))
            if turn.geometric and history == "gold":
                task.gold_pool = _gold_pool_weights(turn, tok)
            tasks.append(task)
        rec = dialogue_forward(params, tok, tasks, history=history)
        for turn, trec in zip(clip.turns, rec.turns):
            trajectories = []
            if turn.geometric:
                decoded = [trec.decoded] + trec.extra_decoded
                for gt, dec in zip(turn.targets, decoded):
                    trajectories.append({
                        "points": [[float(x) for x in row] for row in dec.points],
                        "valid": [bool(b) for b in gt.valid],
                    })
                answer = _predicted_answer(turn, trec.decoded.points, layout,
                                           clip, tok.features)
            else:
                answer = _predicted_answer(
                    turn, np.zeros((params.dims.horizon, 3)), layout, clip,
                    tok.features)
            audit_block = None
            if audit:
                audit_block = {"slot": [float(x) for x in trec.slot]}
                if turn.geometric:
                    dec = trec.decoded
                    ent = [float(-(a[a > 0] * np.log(a[a > 0])).sum())
                           for a in dec.alphas]
                    audit_block.update({
                        "anchors": [[float(x) for x in row] for row in dec.anchors],
                        "attention_entropy": ent,
                        "fallback": [bool(b) for b in dec.fallback],
                    })
            records.append(bench.PredictionRecord(
                clip_id=clip.clip_id, turn_index=turn.turn_index,
                answer=answer, trajectories=trajectories, audit=audit_block))
    return records


def cmd_predict(args) -> int:
    started = time.time()
    params, header = load_checkpoint(args.checkpoint)
    entries = bench.load_corpus(args.corpus, with_tokens=True)
    if not entries:
        raise ValueError(f"no clips found in {args.corpus}")
    history = "none" if args.no_history else args.history
    records = _predict_corpus(params, entries, history, audit=args.audit)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench.save_predictions(records, out)
    _write_manifest(out, "predict",
                    {"history": history, "audit": args.audit,
                     "checkpoint_header": {k: header[k] for k in ("dims", "seed")
                                           if k in header}},
                    header.get("seed"), [str(args.corpus), str(args.checkpoint)],
                    [out.name], started)
    print(f"wrote {len(records)} prediction records to {out} (history={history})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    started = time.time()
    entries = bench.load_corpus(args.corpus)
    clips = [e["clip"] for e in entries]
    if not clips:
        raise ValueError(f"no clips found in {args.corpus}")
    predictions = bench.load_predictions(args.predictions)
    aligned, stats = bench.align_predictions(clips, predictions)
    report = metrics.aggregate_report(aligned, stats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "eval", {"thresholds": report.config["thresholds"]},
                    None, [str(args.corpus), str(args.predictions)], [out.name],
                    started)
    geo = report.geometry
    def _fmt(entry):
        return "absent" if entry["value"] is None else f"{entry['value']:.4f}"
    print(f"point_acc@0.5 {_fmt(geo['point_acc'])}  "
          f"traj_acc@1.0 {_fmt(geo['traj_acc'])}  "
          f"step_acc@0.5 {_fmt(geo['step_acc'])}  "
          f"bleu4 {report.language['bleu4']:.4f}  "
          f"cider {report.language['cider']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    started = time.time()
    data = _load_json(Path(args.config)) if args.config else {}
    dims = ModelDims(
        token_dim=int(data.get("token_dim", 6)),
        num_frequencies=int(data.get("num_frequencies", 2)),
        hidden=int(data.get("hidden", 3)),
    )
    seed = args.seed if args.seed is not None else int(data.get("seed", 0))
    samples = make_gradcheck_batch(dims, seed=seed,
                                   n_tokens=int(data.get("num_tokens", 6)))
    params = ModelParams.init(
        dims, FourierTimeConfig.geometric(dims.num_frequencies, 2.0), seed=seed)
    modes = {"attached": (False,), "detached": (True,),
             "both": (False, True)}[args.mode]
    reports: list[GradCheckReport] = []
    for detach in modes:
        rep = grad_check(params, samples, detach_anchor=detach,
                         corrupt_block=args.corrupt_block)
        reports.append(rep)
        for line in rep.summary_lines():
            print(line)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = [{
            "detach_anchor": r.detach_anchor, "passed": r.passed,
            "tolerance": r.tolerance, "step": r.step,
            "block_errors": r.block_errors, "failures": r.failures,
        } for r in reports]
        out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        _write_manifest(out, "gradcheck",
                        {"dims": asdict(dims), "mode": args.mode,
                         "corrupt_block": args.corrupt_block},
                        seed, [], [out.name], started)
    if not all(r.passed for r in reports):
        failing = [f for r in reports for f in r.failures]
        raise VerificationFailure("gradient check failed: " + "; ".join(failing))
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args) -> int:
    started = time.time()
    directory = Path(args.corpus)
    if not directory.is_dir():
        raise ValueError(f"corpus directory not found: {directory}")
    summary, errors = bench.validate_corpus(directory)
    print(json.dumps(summary, indent=2))
    for err in errors:
        print(f"INVALID {err}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"summary": summary, "errors": errors}, indent=2)
                       + "\n", encoding="utf-8")
        _write_manifest(out, "validate", {}, None, [str(directory)], [out.name],
                        started)
    if errors:
        raise VerificationFailure(f"{len(errors)} invalid clip file(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raytraj",
        description="Synthetic multiview trajectory-dialogue harness: generate, "
                    "train, predict, evaluate, verify.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip corpus")
    p.add_argument("--config", required=True, help="corpus config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override scene seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", default=None, help="train config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run the model over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output predictions JSONL")
    p.add_argument("--history", choices=["none", "self", "gold"], default="self")
    p.add_argument("--no-history", action="store_true",
                   help="alias for --history none")
    p.add_argument("--audit", action="store_true",
                   help="include anchors/attention/slot audit blocks")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="output report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", default=None, help="dims config JSON")
    p.add_argument("--mode", choices=["attached", "detached", "both"],
                   default="both")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="optional report JSON")
    p.add_argument("--corrupt-block", default=None,
                   help="test hook: inflate one block's analytic gradient by 10%%")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("validate", help="validate every clip in a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None, help="optional summary JSON")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, bench.ClipValidationError, bench.ProtocolError,
            DegenerateBundleError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
