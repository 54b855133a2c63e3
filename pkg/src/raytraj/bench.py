"""Clip-dialogue data model, file formats, validation, and alignment.

One clip per JSON file. Extrinsics on disk default to camera-from-world
(the common calibration export), converted to world-from-camera at load;
the `extrinsic_convention` field makes files self-describing and both
spellings are accepted. Loaded files keep their raw calibration payload so
a load/save round trip is byte-identical.

Sidecar files per clip:
  <clip>.tokens.json  evidence tokens (pixel + feature; rays are rebuilt
                      from the clip calibration at load)
  <clip>.trace.json   generation ground truth (identity map, true positions)

Predictions are JSON Lines, one record per dialogue turn. Alignment is
strictly positional (query order); a missing record scores as a miss at
every valid step, while duplicate records and target-count mismatches are
protocol errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import HORIZON
from .encoding import VisualToken
from .geometry import CameraIntrinsics, CameraPose, CameraView, pixel_to_ray

__all__ = [
    "ClipValidationError",
    "ProtocolError",
    "GroundTruthTrajectory",
    "DialogueTurn",
    "ViewCalibration",
    "ClipSample",
    "PredictionRecord",
    "AlignedItem",
    "AlignedTurn",
    "QUESTION_TYPES",
    "GEOMETRIC_TYPES",
    "load_clip",
    "save_clip",
    "save_tokens",
    "load_tokens",
    "save_trace",
    "load_trace",
    "validate_corpus",
    "list_clip_files",
    "load_corpus",
    "load_predictions",
    "save_predictions",
    "align_predictions",
]

QUESTION_TYPES = ("identity", "trajectory", "relation", "motion trend", "scene-level")
GEOMETRIC_TYPES = ("identity", "trajectory", "relation", "motion trend")
EXTRINSIC_CONVENTIONS = ("camera_from_world", "world_from_camera")
ROTATION_TOLERANCE = 1e-6  # schema-level orthonormality gate


class ClipValidationError(ValueError):
    """A clip file violates the schema; message carries a JSON path."""

    def __init__(self, path: str, message: str):
        self.json_path = path
        super().__init__(f"{path}: {message}")


class ProtocolError(ValueError):
    """A prediction set violates the evaluation protocol."""


@dataclass
class GroundTruthTrajectory:
    target_id: str
    points: np.ndarray  # (H, 3) meters
    valid: np.ndarray  # (H,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.shape != (HORIZON, 3):
            raise ValueError(f"points must be ({HORIZON}, 3), got {self.points.shape}")
        if self.valid.shape != (HORIZON,):
            raise ValueError(f"valid mask must have {HORIZON} entries")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        if not self.valid.any():
            raise ValueError("at least one step must be valid")


@dataclass
class DialogueTurn:
    turn_index: int
    question: str
    question_type: str
    answer: str
    targets: list[GroundTruthTrajectory] = field(default_factory=list)

    @property
    def geometric(self) -> bool:
        return len(self.targets) > 0


@dataclass
class ViewCalibration:
    view_id: str
    cameras: list[CameraView]
    raw: list[dict] | None = None  # disk payload, kept for byte-exact round trips


@dataclass
class ClipSample:
    clip_id: str
    regime: str
    timestamps: list[float]
    views: list[ViewCalibration]
    turns: list[DialogueTurn]
    extrinsic_convention: str = "camera_from_world"

    def camera_index(self) -> dict[tuple[str, float], CameraView]:
        return {(v.view_id, cam.timestamp): cam
                for v in self.views for cam in v.cameras}

    def all_cameras(self) -> list[CameraView]:
        return [cam for v in self.views for cam in v.cameras]


@dataclass
class PredictionRecord:
    clip_id: str
    turn_index: int
    answer: str
    trajectories: list[dict]  # {"points": (H,3) list, "valid": [bool]*H}
    audit: dict | None = None


@dataclass
class AlignedItem:
    gt: GroundTruthTrajectory
    pred_points: np.ndarray | None  # (H, 3) or None for a missing record
    pred_valid: np.ndarray | None


@dataclass
class AlignedTurn:
    clip_id: str
    turn_index: int
    question_type: str
    reference: str
    hypothesis: str
    items: list[AlignedItem]
    missing: bool


# ---------------------------------------------------------------------------
# clip file IO


def _expect(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ClipValidationError(path, message)


def _finite_floats(values, n, path) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    _expect(arr.shape == (n,), path, f"expected {n} numbers")
    _expect(bool(np.all(np.isfinite(arr))), path, "values must be finite")
    return arr


def _pose_from_disk(rotation: np.ndarray, translation: np.ndarray,
                    convention: str, path: str) -> CameraPose:
    r = rotation.reshape(3, 3)
    residual = float(np.max(np.abs(r @ r.T - np.eye(3))))
    _expect(residual <= ROTATION_TOLERANCE, path,
            f"rotation not orthonormal (max |R R^T - I| = {residual:.3e})")
    _expect(float(np.linalg.det(r)) > 0, path, "rotation must have determinant +1")
    if residual > 1e-10:
        # square up so the in-memory 1e-9 invariant holds
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
    if convention == "camera_from_world":
        rot_wc = r.T
        center = -r.T @ translation
    else:
        rot_wc = r
        center = translation
    return CameraPose(rotation=rot_wc, translation=center)


def _pose_to_disk(pose: CameraPose, convention: str) -> tuple[list, list]:
    if convention == "camera_from_world":
        r = pose.rotation.T
        t = -pose.rotation.T @ pose.translation
    else:
        r = pose.rotation
        t = pose.translation
    return [float(x) for x in r.reshape(-1)], [float(x) for x in t]


def load_clip(path) -> ClipSample:
    """Parse and fully validate one clip file.

    Raises ClipValidationError naming the first violated invariant with a
    JSON path into the file.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ClipValidationError("$", f"cannot parse {path}: {exc}") from exc
    _expect(isinstance(data, dict), "$", "clip file must hold a JSON object")
    for key in ("clip_id", "regime", "extrinsic_convention", "timestamps",
                "views", "turns"):
        _expect(key in data, "$", f"missing required key {key!r}")
    _expect(isinstance(data["clip_id"], str) and data["clip_id"], "$.clip_id",
            "clip_id must be a nonempty string")
    _expect(data["regime"] in ("short", "long"), "$.regime",
            f"regime must be 'short' or 'long', got {data['regime']!r}")
    convention = data["extrinsic_convention"]
    _expect(convention in EXTRINSIC_CONVENTIONS, "$.extrinsic_convention",
            f"must be one of {EXTRINSIC_CONVENTIONS}")

    ts = data["timestamps"]
    _expect(isinstance(ts, list) and len(ts) >= 1, "$.timestamps",
            "need at least one timestamp")
    timestamps = _finite_floats(ts, len(ts), "$.timestamps")
    _expect(bool(np.all(np.diff(timestamps) > 0)), "$.timestamps",
            "timestamps must be strictly increasing")
    ts_set = {float(t) for t in timestamps}

    _expect(isinstance(data["views"], list) and len(data["views"]) >= 1,
            "$.views", "need at least one view")
    views = []
    seen_views = set()
    for vi, vdata in enumerate(data["views"]):
        vpath = f"$.views[{vi}]"
        _expect(isinstance(vdata, dict), vpath, "view must be an object")
        _expect(isinstance(vdata.get("view_id"), str) and vdata["view_id"],
                f"{vpath}.view_id", "view_id must be a nonempty string")
        view_id = vdata["view_id"]
        _expect(view_id not in seen_views, f"{vpath}.view_id",
                f"duplicate view_id {view_id!r}")
        seen_views.add(view_id)
        calib = vdata.get("calib")
        _expect(isinstance(calib, list) and len(calib) >= 1, f"{vpath}.calib",
                "need at least one calibration entry")
        cameras = []
        raw = []
        seen_t = set()
        for ci, centry in enumerate(calib):
            cpath = f"{vpath}.calib[{ci}]"
            _expect(isinstance(centry, dict), cpath, "calibration must be an object")
            for key in ("t", "fx", "fy", "cx", "cy", "rotation", "translation"):
                _expect(key in centry, cpath, f"missing key {key!r}")
            t = float(centry["t"])
            _expect(t in ts_set, f"{cpath}.t",
                    f"t={t} does not reference a clip timestamp (dangling calibration)")
            _expect(t not in seen_t, f"{cpath}.t", f"duplicate calibration for t={t}")
            seen_t.add(t)
            fx, fy = float(centry["fx"]), float(centry["fy"])
            _expect(np.isfinite(fx) and fx > 0 and np.isfinite(fy) and fy > 0,
                    cpath, "focal lengths must be finite and positive")
            rotation = _finite_floats(centry["rotation"], 9, f"{cpath}.rotation")
            translation = _finite_floats(centry["translation"], 3,
                                         f"{cpath}.translation")
            pose = _pose_from_disk(rotation, translation, convention,
                                   f"{cpath}.rotation")
            intr = CameraIntrinsics(fx=fx, fy=fy, cx=float(centry["cx"]),
                                    cy=float(centry["cy"]))
            cameras.append(CameraView(view_id=view_id, timestamp=t,
                                      intrinsics=intr, pose=pose))
            raw.append({k: centry[k] for k in
                        ("t", "fx", "fy", "cx", "cy", "rotation", "translation")})
        views.append(ViewCalibration(view_id=view_id, cameras=cameras, raw=raw))

    _expect(isinstance(data["turns"], list), "$.turns", "turns must be a list")
    turns = []
    for ti, tdata in enumerate(data["turns"]):
        tpath = f"$.turns[{ti}]"
        _expect(isinstance(tdata, dict), tpath, "turn must be an object")
        for key in ("turn_index", "question", "question_type", "answer", "targets"):
            _expect(key in tdata, tpath, f"missing key {key!r}")
        _expect(tdata["turn_index"] == ti + 1, f"{tpath}.turn_index",
                f"turn indices must be dense from 1, got {tdata['turn_index']}")
        qtype = tdata["question_type"]
        _expect(qtype in QUESTION_TYPES, f"{tpath}.question_type",
                f"unknown question type {qtype!r}")
        raw_targets = tdata["targets"]
        _expect(isinstance(raw_targets, list), f"{tpath}.targets",
                "targets must be a list")
        if qtype == "scene-level":
            _expect(len(raw_targets) == 0, f"{tpath}.targets",
                    "scene-level turns carry no geometric payload")
        else:
            _expect(len(raw_targets) >= 1, f"{tpath}.targets",
                    f"{qtype} turns require a geometric payload")
        targets = []
        for gi, gdata in enumerate(raw_targets):
            gpath = f"{tpath}.targets[{gi}]"
            for key in ("target_id", "points", "valid"):
                _expect(key in gdata, gpath, f"missing key {key!r}")
            pts = np.asarray(gdata["points"], dtype=np.float64)
            _expect(pts.shape == (HORIZON, 3), f"{gpath}.points",
                    f"points must be {HORIZON}x3")
            _expect(bool(np.all(np.isfinite(pts))), f"{gpath}.points",
                    "points must be finite")
            valid = gdata["valid"]
            _expect(isinstance(valid, list) and len(valid) == HORIZON
                    and all(isinstance(b, bool) for b in valid),
                    f"{gpath}.valid", f"valid must be {HORIZON} booleans")
            _expect(any(valid), f"{gpath}.valid", "at least one step must be valid")
            if qtype != "trajectory":
                _expect(sum(valid) == 1, f"{gpath}.valid",
                        f"{qtype} turns are single-moment: exactly one valid step")
            targets.append(GroundTruthTrajectory(
                target_id=str(gdata["target_id"]), points=pts,
                valid=np.asarray(valid, dtype=bool)))
        turns.append(DialogueTurn(
            turn_index=int(tdata["turn_index"]), question=str(tdata["question"]),
            question_type=qtype, answer=str(tdata["answer"]), targets=targets))

    return ClipSample(
        clip_id=data["clip_id"], regime=data["regime"],
        timestamps=[float(t) for t in timestamps], views=views, turns=turns,
        extrinsic_convention=convention)


def save_clip(clip: ClipSample, path) -> None:
    """Write a clip file; raw calibration payloads are reused verbatim."""
    views_out = []
    for view in clip.views:
        if view.raw is not None:
            calib = view.raw
        else:
            calib = []
            for cam in view.cameras:
                rot, trans = _pose_to_disk(cam.pose, clip.extrinsic_convention)
                calib.append({
                    "t": cam.timestamp,
                    "fx": cam.intrinsics.fx, "fy": cam.intrinsics.fy,
                    "cx": cam.intrinsics.cx, "cy": cam.intrinsics.cy,
                    "rotation": rot, "translation": trans,
                })
        views_out.append({"view_id": view.view_id, "calib": calib})
    turns_out = []
    for turn in clip.turns:
        turns_out.append({
            "turn_index": turn.turn_index,
            "question": turn.question,
            "question_type": turn.question_type,
            "answer": turn.answer,
            "targets": [{
                "target_id": g.target_id,
                "points": [[float(x) for x in row] for row in g.points],
                "valid": [bool(b) for b in g.valid],
            } for g in turn.targets],
        })
    payload = {
        "clip_id": clip.clip_id,
        "regime": clip.regime,
        "extrinsic_convention": clip.extrinsic_convention,
        "timestamps": clip.timestamps,
        "views": views_out,
        "turns": turns_out,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# token and trace sidecars


def save_tokens(tokens: list[VisualToken], clip: ClipSample, path,
                feature_layout: dict | None = None) -> None:
    """Write the evidence sidecar; rays are stored as pixels + calibration key."""
    cams = clip.camera_index()
    rows = []
    for tok in tokens:
        cam = cams.get((tok.view_id, float(tok.timestamp)))
        if cam is None:
            raise ClipValidationError(
                "$.tokens", f"token references uncalibrated "
                f"(view={tok.view_id!r}, t={tok.timestamp})")
        u, v = _ray_to_pixel(tok, cam)
        rows.append({
            "view_id": tok.view_id, "t": tok.timestamp, "patch_id": tok.patch_id,
            "u": u, "v": v, "feature": [float(x) for x in tok.feature],
        })
    payload = {
        "format": "raytraj-tokens",
        "clip_id": clip.clip_id,
        "token_dim": int(tokens[0].feature.size) if tokens else 0,
        "feature_layout": feature_layout or {},
        "tokens": rows,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _ray_to_pixel(tok: VisualToken, cam: CameraView) -> tuple[float, float]:
    d_cam = cam.pose.rotation.T @ tok.ray.direction
    if d_cam[2] <= 0:
        raise ClipValidationError(
            "$.tokens", f"token ray points behind camera {tok.view_id!r}")
    return (float(cam.intrinsics.fx * d_cam[0] / d_cam[2] + cam.intrinsics.cx),
            float(cam.intrinsics.fy * d_cam[1] / d_cam[2] + cam.intrinsics.cy))


def load_tokens(path, clip: ClipSample) -> tuple[list[VisualToken], dict]:
    """Load the token sidecar, rebuilding rays from the clip calibration.

    Returns (tokens, feature_layout). A token referencing an uncalibrated
    (view, timestamp) is a dangling-reference error naming the pair.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ClipValidationError("$", f"cannot parse {path}: {exc}") from exc
    _expect(data.get("format") == "raytraj-tokens", "$.format",
            "not a raytraj-tokens file")
    cams = clip.camera_index()
    token_dim = int(data.get("token_dim", 0))
    tokens = []
    for i, row in enumerate(data.get("tokens", [])):
        rpath = f"$.tokens[{i}]"
        key = (row.get("view_id"), float(row.get("t")))
        cam = cams.get(key)
        _expect(cam is not None, rpath,
                f"dangling reference: no calibration for (view={key[0]!r}, t={key[1]})")
        feature = _finite_floats(row["feature"], token_dim, f"{rpath}.feature")
        tokens.append(VisualToken(
            feature=feature,
            ray=pixel_to_ray(cam.intrinsics, cam.pose, float(row["u"]), float(row["v"])),
            timestamp=float(row["t"]), view_id=str(row["view_id"]),
            patch_id=int(row.get("patch_id", i))))
    return tokens, data.get("feature_layout", {})


def save_trace(trace: dict, path) -> None:
    Path(path).write_text(json.dumps(trace, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_trace(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# corpus helpers


def list_clip_files(directory) -> list[Path]:
    directory = Path(directory)
    out = []
    for p in sorted(directory.glob("*.json")):
        if p.name.endswith(".tokens.json") or p.name.endswith(".trace.json"):
            continue
        if p.name in ("manifest.json",) or p.name.endswith(".manifest.json"):
            continue
        out.append(p)
    return out


def load_corpus(directory, with_tokens: bool = False, with_traces: bool = False):
    """Load every clip (sorted by filename) plus requested sidecars.

    Returns a list of dicts: {"clip", "tokens", "feature_layout", "trace"}.
    """
    entries = []
    for clip_path in list_clip_files(directory):
        clip = load_clip(clip_path)
        entry = {"clip": clip, "tokens": None, "feature_layout": None, "trace": None,
                 "path": clip_path}
        if with_tokens:
            tok_path = clip_path.parent / (clip_path.stem + ".tokens.json")
            if not tok_path.exists():
                raise ClipValidationError("$", f"missing token sidecar {tok_path}")
            entry["tokens"], entry["feature_layout"] = load_tokens(tok_path, clip)
        if with_traces:
            trace_path = clip_path.parent / (clip_path.stem + ".trace.json")
            if not trace_path.exists():
                raise ClipValidationError("$", f"missing trace sidecar {trace_path}")
            entry["trace"] = load_trace(trace_path)
        entries.append(entry)
    return entries


def validate_corpus(directory) -> tuple[dict, list[str]]:
    """Validate every clip in a directory; collect all per-file errors.

    Returns (summary, errors). The summary counts clips, frames (view x
    timestamp images), turns, and the per-type turn histogram.
    """
    files = list_clip_files(directory)
    summary = {
        "clips": 0, "frames": 0, "turns": 0,
        "turns_by_type": {t: 0 for t in QUESTION_TYPES},
        "targets": 0,
    }
    errors = []
    for path in files:
        try:
            clip = load_clip(path)
        except ClipValidationError as exc:
            errors.append(f"{path.name}: {exc}")
            continue
        summary["clips"] += 1
        summary["frames"] += len(clip.timestamps) * len(clip.views)
        summary["turns"] += len(clip.turns)
        for turn in clip.turns:
            summary["turns_by_type"][turn.question_type] += 1
            summary["targets"] += len(turn.targets)
    return summary, errors


# ---------------------------------------------------------------------------
# predictions


def save_predictions(records: list[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {
                "clip_id": rec.clip_id,
                "turn_index": rec.turn_index,
                "answer": rec.answer,
                "trajectories": rec.trajectories,
            }
            if rec.audit is not None:
                row["audit"] = rec.audit
            fh.write(json.dumps(row) + "\n")


def load_predictions(path) -> list[PredictionRecord]:
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"line {ln}: not valid JSON ({exc})") from exc
            for key in ("clip_id", "turn_index", "answer", "trajectories"):
                if key not in row:
                    raise ProtocolError(f"line {ln}: missing key {key!r}")
            key = (row["clip_id"], int(row["turn_index"]))
            if key in seen:
                raise ProtocolError(
                    f"line {ln}: duplicate prediction for clip {key[0]!r} "
                    f"turn {key[1]}")
            seen.add(key)
            records.append(PredictionRecord(
                clip_id=row["clip_id"], turn_index=int(row["turn_index"]),
                answer=str(row["answer"]), trajectories=row["trajectories"],
                audit=row.get("audit")))
    return records


def _parse_pred_trajectory(raw: dict, where: str) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(raw, dict) or "points" not in raw:
        raise ProtocolError(f"{where}: trajectory entry must carry 'points'")
    pts = np.asarray(raw["points"], dtype=np.float64)
    if pts.shape != (HORIZON, 3) or not np.all(np.isfinite(pts)):
        raise ProtocolError(f"{where}: points must be a finite {HORIZON}x3 array")
    valid = raw.get("valid", [True] * HORIZON)
    if len(valid) != HORIZON:
        raise ProtocolError(f"{where}: valid mask must have {HORIZON} entries")
    return pts, np.asarray(valid, dtype=bool)


def align_predictions(
    clips: list[ClipSample],
    predictions: list[PredictionRecord],
) -> tuple[list[AlignedTurn], dict]:
    """Pair predictions with ground truth, positionally within each turn.

    Every prediction must address an existing (clip, turn); duplicates and
    target-count mismatches (surplus or deficit) are protocol errors. A
    turn with no record at all scores as a miss at every valid step and is
    counted in `missing_turns`.
    """
    by_key: dict[tuple[str, int], PredictionRecord] = {}
    clip_keys = {(c.clip_id, t.turn_index) for c in clips for t in c.turns}
    for rec in predictions:
        key = (rec.clip_id, rec.turn_index)
        if key not in clip_keys:
            raise ProtocolError(
                f"prediction for unknown clip/turn {key[0]!r}#{key[1]}")
        if key in by_key:
            raise ProtocolError(
                f"duplicate prediction for clip {key[0]!r} turn {key[1]}")
        by_key[key] = rec

    aligned = []
    stats = {"turns": 0, "missing_turns": 0, "geometric_turns": 0, "pairs": 0}
    for clip in sorted(clips, key=lambda c: c.clip_id):
        for turn in clip.turns:
            rec = by_key.get((clip.clip_id, turn.turn_index))
            where = f"clip {clip.clip_id!r} turn {turn.turn_index}"
            stats["turns"] += 1
            missing = rec is None
            items = []
            if turn.geometric:
                stats["geometric_turns"] += 1
                if missing:
                    stats["missing_turns"] += 1
                    items = [AlignedItem(gt=g, pred_points=None, pred_valid=None)
                             for g in turn.targets]
                else:
                    if len(rec.trajectories) != len(turn.targets):
                        raise ProtocolError(
                            f"{where}: {len(rec.trajectories)} predicted targets "
                            f"but the turn requests {len(turn.targets)} "
                            f"(query-order alignment forbids truncation)")
                    for g, raw in zip(turn.targets, rec.trajectories):
                        pts, valid = _parse_pred_trajectory(raw, where)
                        items.append(AlignedItem(gt=g, pred_points=pts,
                                                 pred_valid=valid))
                stats["pairs"] += len(items)
            else:
                if rec is not None and rec.trajectories:
                    raise ProtocolError(
                        f"{where}: trajectories supplied for a non-geometric turn")
                if missing:
                    stats["missing_turns"] += 1
            aligned.append(AlignedTurn(
                clip_id=clip.clip_id, turn_index=turn.turn_index,
                question_type=turn.question_type, reference=turn.answer,
                hypothesis="" if missing else rec.answer,
                items=items, missing=missing))
    return aligned, stats
