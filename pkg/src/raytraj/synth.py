"""Synthetic multiview scenes and dialogues with exact ground truth.

Cameras sit on a ring looking at the arena center; targets follow a
constant-velocity or ballistic model; every (target, view, timestamp)
emits one evidence token whose ray points at the (optionally jittered)
target and whose feature encodes the target identity plus distance-coded
channels. All randomness comes from a PCG64 generator seeded per
(seed, clip_index); nothing touches global RNG state.

Feature layout (documented in every tokens sidecar header):

    [0 : max_targets)            identity one-hot * identity_scale
    [max_targets]                camera-to-target distance / distance_scale
    [max_targets + 1]            constant 1.0 bias channel
    [max_targets + 2 : d)        zeros

Distractor tokens carry random rays, a zero identity block, and the bias
channel. Gaussian noise of scale sigma_feat is added to every channel when
configured.

The module also hosts the brute-force triangulation oracle (dense grid
plus coordinate-descent refinement) used to cross-check the closed-form
solver throughout the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import bench
from .decoder import HORIZON
from .encoding import VisualToken
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    PluckerRay,
    make_plucker,
    pixel_to_ray,
    project_point,
)

__all__ = [
    "SceneConfig",
    "CorpusConfig",
    "SyntheticScene",
    "GenerationError",
    "OracleExtentError",
    "gen_scene",
    "gen_dialogue",
    "gen_corpus",
    "brute_force_triangulate",
    "TARGET_DESCRIPTORS",
    "QUESTION_TYPES",
]

GRAVITY = 9.81  # m/s^2, -z
MOTION_MODELS = ("constant-velocity", "ballistic")
QUESTION_TYPES = ("identity", "trajectory", "relation", "motion trend", "scene-level")
TARGET_DESCRIPTORS = ("red", "blue", "green", "amber", "violet", "teal", "coral", "onyx")


class GenerationError(RuntimeError):
    """Scene geometry cannot produce the requested evidence."""


class OracleExtentError(ValueError):
    """The brute-force grid optimum landed on the search boundary."""


@dataclass
class SceneConfig:
    seed: int = 0
    num_views: int = 4
    num_timestamps: int = 8
    num_targets: int = 2
    motion: str = "constant-velocity"
    sigma_feat: float = 0.0
    sigma_ray: float = 0.0  # radians
    arena_extent: float = 6.0  # half-width of the square arena footprint
    clip_duration: float = 3.5  # seconds
    camera_radius: float = 14.0
    camera_height: float = 6.0
    image_size: int = 640
    focal: float = 600.0
    token_dim: int = 32
    max_targets: int = 8
    num_distractors: int = 8
    token_dropout: float = 0.0
    checkpoint_mode: str = "aligned"  # or "midpoint"
    regime: str = "short"  # or "long"
    segment_fraction: float = 0.5  # long regime: trailing fraction of the clip
    identity_scale: float = 3.0
    distance_scale: float = 20.0

    def validate(self) -> None:
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if self.num_timestamps < HORIZON:
            raise ValueError(f"num_timestamps must be >= {HORIZON}")
        if not (1 <= self.num_targets <= self.max_targets):
            raise ValueError("num_targets must lie in [1, max_targets]")
        if self.max_targets > len(TARGET_DESCRIPTORS):
            raise ValueError(f"max_targets must be <= {len(TARGET_DESCRIPTORS)}")
        if self.motion not in MOTION_MODELS:
            raise ValueError(f"motion must be one of {MOTION_MODELS}, got {self.motion!r}")
        if self.checkpoint_mode not in ("aligned", "midpoint"):
            raise ValueError(f"checkpoint_mode must be 'aligned' or 'midpoint', "
                             f"got {self.checkpoint_mode!r}")
        if self.regime not in ("short", "long"):
            raise ValueError(f"regime must be 'short' or 'long', got {self.regime!r}")
        if self.sigma_feat < 0 or self.sigma_ray < 0 or self.token_dropout < 0:
            raise ValueError("noise levels must be nonnegative")
        if not (0.0 < self.segment_fraction <= 1.0):
            raise ValueError("segment_fraction must lie in (0, 1]")
        if self.token_dim < self.max_targets + 2:
            raise ValueError("token_dim must leave room for identity block + "
                             "distance + bias channels")
        if self.clip_duration <= 0 or self.arena_extent <= 0:
            raise ValueError("clip_duration and arena_extent must be positive")

    @property
    def feature_layout(self) -> dict:
        return {
            "identity_block": [0, self.max_targets],
            "distance_channel": self.max_targets,
            "bias_channel": self.max_targets + 1,
            "identity_scale": self.identity_scale,
            "distance_scale": self.distance_scale,
        }


@dataclass
class CorpusConfig:
    num_clips: int = 8
    num_turns: int = 5
    scene: SceneConfig = field(default_factory=SceneConfig)
    type_mix: dict[str, int] | None = None

    def validate(self) -> None:
        if self.num_clips < 1 or self.num_turns < 1:
            raise ValueError("num_clips and num_turns must be >= 1")
        self.scene.validate()
        if self.type_mix is not None:
            for k, v in self.type_mix.items():
                if k not in QUESTION_TYPES:
                    raise ValueError(f"unknown question type {k!r} in type_mix")
                if v < 0:
                    raise ValueError("type_mix counts must be nonnegative")
            if sum(self.type_mix.values()) < 1:
                raise ValueError("type_mix requests no turns")


@dataclass
class SyntheticScene:
    clip: "bench.ClipSample"
    tokens: list[VisualToken]
    trace: dict
    # generation internals used by gen_dialogue
    config: SceneConfig
    positions: np.ndarray  # (num_targets, M, 3) at observation timestamps
    checkpoint_times: np.ndarray  # (H,)
    checkpoint_positions: np.ndarray  # (num_targets, H, 3)
    target_ids: list[str]
    descriptors: list[str]


def _rng_for_clip(seed: int, clip_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, clip_index])))


def _look_at(center: np.ndarray, target: np.ndarray) -> CameraPose:
    """World-from-camera rotation for a camera at `center` looking at `target`.

    Camera x points image-right, y image-down, z forward (toward target).
    """
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise GenerationError("camera looks straight along z; ring placement is wrong")
    right /= n
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)
    if np.linalg.det(r) < 0:  # enforce a proper rotation
        right = -right
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd], axis=1)
    # square up against accumulated float error so the 1e-9 invariant holds
    u, _, vt = np.linalg.svd(r)
    return CameraPose(rotation=u @ vt, translation=center)


def _target_motion(cfg: SceneConfig, rng: np.random.Generator):
    """Sample (position(t) callable) per target, guaranteed inside the arena."""
    e = cfg.arena_extent
    t_end = cfg.clip_duration
    makers = []
    for _ in range(cfg.num_targets):
        start = np.array([rng.uniform(-e, e), rng.uniform(-e, e), rng.uniform(0.5, 2.5)])
        end = np.array([rng.uniform(-e, e), rng.uniform(-e, e), rng.uniform(0.5, 2.5)])
        if cfg.motion == "constant-velocity":
            vel = (end - start) / t_end

            def pos(t, s=start, v=vel):
                return s + v * t
        else:  # ballistic: launch so the target lands at start height at t_end
            vxy = (end[:2] - start[:2]) / t_end
            vz0 = 0.5 * GRAVITY * t_end

            def pos(t, s=start, v=vxy, vz=vz0):
                return np.array([
                    s[0] + v[0] * t,
                    s[1] + v[1] * t,
                    s[2] + vz * t - 0.5 * GRAVITY * t * t,
                ])
        makers.append(pos)
    return makers


def _checkpoint_times(cfg: SceneConfig, timestamps: np.ndarray) -> np.ndarray:
    """H decode checkpoints, uniformly spaced over the clip (or its segment).

    aligned: snapped onto observation timestamps. midpoint: midpoints of
    uniformly strided observation intervals (exactly uniform when the
    window holds H+1 observations).
    """
    if cfg.regime == "long":
        t_start = timestamps[-1] * (1.0 - cfg.segment_fraction)
        window = timestamps[timestamps >= t_start - 1e-12]
    else:
        window = timestamps
    if window.size < 2:
        raise GenerationError("checkpoint window holds fewer than 2 observations")
    if cfg.checkpoint_mode == "aligned":
        if window.size < HORIZON:
            raise GenerationError(
                f"aligned checkpoints need >= {HORIZON} observations in the window")
        idx = np.round(np.linspace(0, window.size - 1, HORIZON)).astype(int)
        return window[idx]
    idx = np.round(np.linspace(0, window.size - 2, HORIZON)).astype(int)
    return 0.5 * (window[idx] + window[idx + 1])


def _jitter_direction(d_cam: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a camera-frame direction by angle ~ N(0, sigma) about a random
    axis perpendicular to it."""
    angle = rng.normal(0.0, sigma)
    raw = rng.normal(size=3)
    axis = raw - d_cam * (d_cam @ raw) / (d_cam @ d_cam)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return d_cam
    axis /= n
    c, s = math.cos(angle), math.sin(angle)
    return d_cam * c + np.cross(axis, d_cam) * s + axis * (axis @ d_cam) * (1 - c)


def gen_scene(cfg: SceneConfig, clip_index: int = 0) -> SyntheticScene:
    """Generate one clip: cameras, target motion, evidence tokens, trace."""
    cfg.validate()
    rng = _rng_for_clip(cfg.seed, clip_index)
    m = cfg.num_timestamps
    timestamps = np.linspace(0.0, cfg.clip_duration, m)
    aim = np.array([0.0, 0.0, 1.5])  # cameras look at the arena mid-height

    intr = CameraIntrinsics(fx=cfg.focal, fy=cfg.focal,
                            cx=cfg.image_size / 2.0, cy=cfg.image_size / 2.0)
    views: list[tuple[str, CameraPose]] = []
    for vi in range(cfg.num_views):
        theta = 2.0 * math.pi * vi / cfg.num_views + 0.3
        center = np.array([cfg.camera_radius * math.cos(theta),
                           cfg.camera_radius * math.sin(theta),
                           cfg.camera_height])
        views.append((f"cam{vi}", _look_at(center, aim)))

    motion = _target_motion(cfg, rng)
    positions = np.stack([
        np.stack([motion[k](t) for t in timestamps]) for k in range(cfg.num_targets)
    ])  # (targets, M, 3)
    checkpoint_times = _checkpoint_times(cfg, timestamps)
    checkpoint_positions = np.stack([
        np.stack([motion[k](t) for t in checkpoint_times]) for k in range(cfg.num_targets)
    ])

    target_ids = [f"obj_{rng.integers(0, 1 << 32):08x}" for _ in range(cfg.num_targets)]
    descriptors = [TARGET_DESCRIPTORS[k] for k in range(cfg.num_targets)]

    tokens: list[VisualToken] = []
    patch_counter = 0
    for k in range(cfg.num_targets):
        for mi, t in enumerate(timestamps):
            p = positions[k, mi]
            visible_somewhere = False
            for view_id, pose in views:
                depth = (pose.rotation.T @ (p - pose.translation))[2]
                if depth <= 0.1:
                    continue
                visible_somewhere = True
                if cfg.token_dropout > 0 and rng.random() < cfg.token_dropout:
                    continue
                d_cam = pose.rotation.T @ (p - pose.translation)
                d_cam = d_cam / d_cam[2]
                if cfg.sigma_ray > 0:
                    d_cam = _jitter_direction(d_cam, cfg.sigma_ray, rng)
                    if d_cam[2] <= 1e-6:
                        continue
                    d_cam = d_cam / d_cam[2]
                u = intr.fx * d_cam[0] + intr.cx
                v = intr.fy * d_cam[1] + intr.cy
                feat = np.zeros(cfg.token_dim)
                feat[k] = cfg.identity_scale
                dist = float(np.linalg.norm(p - pose.translation))
                feat[cfg.max_targets] = dist / cfg.distance_scale
                feat[cfg.max_targets + 1] = 1.0
                if cfg.sigma_feat > 0:
                    feat = feat + rng.normal(0.0, cfg.sigma_feat, cfg.token_dim)
                tokens.append(VisualToken(
                    feature=feat,
                    ray=pixel_to_ray(intr, dict(views)[view_id], u, v),
                    timestamp=float(t), view_id=view_id, patch_id=patch_counter))
                patch_counter += 1
            if not visible_somewhere:
                raise GenerationError(
                    f"target {k} at t={t:.3f}s is behind every camera; "
                    f"widen the ring or shrink the arena")
    for _ in range(cfg.num_distractors):
        view_id, pose = views[rng.integers(0, len(views))]
        t = float(timestamps[rng.integers(0, m)])
        u = rng.uniform(0.0, cfg.image_size)
        v = rng.uniform(0.0, cfg.image_size)
        feat = np.zeros(cfg.token_dim)
        feat[cfg.max_targets + 1] = 1.0
        if cfg.sigma_feat > 0:
            feat = feat + rng.normal(0.0, cfg.sigma_feat, cfg.token_dim)
        tokens.append(VisualToken(
            feature=feat, ray=pixel_to_ray(intr, pose, u, v),
            timestamp=t, view_id=view_id, patch_id=patch_counter))
        patch_counter += 1

    clip_id = f"clip_{cfg.seed:04d}_{clip_index:04d}"
    view_calibs = [
        bench.ViewCalibration(
            view_id=view_id,
            cameras=[CameraView(view_id=view_id, timestamp=float(t),
                                intrinsics=intr, pose=pose) for t in timestamps],
        )
        for view_id, pose in views
    ]
    clip = bench.ClipSample(
        clip_id=clip_id, regime=cfg.regime,
        timestamps=[float(t) for t in timestamps],
        views=view_calibs, turns=[],
    )
    trace = {
        "format": "raytraj-trace",
        "clip_id": clip_id,
        "identity_by_target": {tid: k for k, tid in enumerate(target_ids)},
        "descriptor_by_target": {tid: descriptors[k] for k, tid in enumerate(target_ids)},
        "checkpoint_times": [float(t) for t in checkpoint_times],
        "positions": {tid: positions[k].tolist() for k, tid in enumerate(target_ids)},
        "checkpoint_positions": {
            tid: checkpoint_positions[k].tolist() for k, tid in enumerate(target_ids)},
        "config": asdict(cfg),
    }
    return SyntheticScene(
        clip=clip, tokens=tokens, trace=trace, config=cfg,
        positions=positions, checkpoint_times=checkpoint_times,
        checkpoint_positions=checkpoint_positions,
        target_ids=target_ids, descriptors=descriptors)


# ---------------------------------------------------------------------------
# dialogue generation


def _fmt_point(p: np.ndarray) -> str:
    return f"({p[0]:.1f}, {p[1]:.1f}, {p[2]:.1f})"


def _make_turn(scene: SyntheticScene, turn_index: int, qtype: str,
               primary: int, other: int, checkpoint: int,
               follow_up: bool, segment_note: str) -> "bench.DialogueTurn":
    cfg = scene.config
    name = scene.descriptors[primary]
    tid = scene.target_ids[primary]
    pts = scene.checkpoint_positions[primary]
    h = checkpoint

    if qtype == "identity":
        question = f"Locate target {name} at checkpoint {h + 1}{segment_note}."
        answer = (f"Target {name} is near {_fmt_point(pts[h])} "
                  f"at checkpoint {h + 1}.")
        valid = [i == h for i in range(HORIZON)]
        targets = [bench.GroundTruthTrajectory(target_id=tid, points=pts.copy(),
                                               valid=np.array(valid))]
    elif qtype == "trajectory":
        subject = "its" if follow_up else f"target {name}'s"
        question = f"Trace {subject} full path across all four checkpoints{segment_note}."
        answer = (f"Target {name} moves from {_fmt_point(pts[0])} "
                  f"to {_fmt_point(pts[-1])}.")
        targets = [bench.GroundTruthTrajectory(target_id=tid, points=pts.copy(),
                                               valid=np.ones(HORIZON, dtype=bool))]
    elif qtype == "relation":
        other_name = scene.descriptors[other]
        other_pts = scene.checkpoint_positions[other]
        side = "left" if pts[h][0] < other_pts[h][0] else "right"
        question = (f"Where is target {name} at checkpoint {h + 1} relative to "
                    f"target {other_name}{segment_note}?")
        answer = (f"Target {name} is to the {side} of target {other_name}, "
                  f"near {_fmt_point(pts[h])}.")
        valid = [i == h for i in range(HORIZON)]
        targets = [bench.GroundTruthTrajectory(target_id=tid, points=pts.copy(),
                                               valid=np.array(valid))]
    elif qtype == "motion trend":
        subject = "it" if follow_up else f"target {name}"
        question = (f"Is {subject} speeding up or steady, and where does it end "
                    f"at checkpoint {HORIZON}{segment_note}?")
        trend = ("keeps a steady pace" if cfg.motion == "constant-velocity"
                 else "arcs under gravity")
        answer = f"Target {name} {trend} and ends near {_fmt_point(pts[-1])}."
        valid = [i == HORIZON - 1 for i in range(HORIZON)]
        targets = [bench.GroundTruthTrajectory(target_id=tid, points=pts.copy(),
                                               valid=np.array(valid))]
    elif qtype == "scene-level":
        question = f"How many targets are moving in the scene{segment_note}?"
        answer = (f"There are {cfg.num_targets} moving targets in view of "
                  f"{cfg.num_views} cameras.")
        targets = []
    else:
        raise ValueError(f"unknown question type {qtype!r}")
    return bench.DialogueTurn(turn_index=turn_index, question=question,
                              question_type=qtype, answer=answer, targets=targets)


def gen_dialogue(
    scene: SyntheticScene,
    num_turns: int,
    type_mix: dict[str, int] | None = None,
) -> list["bench.DialogueTurn"]:
    """Append a templated dialogue to the scene's clip and return the turns.

    Turn plan: question types cycle in a canonical order (honoring type_mix
    counts when given). A trajectory or motion-trend turn immediately after
    a turn that named a target becomes a follow-up: its question says "it"
    instead of the target name, so answering requires carried state.
    Identity turns cycle through distinct targets; requesting more identity
    turns than targets is a config error.
    """
    cfg = scene.config
    rng = _rng_for_clip(cfg.seed, 1_000_000 + int(scene.clip.clip_id.split("_")[-1], 10))
    if type_mix is None:
        order = ["identity", "trajectory", "relation", "motion trend", "scene-level"]
        plan = [order[i % len(order)] for i in range(num_turns)]
    else:
        if type_mix.get("identity", 0) > cfg.num_targets:
            raise ValueError(
                f"type_mix requests {type_mix['identity']} identity turns but the "
                f"scene has only {cfg.num_targets} targets")
        plan = []
        remaining = dict(type_mix)
        order = [t for t in QUESTION_TYPES if remaining.get(t, 0) > 0]
        while any(v > 0 for v in remaining.values()):
            for t in order:
                if remaining.get(t, 0) > 0:
                    plan.append(t)
                    remaining[t] -= 1
        plan = plan[:num_turns] if num_turns < len(plan) else plan

    segment_note = " during the highlighted segment" if cfg.regime == "long" else ""
    turns = []
    last_named: int | None = None
    identity_used = 0
    for i, qtype in enumerate(plan):
        primary = int(rng.integers(0, cfg.num_targets))
        follow_up = False
        if qtype == "identity":
            if type_mix is None and identity_used >= cfg.num_targets:
                qtype = "relation" if cfg.num_targets > 1 else "trajectory"
            else:
                primary = identity_used % cfg.num_targets
                identity_used += 1
        if qtype in ("trajectory", "motion trend") and last_named is not None:
            primary = last_named
            follow_up = True
        other = (primary + 1) % cfg.num_targets if cfg.num_targets > 1 else primary
        checkpoint = int(rng.integers(0, HORIZON))
        turn = _make_turn(scene, len(scene.clip.turns) + 1, qtype, primary, other,
                          checkpoint, follow_up, segment_note)
        scene.clip.turns.append(turn)
        turns.append(turn)
        if qtype in ("identity", "relation"):
            last_named = primary
        elif qtype == "scene-level":
            last_named = None
    return turns


def gen_corpus(cfg: CorpusConfig) -> list[SyntheticScene]:
    """Deterministically generate `num_clips` scenes with dialogues."""
    cfg.validate()
    scenes = []
    for ci in range(cfg.num_clips):
        scene = gen_scene(cfg.scene, clip_index=ci)
        gen_dialogue(scene, cfg.num_turns, cfg.type_mix)
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# brute-force triangulation oracle


def _bundle_objective(points: np.ndarray, dirs: np.ndarray, origins: np.ndarray,
                      weights: np.ndarray) -> np.ndarray:
    """sum_r w_r ||(I - d_r d_r^T)(p - o_r)||^2 for each row of `points`."""
    rel = points[:, None, :] - origins[None, :, :]  # (N, R, 3)
    along = np.einsum("nri,ri->nr", rel, dirs)
    sq = np.einsum("nri,nri->nr", rel, rel) - along * along
    return sq @ weights


def brute_force_triangulate(
    rays: list[PluckerRay],
    weights,
    grid_extent: tuple,
    grid_step: float,
) -> np.ndarray:
    """Dense grid search over the weighted objective, then coordinate descent.

    grid_extent is (lo, hi) corner vectors covering the optimum. The best
    grid cell must be interior (otherwise OracleExtentError); coordinate
    descent then refines with exact 1-D parabola steps until the sweep
    moves less than 1e-6. Deliberately independent of the closed-form
    normal-equation solver it cross-checks.
    """
    dirs = np.stack([r.direction for r in rays])
    origins = np.stack([r.origin for r in rays])
    w = np.asarray(weights, dtype=np.float64)
    lo = np.asarray(grid_extent[0], dtype=np.float64)
    hi = np.asarray(grid_extent[1], dtype=np.float64)
    axes = [np.arange(lo[k], hi[k] + grid_step * 0.5, grid_step) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = _bundle_objective(grid, dirs, origins, w)
    best = int(np.argmin(vals))
    shape = tuple(len(a) for a in axes)
    idx = np.unravel_index(best, shape)
    for k in range(3):
        if idx[k] == 0 or idx[k] == shape[k] - 1:
            raise OracleExtentError(
                f"grid optimum on the boundary of axis {k}; widen grid_extent")
    p = grid[best].copy()

    def f(point):
        return float(_bundle_objective(point[None, :], dirs, origins, w)[0])

    delta = grid_step
    for _ in range(200):
        moved = 0.0
        for k in range(3):
            e = np.zeros(3)
            e[k] = delta
            f0, fp, fm = f(p), f(p + e), f(p - e)
            denom = fp - 2.0 * f0 + fm
            if denom <= 0:
                continue
            step = 0.5 * delta * (fm - fp) / denom
            p[k] += step
            moved = max(moved, abs(step))
        if moved < 1e-6:
            break
    return p
