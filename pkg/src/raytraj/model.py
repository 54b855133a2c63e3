"""Parameter container and the per-dialogue forward/backward pipeline.

A dialogue is processed turn by turn: the question is hash-embedded, the
slot is updated from (previous slot, pooled evidence, question embedding),
queries are derived, and geometric turns decode an H-step trajectory.
Evidence pooling reuses the previous geometric turn's attention (averaged
over steps); the first turn, and every turn under history mode "none",
pools the unweighted token mean.

Cross-turn propagation is stop-gradient: the backward pass treats the
incoming slot vector and the stored pooling attention as constants. The
token conditioning is shared by all turns of a clip, so feature gradients
accumulate across turns before the encoding backward runs once.

Checkpoints are a single file: one JSON header line (format, dims,
frequencies, config echo, block table) followed by the raw little-endian
float64 parameter arrays concatenated in block-table order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderParams, HORIZON, StepAttention, TrajectoryPrediction, step_backward, step_forward
from .encoding import (
    FourierTimeConfig,
    RtgeParams,
    VisualToken,
    condition_features,
    condition_features_backward,
)
from .state import SlotUpdateParams, embed_question, update_slot_backward, update_slot_forward

__all__ = [
    "ModelDims",
    "ModelParams",
    "TokenArrays",
    "TurnTask",
    "TrainSample",
    "dialogue_forward",
    "dialogue_backward",
    "stack_tokens",
    "zero_grads",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "raytraj-checkpoint"
HISTORY_MODES = ("none", "self", "gold")


@dataclass(frozen=True)
class ModelDims:
    token_dim: int = 32
    num_frequencies: int = 8
    hidden: int = 32
    horizon: int = HORIZON

    def __post_init__(self):
        if min(self.token_dim, self.num_frequencies, self.hidden, self.horizon) <= 0:
            raise ValueError("all dimensions must be positive")


@dataclass
class ModelParams:
    """All trainable blocks plus the (fixed) time frequency ladder."""

    dims: ModelDims
    time_cfg: FourierTimeConfig
    rtge: RtgeParams
    slot: SlotUpdateParams
    w_sem: np.ndarray
    w_kin: np.ndarray
    decoder: DecoderParams

    def __post_init__(self):
        self.w_sem = np.asarray(self.w_sem, dtype=np.float64)
        self.w_kin = np.asarray(self.w_kin, dtype=np.float64)
        d = self.dims.token_dim
        if self.w_sem.shape != (d, d) or self.w_kin.shape != (d, d):
            raise ValueError(f"query matrices must be ({d}, {d})")

    @classmethod
    def init(cls, dims: ModelDims, time_cfg: FourierTimeConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng([int(seed), 0xC0DE])
        d = dims.token_dim
        return cls(
            dims=dims,
            time_cfg=time_cfg,
            rtge=RtgeParams.init(d, dims.num_frequencies, rng),
            slot=SlotUpdateParams.init(d, rng),
            w_sem=rng.normal(0.0, 0.5 / np.sqrt(d), (d, d)),
            w_kin=rng.normal(0.0, 0.5 / np.sqrt(d), (d, d)),
            decoder=DecoderParams.init(d, dims.hidden, rng, dims.horizon),
        )

    def blocks(self) -> dict[str, np.ndarray]:
        """Live views of every parameter array, in checkpoint order."""
        out = {
            "ray_w": self.rtge.ray_w, "ray_b": self.rtge.ray_b,
            "time_w": self.rtge.time_w, "time_b": self.rtge.time_b,
            "slot_cand_w": self.slot.cand_w, "slot_cand_b": self.slot.cand_b,
            "slot_gate_w": self.slot.gate_w, "slot_gate_b": self.slot.gate_b,
            "w_sem": self.w_sem, "w_kin": self.w_kin,
        }
        for h, head in enumerate(self.decoder.score_heads):
            out[f"score{h}_w1"] = head.w1
            out[f"score{h}_b1"] = head.b1
            out[f"score{h}_w2"] = head.w2
            out[f"score{h}_b2"] = head.b2
        out["res_w1"] = self.decoder.residual.w1
        out["res_b1"] = self.decoder.residual.b1
        out["res_w2"] = self.decoder.residual.w2
        out["res_b2"] = self.decoder.residual.b2
        return out

    def copy(self) -> "ModelParams":
        import copy as _copy
        return _copy.deepcopy(self)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.blocks().items()}


# ---------------------------------------------------------------------------
# token stacking


@dataclass
class TokenArrays:
    """Stacked per-clip token data (R tokens)."""

    features: np.ndarray  # (R, d) raw evidence features
    ray6: np.ndarray  # (R, 6) [direction; moment]
    dirs: np.ndarray  # (R, 3)
    origins: np.ndarray  # (R, 3)
    times: np.ndarray  # (R,)

    @property
    def count(self) -> int:
        return int(self.features.shape[0])

    @property
    def token_dim(self) -> int:
        return int(self.features.shape[1])


def stack_tokens(tokens: list[VisualToken]) -> TokenArrays:
    if not tokens:
        raise ValueError("clip has no evidence tokens")
    return TokenArrays(
        features=np.stack([t.feature for t in tokens]),
        ray6=np.stack([t.ray.descriptor for t in tokens]),
        dirs=np.stack([t.ray.direction for t in tokens]),
        origins=np.stack([t.ray.origin for t in tokens]),
        times=np.array([t.timestamp for t in tokens], dtype=np.float64),
    )


@dataclass
class TurnTask:
    """Model-level description of one dialogue turn."""

    question: str
    geometric: bool
    question_type: str = "trajectory"
    n_targets: int = 1
    gt_points: np.ndarray | None = None  # (H, 3) primary target, training only
    gt_valid: np.ndarray | None = None  # (H,) bool
    target_key: str | None = None  # identity key for the consistency loss
    gold_pool: np.ndarray | None = None  # (R,) gt-conditioned pooling weights


@dataclass
class TrainSample:
    clip_id: str
    tokens: TokenArrays
    turns: list[TurnTask]


# ---------------------------------------------------------------------------
# dialogue forward / backward


@dataclass
class DecodedTurn:
    """Raw decode outputs for one (turn, target); validation-free hot path."""

    points: np.ndarray  # (H, 3)
    anchors: np.ndarray  # (H, 3)
    alphas: np.ndarray  # (H, R)
    fallback: np.ndarray  # (H,) bool

    def to_prediction(self) -> TrajectoryPrediction:
        attn = tuple(StepAttention(weights=self.alphas[h], step=h + 1)
                     for h in range(self.points.shape[0]))
        return TrajectoryPrediction(points=self.points, anchors=self.anchors,
                                    attention=attn, fallback=self.fallback)


@dataclass
class TurnRecord:
    slot: np.ndarray
    slot_cache: dict
    pool_w: np.ndarray
    decoded: DecodedTurn | None
    extra_decoded: list[DecodedTurn]
    step_caches: list[dict] | None
    geometric: bool


@dataclass
class DialogueRecord:
    feats: np.ndarray  # (R, d) conditioned features
    enc_cache: dict
    turns: list[TurnRecord]
    token_arrays: TokenArrays


def _decode_with_slot(params: ModelParams, slot_vec: np.ndarray, feats: np.ndarray,
                      tok: TokenArrays, anchor_overrides: dict | None,
                      turn_index: int):
    q_sem = params.w_sem @ slot_vec
    q_kin = params.w_kin @ slot_vec
    horizon = params.dims.horizon
    points = np.empty((horizon, 3))
    anchors = np.empty((horizon, 3))
    alphas = np.empty((horizon, tok.count))
    fallback = np.zeros(horizon, dtype=bool)
    caches = []
    for h in range(horizon):
        override = None
        if anchor_overrides is not None:
            override = anchor_overrides.get((turn_index, h))
        refined, anchor, alpha, fb, cache = step_forward(
            params.decoder, h, q_sem, q_kin, feats, tok.dirs, tok.origins,
            anchor_override=override)
        points[h] = refined
        anchors[h] = anchor
        alphas[h] = alpha
        fallback[h] = fb
        caches.append(cache)
    decoded = DecodedTurn(points=points, anchors=anchors, alphas=alphas,
                          fallback=fallback)
    return decoded, caches


def dialogue_forward(
    params: ModelParams,
    tok: TokenArrays,
    turns: list[TurnTask],
    history: str = "self",
    anchor_overrides: dict | None = None,
    state_overrides: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> DialogueRecord:
    """Run every turn of one clip's dialogue in order.

    `state_overrides`, when given, clamps each turn's recurrent inputs
    (previous slot vector, pooling weights) to constants. The training
    gradient treats cross-turn state as stop-gradient, so finite-difference
    probes must evaluate the loss with that state frozen at its base value;
    this argument exists for them.
    """
    if history not in HISTORY_MODES:
        raise ValueError(f"history must be one of {HISTORY_MODES}, got {history!r}")
    if tok.token_dim != params.dims.token_dim:
        raise ValueError(
            f"token dim {tok.token_dim} does not match model dim {params.dims.token_dim}")
    d = params.dims.token_dim
    feats, enc_cache = condition_features(
        tok.features, tok.ray6, tok.times, params.rtge, params.time_cfg)
    uniform = np.full(tok.count, 1.0 / tok.count)

    slot_vec = np.zeros(d)
    carry_pool: np.ndarray | None = None  # pooling weights from last geometric turn
    records: list[TurnRecord] = []
    for ti, turn in enumerate(turns):
        if history == "none":
            prev_vec = np.zeros(d)
            pool_w = uniform
        else:
            prev_vec = slot_vec
            pool_w = carry_pool if carry_pool is not None else uniform
        if state_overrides is not None:
            prev_vec, pool_w = state_overrides[ti]
        pooled = pool_w @ feats
        emb = embed_question(turn.question, d).vector
        new_vec, slot_cache = update_slot_forward(prev_vec, pooled, emb, params.slot)

        decoded = None
        step_caches = None
        extras: list[DecodedTurn] = []
        if turn.geometric:
            decoded, step_caches = _decode_with_slot(
                params, new_vec, feats, tok, anchor_overrides, ti)
            for j in range(1, turn.n_targets):
                # ephemeral per-target slot: question embedding augmented with
                # the positional request index (no identity leak)
                emb_j = embed_question(f"{turn.question} slot {j}", d).vector
                vec_j, _ = update_slot_forward(prev_vec, pooled, emb_j, params.slot)
                dec_j, _ = _decode_with_slot(params, vec_j, feats, tok, None, ti)
                extras.append(dec_j)
            if history == "gold" and turn.gold_pool is not None:
                carry_pool = turn.gold_pool
            else:
                carry_pool = decoded.alphas.mean(axis=0)
        records.append(TurnRecord(
            slot=new_vec, slot_cache=slot_cache, pool_w=pool_w,
            decoded=decoded, extra_decoded=extras,
            step_caches=step_caches, geometric=turn.geometric))
        slot_vec = new_vec
    return DialogueRecord(feats=feats, enc_cache=enc_cache, turns=records,
                          token_arrays=tok)


def dialogue_backward(
    params: ModelParams,
    record: DialogueRecord,
    d_points: list[np.ndarray | None],
    d_slots: list[np.ndarray | None],
    grads: dict[str, np.ndarray],
    detach_anchor: bool = False,
) -> None:
    """Accumulate parameter gradients for one clip into `grads`.

    d_points[i] is dL/d(predicted points) for turn i (H, 3) or None;
    d_slots[i] is a direct dL/d(slot vector) contribution (identity loss).
    Cross-turn slot propagation is stop-gradient, so turns are independent
    given the shared conditioned features.
    """
    d = params.dims.token_dim
    d_feats = np.zeros_like(record.feats)
    for ti in reversed(range(len(record.turns))):
        rec = record.turns[ti]
        d_slot = np.zeros(d)
        if d_slots[ti] is not None:
            d_slot += d_slots[ti]
        if rec.geometric and d_points[ti] is not None:
            dp = d_points[ti]
            d_q_sem = np.zeros(d)
            d_q_kin = np.zeros(d)
            for h in reversed(range(params.dims.horizon)):
                step_grads, dqs, dqk, dF = step_backward(
                    params.decoder, h, rec.step_caches[h], dp[h],
                    detach_anchor, d)
                d_q_sem += dqs
                d_q_kin += dqk
                d_feats += dF
                for k, v in step_grads["score"].items():
                    grads[f"score{h}_{k}"] += v
                for k, v in step_grads["res"].items():
                    grads[f"res_{k}"] += v
            grads["w_sem"] += np.outer(d_q_sem, rec.slot)
            grads["w_kin"] += np.outer(d_q_kin, rec.slot)
            d_slot += params.w_sem.T @ d_q_sem + params.w_kin.T @ d_q_kin
        if np.any(d_slot):
            slot_grads, _d_prev, d_pool, _d_emb = update_slot_backward(
                rec.slot_cache, d_slot, params.slot)
            for k, v in slot_grads.items():
                grads[f"slot_{k}"] += v
            d_feats += np.outer(rec.pool_w, d_pool)
    enc_grads = condition_features_backward(record.enc_cache, d_feats)
    for k, v in enc_grads.items():
        grads[k] += v


# ---------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(params: ModelParams, path, header_extra: dict | None = None) -> None:
    blocks = params.blocks()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dims": {
            "token_dim": params.dims.token_dim,
            "num_frequencies": params.dims.num_frequencies,
            "hidden": params.dims.hidden,
            "horizon": params.dims.horizon,
        },
        "frequencies": [float(w) for w in params.time_cfg.frequencies],
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks.items()],
    }
    if header_extra:
        header.update(header_extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        raw = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    dims = ModelDims(**header["dims"])
    time_cfg = FourierTimeConfig(np.array(header["frequencies"]))
    params = ModelParams.init(dims, time_cfg, seed=0)
    offset = 0
    blocks = params.blocks()
    for spec in header["blocks"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if name not in blocks or blocks[name].shape != shape:
            raise ValueError(f"checkpoint block {name!r} with shape {shape} "
                             f"does not match the model layout")
        n = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        blocks[name][...] = chunk.reshape(shape)
        offset += n * 8
    if offset != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - offset} trailing bytes")
    return params, header
