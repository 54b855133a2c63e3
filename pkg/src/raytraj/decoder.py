"""Anchor-plus-residual trajectory decoding from scored evidence rays.

Per prediction step h the decoder (i) scores every retained evidence ray
with a step-specific two-layer perceptron on [q_sem; q_kin; f_r], (ii)
softmax-normalizes the scores into attention, (iii) solves the attention-
weighted least-squares line intersection for a coarse anchor, and (iv)
adds a learned residual computed from the fused evidence feature and the
anchor. Degenerate bundles (near-parallel rays) fall back to the
attention-weighted mean of ray origins, flagged, never raised.

The *_forward / *_backward pairs are the array-level kernels the training
pipeline composes; gradients flow through the closed-form solve via the
implicit relation A dp = db - dA p unless the caller detaches the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import ConditionedToken
from .geometry import (
    DEGENERACY_THRESHOLD,
    intersection_normal_system,
)
from .state import QueryPair, SlotState, derive_queries

__all__ = [
    "ScoreHeadParams",
    "ResidualHeadParams",
    "DecoderParams",
    "StepAttention",
    "TrajectoryPrediction",
    "score_evidence",
    "fuse_evidence",
    "decode_step",
    "decode_trajectory",
    "step_forward",
    "step_backward",
]

HORIZON = 4  # fixed prediction horizon


@dataclass
class ScoreHeadParams:
    """Two-layer perceptron (3d -> hidden -> 1) with tanh hidden layer."""

    w1: np.ndarray  # (3d, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.atleast_1d(np.asarray(self.b2, dtype=np.float64))
        h = self.b1.size
        if self.w1.ndim != 2 or self.w1.shape[1] != h or self.w2.shape != (h,) \
                or self.b2.shape != (1,):
            raise ValueError("score head shapes inconsistent")

    @classmethod
    def init(cls, token_dim: int, hidden: int, rng: np.random.Generator,
             scale: float = 0.5) -> "ScoreHeadParams":
        n_in = 3 * token_dim
        return cls(
            w1=rng.normal(0.0, scale / np.sqrt(n_in), (n_in, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, scale / np.sqrt(hidden), hidden),
            b2=np.zeros(1),
        )


@dataclass
class ResidualHeadParams:
    """Two-layer perceptron (d+3 -> hidden -> 3) with tanh hidden layer."""

    w1: np.ndarray  # (d+3, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, 3)
    b2: np.ndarray  # (3,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h = self.b1.size
        if self.w1.shape[1] != h or self.w2.shape != (h, 3) or self.b2.shape != (3,):
            raise ValueError("residual head shapes inconsistent")

    @classmethod
    def init(cls, token_dim: int, hidden: int, rng: np.random.Generator,
             scale: float = 0.1) -> "ResidualHeadParams":
        n_in = token_dim + 3
        return cls(
            w1=rng.normal(0.0, scale / np.sqrt(n_in), (n_in, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, scale / np.sqrt(hidden), (hidden, 3)),
            b2=np.zeros(3),
        )


@dataclass
class DecoderParams:
    """One score head per step plus the shared residual head.

    `top_r`, when set, keeps only the top-R rays by logit and renormalizes
    the softmax over the survivors (weights of dropped rays become 0).
    """

    score_heads: list[ScoreHeadParams]
    residual: ResidualHeadParams
    horizon: int = HORIZON
    top_r: int | None = field(default=None)

    def __post_init__(self):
        if self.horizon != len(self.score_heads):
            raise ValueError(
                f"horizon {self.horizon} needs {self.horizon} score heads, "
                f"got {len(self.score_heads)}"
            )
        if self.top_r is not None and self.top_r < 1:
            raise ValueError("top_r must be >= 1 when set")

    @classmethod
    def init(cls, token_dim: int, hidden: int, rng: np.random.Generator,
             horizon: int = HORIZON) -> "DecoderParams":
        return cls(
            score_heads=[ScoreHeadParams.init(token_dim, hidden, rng)
                         for _ in range(horizon)],
            residual=ResidualHeadParams.init(token_dim, hidden, rng),
            horizon=horizon,
        )


@dataclass(frozen=True)
class StepAttention:
    """Softmax weights over the retained rays for one step (sum to 1)."""

    weights: np.ndarray  # (R,)
    step: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("attention must be nonnegative and sum to 1 within 1e-9")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class TrajectoryPrediction:
    """H refined points with per-step anchors, attention, and fallback flags."""

    points: np.ndarray  # (H, 3)
    anchors: np.ndarray  # (H, 3)
    attention: tuple[StepAttention, ...]
    fallback: np.ndarray  # (H,) bool, True where the degenerate fallback fired

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        anc = np.asarray(self.anchors, dtype=np.float64)
        fb = np.asarray(self.fallback, dtype=bool)
        h = pts.shape[0]
        if anc.shape != (h, 3) or fb.shape != (h,) or len(self.attention) != h:
            raise ValueError("prediction fields must all have H entries")
        if not np.all(np.isfinite(pts)):
            raise ValueError("predicted points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "anchors", anc)
        object.__setattr__(self, "fallback", fb)


# ---------------------------------------------------------------------------
# array-level kernels


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _score_forward(head: ScoreHeadParams, q_sem, q_kin, feats: np.ndarray):
    r, d = feats.shape
    u = np.empty((r, 3 * d))
    u[:, :d] = q_sem
    u[:, d:2 * d] = q_kin
    u[:, 2 * d:] = feats
    h1 = np.tanh(u @ head.w1 + head.b1)
    z = h1 @ head.w2 + head.b2
    return z, {"u": u, "h1": h1}


def _score_backward(head: ScoreHeadParams, cache: dict, dz: np.ndarray, d: int):
    u, h1 = cache["u"], cache["h1"]
    grads = {
        "w2": h1.T @ dz,
        "b2": np.array([dz.sum()]),
    }
    dh1 = np.outer(dz, head.w2)
    da = dh1 * (1.0 - h1 * h1)
    grads["w1"] = u.T @ da
    grads["b1"] = da.sum(axis=0)
    du = da @ head.w1.T
    return grads, du[:, :d].sum(axis=0), du[:, d:2 * d].sum(axis=0), du[:, 2 * d:]


def _residual_forward(res: ResidualHeadParams, fused: np.ndarray, anchor: np.ndarray):
    v = np.concatenate([fused, anchor])
    h1 = np.tanh(v @ res.w1 + res.b1)
    delta = h1 @ res.w2 + res.b2
    return delta, {"v": v, "h1": h1}


def _residual_backward(res: ResidualHeadParams, cache: dict, d_delta: np.ndarray, d: int):
    v, h1 = cache["v"], cache["h1"]
    grads = {
        "w2": np.outer(h1, d_delta),
        "b2": d_delta.copy(),
    }
    dh1 = res.w2 @ d_delta
    da = dh1 * (1.0 - h1 * h1)
    grads["w1"] = np.outer(v, da)
    grads["b1"] = da
    dv = res.w1 @ da
    return grads, dv[:d], dv[d:]


def _anchor_forward(dirs: np.ndarray, origins: np.ndarray, alpha: np.ndarray):
    """Weighted intersection with the declared degenerate fallback.

    Returns (point, fallback_flag, cache). The fallback is the alpha-weighted
    mean of ray origins: deterministic, and covariant under rigid motions.
    """
    a, b = intersection_normal_system(dirs, origins, alpha)
    eigvals = np.linalg.eigvalsh(a)
    hi = float(eigvals[-1])
    condition = max(float(eigvals[0]), 0.0) / hi if hi > 0.0 else 0.0
    if condition < DEGENERACY_THRESHOLD:
        point = alpha @ origins
        return point, True, {"fallback": True, "origins": origins}
    point = np.linalg.solve(a, b)
    return point, False, {
        "fallback": False, "a": a, "point": point,
        "dirs": dirs, "origins": origins,
    }


def _anchor_backward(cache: dict, d_point: np.ndarray) -> np.ndarray:
    """d(loss)/d(alpha) through the solve (or the fallback mean)."""
    if cache["fallback"]:
        return cache["origins"] @ d_point
    # Differentiate A p = b:  dp = A^-1 (db - dA p);  per weight r the
    # derivative is A^-1 P_r (o_r - p) with P_r = I - d_r d_r^T.
    lam = np.linalg.solve(cache["a"], d_point)  # A symmetric
    dirs, origins, p = cache["dirs"], cache["origins"], cache["point"]
    rel = origins - p
    proj_rel = rel - dirs * np.einsum("ri,ri->r", dirs, rel)[:, None]
    return proj_rel @ lam


def step_forward(
    params: DecoderParams,
    step_index: int,
    q_sem: np.ndarray,
    q_kin: np.ndarray,
    feats: np.ndarray,
    dirs: np.ndarray,
    origins: np.ndarray,
    anchor_override: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool, dict]:
    """One decode step on stacked arrays; step_index is 0-based.

    Returns (refined, anchor, alpha, fallback, cache). `anchor_override`
    clamps the anchor to a constant (used by finite-difference checks of
    the detached-anchor mode).
    """
    head = params.score_heads[step_index]
    z, score_cache = _score_forward(head, q_sem, q_kin, feats)
    kept = None
    if params.top_r is not None and params.top_r < z.size:
        kept = np.sort(np.argsort(z)[-params.top_r:])
        masked = np.full_like(z, -np.inf)
        masked[kept] = z[kept]
        alpha = _softmax(masked)
    else:
        alpha = _softmax(z)
    if anchor_override is not None:
        anchor, fallback = np.asarray(anchor_override, dtype=np.float64), False
        anchor_cache = {"override": True}
    else:
        anchor, fallback, anchor_cache = _anchor_forward(dirs, origins, alpha)
    fused = alpha @ feats
    delta, res_cache = _residual_forward(params.residual, fused, anchor)
    refined = anchor + delta
    cache = {
        "score": score_cache, "alpha": alpha, "kept": kept,
        "anchor": anchor_cache, "res": res_cache, "feats": feats,
    }
    return refined, anchor, alpha, fallback, cache


def step_backward(
    params: DecoderParams,
    step_index: int,
    cache: dict,
    d_refined: np.ndarray,
    detach_anchor: bool,
    token_dim: int,
) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray]:
    """Backward of one decode step.

    Returns (grads, d_q_sem, d_q_kin, d_feats) where grads holds the step's
    score-head grads under 'score' and residual grads under 'res'.
    With detach_anchor the solve contributes nothing to d(alpha); the
    anchor is treated as a constant input of the residual head.
    """
    alpha, feats = cache["alpha"], cache["feats"]
    d_delta = d_refined
    res_grads, d_fused, d_anchor_in = _residual_backward(
        params.residual, cache["res"], d_delta, token_dim)
    d_anchor = d_refined + d_anchor_in  # refined = anchor + delta
    d_alpha = feats @ d_fused
    d_feats = np.outer(alpha, d_fused)
    if not detach_anchor and not cache["anchor"].get("override", False):
        d_alpha = d_alpha + _anchor_backward(cache["anchor"], d_anchor)
    # softmax backward; truncated rays have alpha 0 and receive dz 0
    dz = alpha * (d_alpha - float(alpha @ d_alpha))
    head_grads, d_q_sem, d_q_kin, d_feats_score = _score_backward(
        params.score_heads[step_index], cache["score"], dz, token_dim)
    d_feats = d_feats + d_feats_score
    return {"score": head_grads, "res": res_grads}, d_q_sem, d_q_kin, d_feats


# ---------------------------------------------------------------------------
# token-level API


def _stack(tokens: list[ConditionedToken]):
    feats = np.stack([t.feature for t in tokens])
    dirs = np.stack([t.ray.direction for t in tokens])
    origins = np.stack([t.ray.origin for t in tokens])
    return feats, dirs, origins


def score_evidence(
    queries: QueryPair, tokens: list[ConditionedToken], step: int,
    params: DecoderParams,
) -> StepAttention:
    """Softmax attention over tokens for step h (1-based, 1..H)."""
    if not tokens:
        raise ValueError("need at least one token to score")
    if not (1 <= step <= params.horizon):
        raise ValueError(f"step must lie in [1, {params.horizon}], got {step}")
    feats, _, _ = _stack(tokens)
    z, _ = _score_forward(params.score_heads[step - 1], queries.semantic,
                          queries.kinematic, feats)
    if params.top_r is not None and params.top_r < z.size:
        kept = np.argsort(z)[-params.top_r:]
        masked = np.full_like(z, -np.inf)
        masked[kept] = z[kept]
        return StepAttention(weights=_softmax(masked), step=step)
    return StepAttention(weights=_softmax(z), step=step)


def fuse_evidence(attn: StepAttention, tokens: list[ConditionedToken]) -> np.ndarray:
    """Attention-weighted sum of conditioned features."""
    if attn.weights.size != len(tokens):
        raise ValueError(
            f"attention over {attn.weights.size} rays but {len(tokens)} tokens")
    feats, _, _ = _stack(tokens)
    return attn.weights @ feats


def decode_step(
    queries: QueryPair, tokens: list[ConditionedToken], step: int,
    params: DecoderParams,
) -> tuple[np.ndarray, np.ndarray, StepAttention, bool]:
    """(anchor, refined, attention, fallback_flag) for one step (1-based)."""
    if not tokens:
        raise ValueError("need at least one token to decode")
    if not (1 <= step <= params.horizon):
        raise ValueError(f"step must lie in [1, {params.horizon}], got {step}")
    feats, dirs, origins = _stack(tokens)
    refined, anchor, alpha, fallback, _ = step_forward(
        params, step - 1, queries.semantic, queries.kinematic,
        feats, dirs, origins)
    return anchor, refined, StepAttention(weights=alpha, step=step), fallback


def decode_trajectory(
    slot: SlotState,
    tokens: list[ConditionedToken],
    params: DecoderParams,
    w_sem: np.ndarray,
    w_kin: np.ndarray,
) -> TrajectoryPrediction:
    """Decode the full H-step trajectory for the current slot.

    Queries are derived once per turn; every step shares them and the token
    set, differing only in its step-specific score head.
    """
    queries = derive_queries(slot, w_sem, w_kin)
    points = np.empty((params.horizon, 3))
    anchors = np.empty((params.horizon, 3))
    attn = []
    fallback = np.zeros(params.horizon, dtype=bool)
    for h in range(1, params.horizon + 1):
        anchor, refined, a, fb = decode_step(queries, tokens, h, params)
        points[h - 1] = refined
        anchors[h - 1] = anchor
        attn.append(a)
        fallback[h - 1] = fb
    return TrajectoryPrediction(points=points, anchors=anchors,
                                attention=tuple(attn), fallback=fallback)
