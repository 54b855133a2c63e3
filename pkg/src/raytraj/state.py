"""The persistent target slot carried across dialogue turns.

The slot is a d-vector updated once per turn by a gated blend:

    x    = [prev; evidence_pool; query]
    cand = tanh(x @ W_c + b_c)
    g    = sigmoid(x @ W_g + b_g)
    new  = g * cand + (1 - g) * prev

During training the cross-turn propagation is stop-gradient: the backward
pass never pushes gradients into `prev` across a turn boundary (the
pipeline simply does not chain d_prev; `update_slot_backward` still
returns it so the no-stop-gradient variant can be composed in tests).

Questions are embedded by a fixed hash-based bag-of-words: deterministic,
dependency-free, and sufficient to condition target selection on the
templated synthetic dialogues.
"""

from __future__ import annotations

import functools
import hashlib
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SlotState",
    "SlotUpdateParams",
    "QueryEmbedding",
    "QueryPair",
    "init_slot",
    "update_slot",
    "update_slot_forward",
    "update_slot_backward",
    "derive_queries",
    "embed_question",
    "identity_consistency_loss",
    "identity_consistency_loss_grad",
]

_WORD_RE = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class SlotState:
    vector: np.ndarray  # (d,)
    turn_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("slot vector must be a finite 1-D vector")
        if self.turn_index < 0:
            raise ValueError("turn_index must be nonnegative")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return int(self.vector.size)


@dataclass
class SlotUpdateParams:
    """Candidate and gate affine maps from [prev; pool; query] (3d) to d."""

    cand_w: np.ndarray  # (3d, d)
    cand_b: np.ndarray  # (d,)
    gate_w: np.ndarray  # (3d, d)
    gate_b: np.ndarray  # (d,)

    def __post_init__(self):
        for name in ("cand_w", "cand_b", "gate_w", "gate_b"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        d = self.cand_b.size
        if self.cand_w.shape != (3 * d, d) or self.gate_w.shape != (3 * d, d) \
                or self.gate_b.shape != (d,):
            raise ValueError("slot update parameter shapes are inconsistent")

    @property
    def dim(self) -> int:
        return int(self.cand_b.size)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float = 0.1) -> "SlotUpdateParams":
        s = scale / np.sqrt(3.0 * dim)
        return cls(
            cand_w=rng.normal(0.0, s, (3 * dim, dim)),
            cand_b=np.zeros(dim),
            gate_w=rng.normal(0.0, s, (3 * dim, dim)),
            gate_b=np.zeros(dim),
        )


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray  # (d,)

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("query embedding must be a finite 1-D vector")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class QueryPair:
    semantic: np.ndarray  # (d,)
    kinematic: np.ndarray  # (d,)


def init_slot(dim: int) -> SlotState:
    """Turn-0 state: the zero vector."""
    if dim <= 0:
        raise ValueError("slot dimension must be positive")
    return SlotState(vector=np.zeros(dim), turn_index=0)


def update_slot_forward(
    prev: np.ndarray, evidence_pool: np.ndarray, query: np.ndarray,
    params: SlotUpdateParams,
) -> tuple[np.ndarray, dict]:
    d = params.dim
    prev = np.asarray(prev, dtype=np.float64)
    pool = np.asarray(evidence_pool, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if prev.shape != (d,) or pool.shape != (d,) or q.shape != (d,):
        raise ValueError(
            f"slot update inputs must all have dim {d}, got "
            f"{prev.shape}, {pool.shape}, {q.shape}"
        )
    x = np.concatenate([prev, pool, q])
    cand = np.tanh(x @ params.cand_w + params.cand_b)
    gate = 1.0 / (1.0 + np.exp(-(x @ params.gate_w + params.gate_b)))
    new = gate * cand + (1.0 - gate) * prev
    return new, {"x": x, "cand": cand, "gate": gate, "prev": prev}


def update_slot_backward(
    cache: dict, d_new: np.ndarray, params: SlotUpdateParams,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray, np.ndarray]:
    """Backward through one gated update.

    Returns (param grads, d_prev, d_pool, d_query). d_prev contains the full
    dependence, including the (1 - g) carry path; callers implementing
    stop-gradient simply drop it.
    """
    cand, gate, x, prev = cache["cand"], cache["gate"], cache["x"], cache["prev"]
    d = prev.size
    d_gate = d_new * (cand - prev)
    d_cand = d_new * gate
    da_c = d_cand * (1.0 - cand * cand)
    da_g = d_gate * gate * (1.0 - gate)
    grads = {
        "cand_w": np.outer(x, da_c),
        "cand_b": da_c,
        "gate_w": np.outer(x, da_g),
        "gate_b": da_g,
    }
    dx = params.cand_w @ da_c + params.gate_w @ da_g
    d_prev = d_new * (1.0 - gate) + dx[:d]
    return grads, d_prev, dx[d:2 * d], dx[2 * d:]


def update_slot(
    prev: SlotState, evidence_pool: np.ndarray, query: QueryEmbedding,
    params: SlotUpdateParams,
) -> SlotState:
    """One recurrent turn update; increments the turn index."""
    new, _ = update_slot_forward(prev.vector, evidence_pool, query.vector, params)
    return SlotState(vector=new, turn_index=prev.turn_index + 1)


def derive_queries(slot: SlotState, w_sem: np.ndarray, w_kin: np.ndarray) -> QueryPair:
    """q_sem = W_sem s, q_kin = W_kin s; plain matrix-vector products."""
    w_sem = np.asarray(w_sem, dtype=np.float64)
    w_kin = np.asarray(w_kin, dtype=np.float64)
    d = slot.dim
    if w_sem.shape != (d, d) or w_kin.shape != (d, d):
        raise ValueError(f"query matrices must be ({d}, {d})")
    return QueryPair(semantic=w_sem @ slot.vector, kinematic=w_kin @ slot.vector)


@functools.lru_cache(maxsize=4096)
def _embed_words(text: str, dim: int) -> tuple[float, ...]:
    v = np.zeros(dim)
    for word in _WORD_RE.findall(text.lower()):
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        idx = int.from_bytes(digest[:8], "little") % dim
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        v[idx] += sign
    n = np.linalg.norm(v)
    if n > 0:
        v /= n
    return tuple(v)


def embed_question(text: str, dim: int) -> QueryEmbedding:
    """Hashed bag-of-words embedding, L2-normalized.

    Each lowercased word is SHA-256 hashed; the first 8 hash bytes pick a
    coordinate and the next byte picks the sign. Stable across runs and
    platforms (no use of the salted builtin hash).
    """
    if dim <= 0:
        raise ValueError("embedding dimension must be positive")
    return QueryEmbedding(vector=np.array(_embed_words(text, dim)))


def _cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0, na, nb  # zero-vector slots contribute cosine 0 by convention
    return float(a @ b) / (na * nb), na, nb


def identity_consistency_loss(
    slots_same: list[tuple[SlotState, SlotState]],
    slots_diff: list[tuple[SlotState, SlotState]],
    margin: float = 0.5,
) -> float:
    """Cosine pull on same-target slot pairs, margin hinge push on different.

    mean over same pairs of (1 - cos) + mean over diff pairs of
    max(0, cos - (1 - margin)). Either set may be empty (contributes 0).
    """
    if not (0.0 < margin <= 2.0):
        raise ValueError(f"margin must lie in (0, 2], got {margin}")
    loss = 0.0
    if slots_same:
        loss += float(np.mean([1.0 - _cosine(a.vector, b.vector)[0] for a, b in slots_same]))
    if slots_diff:
        hinge = [max(0.0, _cosine(a.vector, b.vector)[0] - (1.0 - margin))
                 for a, b in slots_diff]
        loss += float(np.mean(hinge))
    return loss


def identity_consistency_loss_grad(
    same_pairs: list[tuple[np.ndarray, np.ndarray]],
    diff_pairs: list[tuple[np.ndarray, np.ndarray]],
    margin: float = 0.5,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]], list[tuple[np.ndarray, np.ndarray]]]:
    """Loss plus d(loss)/d(vector) for every pair member, array-level.

    Returns (loss, same_grads, diff_grads) with grads aligned to the input
    pair lists. Used by the training pipeline, which owns the mapping from
    slot vectors back to turns.
    """
    if not (0.0 < margin <= 2.0):
        raise ValueError(f"margin must lie in (0, 2], got {margin}")

    def cos_grad(a, b):
        c, na, nb = _cosine(a, b)
        if na == 0.0 or nb == 0.0:
            return c, np.zeros_like(a), np.zeros_like(b)
        ga = b / (na * nb) - c * a / (na * na)
        gb = a / (na * nb) - c * b / (nb * nb)
        return c, ga, gb

    loss = 0.0
    same_grads, diff_grads = [], []
    if same_pairs:
        scale = 1.0 / len(same_pairs)
        for a, b in same_pairs:
            c, ga, gb = cos_grad(a, b)
            loss += scale * (1.0 - c)
            same_grads.append((-scale * ga, -scale * gb))
    if diff_pairs:
        scale = 1.0 / len(diff_pairs)
        thresh = 1.0 - margin
        for a, b in diff_pairs:
            c, ga, gb = cos_grad(a, b)
            if c > thresh:
                loss += scale * (c - thresh)
                diff_grads.append((scale * ga, scale * gb))
            else:
                diff_grads.append((np.zeros_like(a), np.zeros_like(b)))
    return float(loss), same_grads, diff_grads
