"""Ray-time conditioning of visual tokens.

Each token carries a feature vector, the viewing ray of its image patch,
and a physical timestamp. Conditioning is additive:

    f_out = f + [d; m] @ W_ray + b_ray + gamma(t) @ W_time + b_time

where gamma interleaves sin/cos at a ladder of frequencies. The projections
are learnable; `condition_features` / `condition_features_backward` are the
array-level pair the training pipeline differentiates through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraView, PluckerRay

__all__ = [
    "FourierTimeConfig",
    "RtgeParams",
    "VisualToken",
    "ConditionedToken",
    "fourier_time_embedding",
    "condition_token",
    "encode_clip",
    "condition_features",
    "condition_features_backward",
]


@dataclass(frozen=True)
class FourierTimeConfig:
    """Strictly increasing positive angular frequencies (rad/s)."""

    frequencies: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("frequencies must be a nonempty 1-D array")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("frequencies must be finite and strictly positive")
        if np.any(np.diff(w) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", w)

    @property
    def num_frequencies(self) -> int:
        return int(self.frequencies.size)

    @property
    def embed_dim(self) -> int:
        return 2 * self.num_frequencies

    @classmethod
    def geometric(cls, num_frequencies: int = 8, max_period: float = 4.0) -> "FourierTimeConfig":
        """Geometric ladder w_i = (2*pi/max_period) * 2**(i-1).

        The base period should cover the clip duration so the slowest
        frequency resolves drift across the whole clip while the fastest
        resolves per-frame variation.
        """
        if num_frequencies <= 0 or max_period <= 0:
            raise ValueError("num_frequencies and max_period must be positive")
        base = 2.0 * np.pi / max_period
        return cls(base * (2.0 ** np.arange(num_frequencies)))


def fourier_time_embedding(t: float, cfg: FourierTimeConfig) -> np.ndarray:
    """[sin(w_1 t), cos(w_1 t), ..., sin(w_m t), cos(w_m t)]."""
    if not np.isfinite(t):
        raise ValueError(f"timestamp must be finite, got {t}")
    phase = cfg.frequencies * float(t)
    out = np.empty(cfg.embed_dim)
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out


def _time_embedding_rows(times: np.ndarray, cfg: FourierTimeConfig) -> np.ndarray:
    phase = np.asarray(times, dtype=np.float64)[:, None] * cfg.frequencies[None, :]
    out = np.empty((phase.shape[0], cfg.embed_dim))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


@dataclass
class RtgeParams:
    """Learnable ray and time projections into the token dimension.

    Biases are carried even though the additive form can be written without
    them; zero biases recover the bare projections.
    """

    ray_w: np.ndarray  # (6, d)
    ray_b: np.ndarray  # (d,)
    time_w: np.ndarray  # (2m, d)
    time_b: np.ndarray  # (d,)
    whiten_moments: bool = field(default=False)  # divide moments by their batch RMS

    def __post_init__(self):
        self.ray_w = np.asarray(self.ray_w, dtype=np.float64)
        self.ray_b = np.asarray(self.ray_b, dtype=np.float64)
        self.time_w = np.asarray(self.time_w, dtype=np.float64)
        self.time_b = np.asarray(self.time_b, dtype=np.float64)
        d = self.token_dim
        if self.ray_w.shape != (6, d):
            raise ValueError(f"ray_w must be (6, {d}), got {self.ray_w.shape}")
        if self.time_b.shape != (d,) or self.time_w.ndim != 2 or self.time_w.shape[1] != d:
            raise ValueError("time projection dimensions inconsistent with token_dim")
        if self.time_w.shape[0] % 2 != 0:
            raise ValueError("time_w input dimension must be even (sin/cos pairs)")
        for name in ("ray_w", "ray_b", "time_w", "time_b"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def token_dim(self) -> int:
        return int(self.ray_b.size)

    @property
    def num_frequencies(self) -> int:
        return int(self.time_w.shape[0] // 2)

    @classmethod
    def init(cls, token_dim: int, num_frequencies: int, rng: np.random.Generator,
             scale: float = 0.1) -> "RtgeParams":
        return cls(
            ray_w=rng.normal(0.0, scale / np.sqrt(6.0), (6, token_dim)),
            ray_b=np.zeros(token_dim),
            time_w=rng.normal(0.0, scale / np.sqrt(2.0 * num_frequencies),
                              (2 * num_frequencies, token_dim)),
            time_b=np.zeros(token_dim),
        )


@dataclass(frozen=True)
class VisualToken:
    """One patch-level evidence token: feature, viewing ray, timestamp, ids."""

    feature: np.ndarray  # (d,)
    ray: PluckerRay
    timestamp: float
    view_id: str
    patch_id: int

    def __post_init__(self):
        f = np.asarray(self.feature, dtype=np.float64)
        if f.ndim != 1 or not np.all(np.isfinite(f)):
            raise ValueError("feature must be a finite 1-D vector")
        if not np.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        object.__setattr__(self, "feature", f)


@dataclass(frozen=True)
class ConditionedToken:
    """A token after ray-time conditioning; the ray is kept as evidence."""

    feature: np.ndarray
    ray: PluckerRay
    timestamp: float
    view_id: str
    patch_id: int


def condition_features(
    features: np.ndarray,
    ray_descriptors: np.ndarray,
    times: np.ndarray,
    params: RtgeParams,
    cfg: FourierTimeConfig,
) -> tuple[np.ndarray, dict]:
    """Array-level conditioning of R tokens at once.

    features (R, d); ray_descriptors (R, 6) rows are [d; m]; times (R,).
    Returns the conditioned features and a cache for the backward pass.
    """
    f0 = np.asarray(features, dtype=np.float64)
    r6 = np.asarray(ray_descriptors, dtype=np.float64)
    if cfg.num_frequencies != params.num_frequencies:
        raise ValueError(
            f"time config has {cfg.num_frequencies} frequencies but params expect "
            f"{params.num_frequencies}"
        )
    if f0.ndim != 2 or f0.shape[1] != params.token_dim:
        raise ValueError(f"features must be (R, {params.token_dim}), got {f0.shape}")
    if r6.shape != (f0.shape[0], 6):
        raise ValueError(f"ray descriptors must be (R, 6), got {r6.shape}")
    if params.whiten_moments:
        rms = float(np.sqrt(np.mean(r6[:, 3:] ** 2)))
        if rms > 0:
            r6 = r6.copy()
            r6[:, 3:] /= rms
    gam = _time_embedding_rows(times, cfg)
    out = f0 + r6 @ params.ray_w + params.ray_b + gam @ params.time_w + params.time_b
    return out, {"ray6": r6, "gamma": gam}


def condition_features_backward(cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the conditioning w.r.t. the projection parameters."""
    return {
        "ray_w": cache["ray6"].T @ d_out,
        "ray_b": d_out.sum(axis=0),
        "time_w": cache["gamma"].T @ d_out,
        "time_b": d_out.sum(axis=0),
    }


def condition_token(tok: VisualToken, params: RtgeParams, cfg: FourierTimeConfig) -> ConditionedToken:
    """Condition a single token; ray/timestamp/ids pass through unchanged."""
    if tok.feature.size != params.token_dim:
        raise ValueError(
            f"token feature has dim {tok.feature.size}, params expect {params.token_dim}"
        )
    out, _ = condition_features(
        tok.feature[None, :], tok.ray.descriptor[None, :],
        np.array([tok.timestamp]), params, cfg,
    )
    return ConditionedToken(
        feature=out[0], ray=tok.ray, timestamp=tok.timestamp,
        view_id=tok.view_id, patch_id=tok.patch_id,
    )


def encode_clip(
    views: list[CameraView],
    tokens: list[VisualToken],
    params: RtgeParams,
    cfg: FourierTimeConfig,
) -> list[ConditionedToken]:
    """Condition every token of a clip, preserving input order.

    Each token's (view_id, timestamp) must be calibrated in `views`;
    a missing pair raises with the offending key in the message.
    """
    calibrated = {(v.view_id, float(v.timestamp)) for v in views}
    for tok in tokens:
        key = (tok.view_id, float(tok.timestamp))
        if key not in calibrated:
            raise ValueError(f"no calibration for view {key[0]!r} at t={key[1]}")
    return [condition_token(t, params, cfg) for t in tokens]
