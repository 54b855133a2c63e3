"""Pinhole cameras, Plucker rays, and weighted multiview line intersection.

Conventions used everywhere in this package:

* World frame: right-handed, z up, units are meters.
* Camera frame: computer-vision standard (x right, y down, z forward).
* Pixels: (u, v) from the top-left corner, u rightward, v downward.
* Poses store the world-from-camera rotation together with the camera
  center in world coordinates.
* World points are plain float64 arrays of shape (3,).

All computation is float64; the solver returns a conditioning diagnostic
so callers can detect near-parallel ray bundles instead of trusting a
garbage solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "CameraView",
    "PluckerRay",
    "DegenerateBundleError",
    "DEGENERACY_THRESHOLD",
    "pixel_to_ray",
    "make_plucker",
    "point_to_ray_distance",
    "weighted_ray_intersection",
    "intersection_normal_system",
    "solve_weighted_intersection",
    "project_point",
]

# Condition ratio (lambda_min / lambda_max of the normal matrix) below which
# a bundle is declared degenerate. Any fallback point would be
# frame-dependent, so the geometry layer refuses and lets the caller decide.
DEGENERACY_THRESHOLD = 1e-6

_ORTHO_TOL = 1e-9


def _as_vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite, got {v}")
    return v


class DegenerateBundleError(ValueError):
    """Raised when the intersection normal matrix is numerically singular.

    Carries the condition ratio lambda_min/lambda_max so callers can log or
    branch on the diagnostic.
    """

    def __init__(self, condition: float):
        self.condition = float(condition)
        super().__init__(
            f"degenerate ray bundle: condition ratio {condition:.3e} "
            f"< {DEGENERACY_THRESHOLD:.0e}"
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rotation plus camera center in world coordinates."""

    rotation: np.ndarray  # (3, 3), maps camera-frame vectors to world frame
    translation: np.ndarray  # (3,), camera center, meters

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = _as_vec3(self.translation, "translation")
        if r.shape != (3, 3) or not np.all(np.isfinite(r)):
            raise ValueError(f"rotation must be a finite 3x3 matrix, got shape {r.shape}")
        if np.max(np.abs(r @ r.T - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must have determinant +1 (proper rotation)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class CameraView:
    """Calibration for one (view, timestamp) pair."""

    view_id: str
    timestamp: float
    intrinsics: CameraIntrinsics
    pose: CameraPose


@dataclass(frozen=True)
class PluckerRay:
    """A ray as unit direction d, moment m = o x d, and origin o.

    The (d, m) pair is the 6-D line descriptor; it is invariant to sliding
    the origin along the line. The origin itself is retained because the
    intersection solver needs a concrete point per ray.
    """

    direction: np.ndarray  # (3,), unit norm
    moment: np.ndarray  # (3,), meters
    origin: np.ndarray  # (3,), meters

    def __post_init__(self):
        d = _as_vec3(self.direction, "direction")
        m = _as_vec3(self.moment, "moment")
        o = _as_vec3(self.origin, "origin")
        if abs(np.linalg.norm(d) - 1.0) > _ORTHO_TOL:
            raise ValueError("direction must be unit length within 1e-9")
        if abs(float(d @ m)) > _ORTHO_TOL:
            raise ValueError("direction and moment must be orthogonal within 1e-9")
        if np.max(np.abs(np.cross(o, d) - m)) > _ORTHO_TOL:
            raise ValueError("moment must equal origin x direction within 1e-9")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "moment", m)
        object.__setattr__(self, "origin", o)

    @property
    def descriptor(self) -> np.ndarray:
        """The 6-vector [d; m]."""
        return np.concatenate([self.direction, self.moment])


def make_plucker(origin, direction) -> PluckerRay:
    """Build a ray from an origin point and a (not necessarily unit) direction."""
    o = _as_vec3(origin, "origin")
    d = _as_vec3(direction, "direction")
    n = np.linalg.norm(d)
    if n == 0.0:
        raise ValueError("direction must have nonzero length")
    d = d / n
    return PluckerRay(direction=d, moment=np.cross(o, d), origin=o)


def pixel_to_ray(intr: CameraIntrinsics, pose: CameraPose, u: float, v: float) -> PluckerRay:
    """Cast the world-frame viewing ray through pixel (u, v).

    The camera-frame direction is ((u-cx)/fx, (v-cy)/fy, 1), rotated into
    the world frame and normalized; the ray origin is the camera center.
    """
    if not (np.isfinite(u) and np.isfinite(v)):
        raise ValueError(f"pixel coordinates must be finite, got ({u}, {v})")
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return make_plucker(pose.translation, pose.rotation @ d_cam)


def project_point(intr: CameraIntrinsics, pose: CameraPose, point) -> tuple[float, float]:
    """Forward pinhole model: world point -> pixel (u, v).

    Raises ValueError if the point is at or behind the camera plane
    (camera-frame depth <= 0).
    """
    p = _as_vec3(point, "point")
    p_cam = pose.rotation.T @ (p - pose.translation)
    if p_cam[2] <= 0.0:
        raise ValueError(f"point is behind the camera (depth {p_cam[2]:.3g})")
    return (
        float(intr.fx * p_cam[0] / p_cam[2] + intr.cx),
        float(intr.fy * p_cam[1] / p_cam[2] + intr.cy),
    )


def point_to_ray_distance(point, ray: PluckerRay) -> float:
    """Perpendicular distance || (I - d d^T)(p - o) ||."""
    p = _as_vec3(point, "point")
    rel = p - ray.origin
    return float(np.linalg.norm(rel - ray.direction * (ray.direction @ rel)))


def intersection_normal_system(
    directions: np.ndarray, origins: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Normal system of the weighted least-squares intersection.

    A = sum_r w_r (I - d_r d_r^T),  b = sum_r w_r (I - d_r d_r^T) o_r.
    `directions` rows must be unit vectors.
    """
    d = np.asarray(directions, dtype=np.float64)
    o = np.asarray(origins, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    # sum w_r I - sum w_r d_r d_r^T
    wd = d * w[:, None]
    a = np.eye(3) * w.sum() - wd.T @ d
    # (I - d d^T) o = o - d (d.o)
    proj_o = o - d * (d * o).sum(axis=1)[:, None]
    b = w @ proj_o
    return a, b


def solve_weighted_intersection(
    directions: np.ndarray, origins: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, float]:
    """Solve the 3x3 normal system; returns (point, condition ratio).

    Raises DegenerateBundleError when lambda_min/lambda_max of the normal
    matrix falls below DEGENERACY_THRESHOLD (e.g. all rays parallel).
    """
    a, b = intersection_normal_system(directions, origins, weights)
    eigvals = np.linalg.eigvalsh(a)  # ascending; A is symmetric PSD
    lo = max(float(eigvals[0]), 0.0)
    hi = float(eigvals[-1])
    condition = lo / hi if hi > 0.0 else 0.0
    if condition < DEGENERACY_THRESHOLD:
        raise DegenerateBundleError(condition)
    return np.linalg.solve(a, b), condition


def weighted_ray_intersection(
    rays: list[PluckerRay], weights
) -> tuple[np.ndarray, float]:
    """Minimize sum_r w_r ||(I - d_r d_r^T)(p - o_r)||^2 over p.

    `weights` must be nonnegative and sum to 1 within 1e-9 (they are
    attention weights in the decoder). Returns the minimizing point and the
    condition ratio of the normal matrix; raises DegenerateBundleError for
    near-singular bundles.
    """
    if len(rays) == 0:
        raise ValueError("need at least one ray")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(rays),):
        raise ValueError(f"weights shape {w.shape} does not match {len(rays)} rays")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 within 1e-9, got {w.sum()!r}")
    dirs = np.stack([r.direction for r in rays])
    origs = np.stack([r.origin for r in rays])
    return solve_weighted_intersection(dirs, origs, w)
