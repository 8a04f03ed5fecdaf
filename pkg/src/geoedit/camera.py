"""Look-at camera model, rigid transforms, and the 8-D relative-pose descriptor.

Conventions used throughout the package:

* World frame is right-handed with up-vector ``u_w = (0, 1, 0)``.
* The object of interest sits at the world origin; a view is the 5-vector
  ``(yaw, pitch, d, rx, ry)`` where yaw is the azimuth about +Y (zero along
  +X, increasing toward +Z), pitch the elevation above the XZ-plane, ``d``
  the camera-origin distance and ``(rx, ry)`` post-projection shifts in
  normalized device coordinates (NDC, [-1, 1] with (0, 0) at image center).
* Camera frame is right-handed with forward = +z pointing from the camera
  toward the origin, ``x_cam = normalize(u_w x z)``, ``y_cam = z x x_cam``.
  World-to-camera: ``x_c = R x_w + t``.
* Projection is pinhole with unit focal length; the additive NDC shift is
  applied after the perspective divide.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegeneratePitchError, NotARotationError

WORLD_UP = np.array([0.0, 1.0, 0.0])

# Pitch degeneracy guard: at |pitch| = pi/2 the up-vector is collinear with
# the view axis and the look-at frame is undefined.
PITCH_EPS = 1e-4

_PITCH_LIMIT = math.pi / 2 - PITCH_EPS


def wrap_angle(theta: float) -> float:
    """Reduce an angle into (-pi, pi]."""
    w = (theta + math.pi) % (2.0 * math.pi) - math.pi
    if w == -math.pi:
        w = math.pi
    return w


@dataclass(frozen=True)
class EulerCamera:
    """A look-at view parameterized by (yaw, pitch, d, rx, ry)."""

    yaw: float
    pitch: float
    d: float
    rx: float = 0.0
    ry: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "d", float(self.d))
        object.__setattr__(self, "rx", float(self.rx))
        object.__setattr__(self, "ry", float(self.ry))
        if not self.d > 0:
            raise ValueError(f"camera distance must be positive, got {self.d}")
        if abs(self.pitch) > _PITCH_LIMIT:
            raise DegeneratePitchError(
                f"|pitch| = {abs(self.pitch):.6f} exceeds pi/2 - {PITCH_EPS}"
            )
        if not (-1.0 <= self.rx <= 1.0 and -1.0 <= self.ry <= 1.0):
            raise ValueError(f"NDC shifts must lie in [-1, 1], got ({self.rx}, {self.ry})")

    def to_vector(self) -> np.ndarray:
        """Flat float64 array in the documented field order."""
        return np.array([self.yaw, self.pitch, self.d, self.rx, self.ry])

    @classmethod
    def from_vector(cls, v) -> "EulerCamera":
        v = np.asarray(v, dtype=float)
        if v.shape != (5,):
            raise ValueError(f"expected 5 components, got shape {v.shape}")
        return cls(*v.tolist())

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_dict(self) -> dict:
        return {"yaw": self.yaw, "pitch": self.pitch, "d": self.d,
                "rx": self.rx, "ry": self.ry}

    @classmethod
    def from_dict(cls, obj: dict) -> "EulerCamera":
        return cls(yaw=obj["yaw"], pitch=obj["pitch"], d=obj["d"],
                   rx=obj["rx"], ry=obj["ry"])

    @classmethod
    def from_json(cls, text: str) -> "EulerCamera":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RigidTransform:
    """World-to-camera rigid map x_c = R x_w + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"bad shapes R {R.shape}, t {t.shape}")
        _check_rotation(R, tol=1e-9)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def apply(self, x) -> np.ndarray:
        return self.R @ np.asarray(x, dtype=float) + self.t


def _check_rotation(R: np.ndarray, tol: float) -> None:
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise NotARotationError("matrix is not orthonormal")
    if np.linalg.det(R) <= 0:
        raise NotARotationError("matrix has non-positive determinant")


def camera_position(cam: EulerCamera) -> np.ndarray:
    """Camera center in world coordinates for a look-at view."""
    cp = math.cos(cam.pitch)
    return np.array([
        cam.d * cp * math.cos(cam.yaw),
        cam.d * math.sin(cam.pitch),
        cam.d * cp * math.sin(cam.yaw),
    ])


def look_at_extrinsics(cam: EulerCamera) -> RigidTransform:
    """World-to-camera extrinsics oriented toward the origin.

    The world origin maps to (0, 0, d) in the camera frame.
    """
    if abs(cam.pitch) > _PITCH_LIMIT:
        raise DegeneratePitchError(f"pitch {cam.pitch} too close to +-pi/2")
    center = camera_position(cam)
    z = -center / np.linalg.norm(center)
    x = np.cross(WORLD_UP, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R=R, t=-R @ center)


def relative_transform(src: RigidTransform, tgt: RigidTransform) -> RigidTransform:
    """Rigid map from source-camera to target-camera coordinates.

    R_rel = R_tgt R_src^T and t_rel = t_tgt - R_rel t_src, so that
    x_tgt = R_rel x_src + t_rel for every world point.  Identical inputs
    short-circuit to the exact identity.
    """
    if np.array_equal(src.R, tgt.R) and np.array_equal(src.t, tgt.t):
        return RigidTransform(R=np.eye(3), t=np.zeros(3))
    R_rel = tgt.R @ src.R.T
    return RigidTransform(R=R_rel, t=tgt.t - R_rel @ src.t)


def so3_exp(v) -> np.ndarray:
    """Rodrigues exponential: 3-vector (axis * angle) to rotation matrix."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    K = np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])
    if theta < 1e-8:
        # Second-order Taylor; exact enough at this scale and avoids 0/0.
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (vee of the matrix log).

    The returned magnitude lies in [0, pi].  Branches: a Taylor expression
    near zero, the stable sin/trace form in the bulk, and an axis recovery
    from (R + I)/2 near pi where the antisymmetric part degenerates.
    """
    R = np.asarray(R, dtype=float)
    _check_rotation(R, tol=1e-6)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)          # sin(theta)
    c = 0.5 * (np.trace(R) - 1.0)  # cos(theta)
    theta = math.atan2(s, c)

    if theta < 1e-6:
        # w = sin(theta) * axis ~ theta * axis with relative error O(theta^2).
        return w
    if theta < math.pi - 1e-3:
        return w * (theta / s)

    # Near pi: B = (R + I)/2 = ((1+c)/2) I + (s/2) K + ((1-c)/2) aa^T.
    # The symmetric rank-one part dominates; recover the axis from it.
    B = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(B)))
    half_one_minus_c = 0.5 * (1.0 - c)
    half_one_plus_c = 0.5 * (1.0 + c)
    axis = np.empty(3)
    axis[k] = math.sqrt(max((B[k, k] - half_one_plus_c) / half_one_minus_c, 0.0))
    for i in range(3):
        if i != k:
            axis[i] = (B[i, k] + B[k, i]) / (2.0 * half_one_minus_c * axis[k])
    axis = axis / np.linalg.norm(axis)
    # Orient along the antisymmetric part while it still carries sign.
    if np.dot(w, axis) < 0:
        axis = -axis
    return axis * theta


@dataclass(frozen=True)
class RelPoseDescriptor:
    """The 8-D conditioning signal (axis-angle; t_rel; delta rx; delta ry)."""

    aa: np.ndarray
    t_rel: np.ndarray
    drx: float
    dry: float

    def __post_init__(self):
        aa = np.asarray(self.aa, dtype=float)
        t_rel = np.asarray(self.t_rel, dtype=float)
        if aa.shape != (3,) or t_rel.shape != (3,):
            raise ValueError("aa and t_rel must be 3-vectors")
        object.__setattr__(self, "aa", aa)
        object.__setattr__(self, "t_rel", t_rel)
        object.__setattr__(self, "drx", float(self.drx))
        object.__setattr__(self, "dry", float(self.dry))

    def as_vector(self) -> np.ndarray:
        """Flat float64 array (aa; t_rel; drx; dry), exactly 8 components."""
        return np.concatenate([self.aa, self.t_rel, [self.drx, self.dry]])

    @classmethod
    def from_vector(cls, v) -> "RelPoseDescriptor":
        v = np.asarray(v, dtype=float)
        if v.shape != (8,):
            raise ValueError(f"expected 8 components, got shape {v.shape}")
        return cls(aa=v[:3], t_rel=v[3:6], drx=v[6], dry=v[7])

    def in_frame(self) -> bool:
        """True when the NDC deltas keep the object inside the image."""
        return abs(self.drx) <= 1.0 and abs(self.dry) <= 1.0


# Canonical NDC deltas of the "object pushed out of frame" condition; any
# magnitude beyond 1 works, one fixed value keeps it deterministic.
OUT_OF_FRAME_SHIFT = (2.0, 0.0)


def build_descriptor(src: EulerCamera, tgt: EulerCamera) -> RelPoseDescriptor:
    """Relative-pose descriptor f for a source -> target view change."""
    rel = relative_transform(look_at_extrinsics(src), look_at_extrinsics(tgt))
    return RelPoseDescriptor(
        aa=so3_log(rel.R),
        t_rel=rel.t,
        drx=tgt.rx - src.rx,
        dry=tgt.ry - src.ry,
    )


def build_outofframe_descriptor(src: EulerCamera) -> RelPoseDescriptor:
    """Descriptor that moves the object outside the image frame entirely."""
    return RelPoseDescriptor(
        aa=np.zeros(3),
        t_rel=np.zeros(3),
        drx=OUT_OF_FRAME_SHIFT[0],
        dry=OUT_OF_FRAME_SHIFT[1],
    )


def project_point(x_world, cam: EulerCamera) -> np.ndarray:
    """Project a world point to NDC: pinhole divide plus the (rx, ry) shift."""
    xc = look_at_extrinsics(cam).apply(x_world)
    if xc[2] <= 1e-9:
        raise BehindCameraError(f"point has camera depth {xc[2]:.3e}")
    return np.array([xc[0] / xc[2] + cam.rx, xc[1] / xc[2] + cam.ry])
