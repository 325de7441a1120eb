"""Pinhole cameras, rays, projection and pose interpolation.

Conventions (fixed globally):

* Poses are camera-to-world: ``x_world = R @ x_cam + T``; the camera
  center is ``T``.  The camera frame has +z forward, +x right, +y down.
* Continuous image coordinates are corner-origin: pixel ``(u, v)`` covers
  ``[u, u+1) x [v, v+1)`` and its center is ``(u + 0.5, v + 0.5)``.  The
  principal point ``(cx, cy)`` lives in this continuous space.
* ``ray_for_pixel`` casts through the pixel center, i.e. it adds the 0.5
  offset to its input; ``project`` returns raw continuous coordinates, so
  a projected ray point lands on ``(u + 0.5, v + 0.5)``.

All functions are pure and operate on immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-6
BEHIND_EPS = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d):
        return Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"],
                          int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform [R|T] with the convention flag kept
    explicit so serialized poses are unambiguous."""

    R: np.ndarray
    T: np.ndarray
    convention: str = "c2w"

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if self.convention != "c2w":
            raise ValueError(f"unsupported pose convention {self.convention!r}")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (err {err:.2e})")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")

    @property
    def center(self):
        return self.T

    def to_list(self):
        """12 numbers, row-major [R|T]."""
        return np.hstack([self.R, self.T[:, None]]).reshape(-1).tolist()

    @staticmethod
    def from_list(vals, convention="c2w"):
        m = np.asarray(vals, dtype=np.float64).reshape(3, 4)
        return Pose(m[:, :3], m[:, 3], convention)


@dataclass(frozen=True)
class Ray:
    o: np.ndarray
    d: np.ndarray
    t_n: float
    t_f: float

    def __post_init__(self):
        o = np.asarray(self.o, dtype=np.float64).reshape(3)
        d = np.asarray(self.d, dtype=np.float64).reshape(3)
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "d", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0 < self.t_n < self.t_f):
            raise ValueError("require 0 < t_n < t_f")

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.o + t[..., None] * self.d if t.ndim else self.o + t * self.d


def ray_for_pixel(intr, pose, pixel, t_n, t_f):
    """Ray through the center of pixel (u, v); input indexes pixels, so the
    cast point is (u + 0.5, v + 0.5) in continuous coordinates."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    o, d = rays_for_pixels(intr, pose, np.array([[u, v]]), centered=True)
    return Ray(o[0], d[0], t_n, t_f)


def rays_for_pixels(intr, pose, uv, centered=True):
    """Vectorized ray origins/directions for [N,2] pixel indices."""
    uv = np.asarray(uv, dtype=np.float64)
    off = 0.5 if centered else 0.0
    x = (uv[:, 0] + off - intr.cx) / intr.fx
    y = (uv[:, 1] + off - intr.cy) / intr.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    dirs_world = dirs_cam @ pose.R.T
    dirs_world /= np.linalg.norm(dirs_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs_world.shape)
    return origins, dirs_world


def project(intr, pose, x):
    """Pinhole projection of world points into continuous image coordinates.

    Returns (u, v, depth, behind) arrays; `depth` is the camera-frame z and
    `behind` flags points with depth <= 1e-8 (their u, v are meaningless
    but finite).  Accepts a single point or an [N,3] batch.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cam = (pts - pose.T) @ pose.R
    depth = cam[:, 2]
    behind = depth <= BEHIND_EPS
    safe = np.where(behind, 1.0, depth)
    u = intr.fx * cam[:, 0] / safe + intr.cx
    v = intr.fy * cam[:, 1] / safe + intr.cy
    if single:
        return u[0], v[0], depth[0], behind[0]
    return u, v, depth, behind


# ---------------------------------------------------------------------------
# rotations and pose interpolation


def rot_to_quat(R):
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                          (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                          0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                          (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_to_rot(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def slerp_quat(q_from, q_to, t):
    """Shortest-arc spherical interpolation; t=0 -> q_from, t=1 -> q_to.

    The hemisphere is fixed by negating q_to when dot(q_from, q_to) < 0;
    an exactly antipodal pair (180 degree rotation) keeps the sign of
    q_to as stored, which is deterministic for canonicalized (w >= 0)
    quaternions.  Nearly parallel inputs fall back to normalized lerp.
    """
    q0 = np.asarray(q_from, dtype=np.float64)
    q1 = np.asarray(q_to, dtype=np.float64)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        out = q0 + t * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return (np.sin((1.0 - t) * theta) / s) * q0 + (np.sin(t * theta) / s) * q1


def rotation_angle(Ra, Rb):
    """Geodesic angle (radians) between two rotations."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def interpolate_pose(p1, p2, alpha):
    """Pose between p2 (alpha=0) and p1 (alpha=1).

    Translation is linear, T = alpha*T1 + (1-alpha)*T2, and rotation is the
    matching quaternion slerp, so alpha weights p1 for both parts.
    """
    alpha = float(alpha)
    T = alpha * p1.T + (1.0 - alpha) * p2.T
    q = slerp_quat(rot_to_quat(p2.R), rot_to_quat(p1.R), alpha)
    return Pose(quat_to_rot(q), T)


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world pose at `eye` with +z toward `target`, +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    z = fwd / n
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        # forward parallel to up: pick an arbitrary orthogonal right vector
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        nx = np.linalg.norm(x)
        if nx < 1e-9:
            x = np.cross(np.array([0.0, 0.0, 1.0]), z)
            nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Pose(R, eye)


def random_rotation(rng):
    q = rng.standard_normal(4)
    return quat_to_rot(q / np.linalg.norm(q))
