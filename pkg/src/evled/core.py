"""Core value types: events, camera geometry, poses, and the per-pixel time map.

Timestamps are integer microseconds throughout the package. All types here are
plain values; the TimeMap is single-writer (callers must partition by pixel
region if they parallelize).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# TimeMap sentinel for "no accepted timestamp yet". Distinct from t=0 so a
# genuine event at t=0 stays representable.
NEVER = -1

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Event:
    """One polarity change: pixel column/row, microsecond timestamp, sign."""

    x: int
    y: int
    t: int
    p: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"pixel coordinates must be non-negative, got ({self.x}, {self.y})")
        if self.t < 0:
            raise ValueError(f"timestamp must be non-negative, got {self.t}")
        if self.p not in (-1, 1):
            raise ValueError(f"polarity must be +1 or -1, got {self.p}")


class EventStream:
    """Time-sorted event columns plus the sensor resolution.

    Events are stored as parallel numpy arrays (x, y, t, p) for speed; use
    iteration or indexing to get individual Event values.
    """

    __slots__ = ("x", "y", "t", "p", "width", "height")

    def __init__(self, x, y, t, p, width: int, height: int, validate: bool = True):
        self.x = np.asarray(x, dtype=np.int32)
        self.y = np.asarray(y, dtype=np.int32)
        self.t = np.asarray(t, dtype=np.int64)
        self.p = np.asarray(p, dtype=np.int8)
        self.width = int(width)
        self.height = int(height)
        if validate:
            self._validate()

    def _validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor resolution must be positive")
        if n == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if self.t[0] < 0:
            raise ValueError("timestamps must be non-negative")
        if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
            raise ValueError("event out of sensor bounds")
        if np.any(np.abs(self.p) != 1):
            raise ValueError("polarity must be +1 or -1")

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls([], [], [], [], width, height)

    @classmethod
    def from_events(cls, events, width: int, height: int) -> "EventStream":
        events = list(events)
        return cls(
            [e.x for e in events],
            [e.y for e in events],
            [e.t for e in events],
            [e.p for e in events],
            width,
            height,
        )

    @classmethod
    def merged(cls, streams) -> "EventStream":
        """Merge streams into one time-sorted stream (stable order for ties)."""
        streams = list(streams)
        if not streams:
            raise ValueError("need at least one stream to merge")
        w, h = streams[0].width, streams[0].height
        if any(s.width != w or s.height != h for s in streams):
            raise ValueError("streams must share the same resolution")
        x = np.concatenate([s.x for s in streams])
        y = np.concatenate([s.y for s in streams])
        t = np.concatenate([s.t for s in streams])
        p = np.concatenate([s.p for s in streams])
        order = np.argsort(t, kind="stable")
        return cls(x[order], y[order], t[order], p[order], w, h, validate=False)

    def select(self, mask) -> "EventStream":
        return EventStream(
            self.x[mask], self.y[mask], self.t[mask], self.p[mask],
            self.width, self.height, validate=False,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __repr__(self):
        return f"EventStream(n={len(self)}, {self.width}x{self.height})"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters: focal lengths, principal point, resolution (pixels)."""

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
            raise ValueError("principal point must lie inside the sensor")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping camera frame to world frame.

    `rotation` is a 3x3 orthonormal matrix, `translation` the camera center in
    world meters: X_world = R @ X_cam + translation.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=float)
        return (pts - self.translation) @ self.rotation


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_exp(phi) -> np.ndarray:
    """Rotation matrix from exponential coordinates (Rodrigues formula).

    Small angles use the series expansion, so phi -> 0 is exact.
    """
    phi = np.asarray(phi, dtype=float).reshape(3)
    if not np.all(np.isfinite(phi)):
        raise ValueError("rotation vector must be finite")
    theta2 = float(phi @ phi)
    w = skew(phi)
    if theta2 < 1e-16:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * w + b * (w @ w)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): d(exp(phi^) x)/dphi = -exp(phi^) [x]^ J_r(phi)."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta2 = float(phi @ phi)
    w = skew(phi)
    if theta2 < 1e-16:
        c1 = 0.5 - theta2 / 24.0
        c2 = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = np.sqrt(theta2)
        c1 = (1.0 - np.cos(theta)) / theta2
        c2 = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - c1 * w + c2 * (w @ w)


def project(point, pose: Pose, intrinsics: CameraIntrinsics):
    """Project a world point to real-valued pixel coordinates.

    Returns (u, v), or None when the point lies at or behind the camera
    (camera-frame depth <= 1e-9).
    """
    pt = np.asarray(point, dtype=float).reshape(3)
    if not np.all(np.isfinite(pt)):
        raise ValueError("point must be finite")
    xc = pose.rotation.T @ (pt - pose.translation)
    if xc[2] <= 1e-9:
        return None
    u = intrinsics.fx * xc[0] / xc[2] + intrinsics.cx
    v = intrinsics.fy * xc[1] / xc[2] + intrinsics.cy
    return (float(u), float(v))


def backproject(u: float, v: float, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point for pixel (u, v) at the given depth."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    return np.array(
        [
            (u - intrinsics.cx) / intrinsics.fx * depth,
            (v - intrinsics.cy) / intrinsics.fy * depth,
            depth,
        ]
    )


class TimeMap:
    """Per-pixel record of the last accepted rising-edge timestamp.

    Stored timestamps only ever increase; untouched pixels hold the NEVER
    sentinel. Single-writer: do not update one map from several threads.
    """

    __slots__ = ("last_t", "width", "height")

    def __init__(self, width: int, height: int):
        if width <= 0 or height <= 0:
            raise ValueError("resolution must be positive")
        self.width = int(width)
        self.height = int(height)
        self.last_t = np.full((height, width), NEVER, dtype=np.int64)

    def last(self, x: int, y: int):
        """Last accepted timestamp at a pixel, or None if never touched."""
        self._check_bounds(x, y)
        t = int(self.last_t[y, x])
        return None if t == NEVER else t

    def update(self, event: Event, base_period_us: int, tolerance_us: int) -> bool:
        """Apply the debounce rule; return whether the event was accepted.

        An untouched pixel accepts unconditionally; otherwise the event is
        accepted iff t > last + base_period - tolerance. Accepted timestamps
        replace the stored one.
        """
        if event.p != 1:
            raise ValueError("time map updates expect positive-polarity events")
        if not base_period_us > tolerance_us >= 0:
            raise ValueError("need base_period > tolerance >= 0")
        self._check_bounds(event.x, event.y)
        last = self.last_t[event.y, event.x]
        if last != NEVER and not event.t > last + base_period_us - tolerance_us:
            return False
        self.last_t[event.y, event.x] = event.t
        return True

    def _check_bounds(self, x: int, y: int):
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"pixel ({x}, {y}) outside {self.width}x{self.height} map")
