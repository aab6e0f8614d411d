"""Domain primitives: events, pinhole camera, rigid transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DomainError

# Orthonormality drift above this triggers re-projection onto SO(3) in compose().
REPROJECT_TOL = 1e-10
# Construction rejects matrices further than this from a rotation.
VALIDATE_TOL = 1e-6


def _frozen(a, shape, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise DomainError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def orthonormality_error(r: np.ndarray) -> float:
    return float(np.abs(r.T @ r - np.eye(3)).max())


def rot_z(angle: float) -> np.ndarray:
    """Rotation about +z by ``angle`` radians (counter-clockwise seen from above)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> R x + t``.

    Instances are immutable; arrays are stored read-only.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise DomainError("non-finite rigid transform")
        if orthonormality_error(r) > VALIDATE_TOL or np.linalg.det(r) < 0:
            raise DomainError("rotation matrix is not a proper rotation")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, q_xyzw, translation) -> "RigidTransform":
        q = np.asarray(q_xyzw, dtype=float)
        if not np.isclose(np.linalg.norm(q), 1.0, atol=1e-6):
            raise DomainError(f"quaternion is not unit norm: {q}")
        return cls(Rotation.from_quat(q).as_matrix(), translation)

    @classmethod
    def yaw(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot_z(angle), translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        r = self.rotation @ other.rotation
        if orthonormality_error(r) > REPROJECT_TOL:
            r = nearest_rotation(r)
        return RigidTransform(r, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def yaw_angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(a: RigidTransform) -> RigidTransform:
    return a.inverse()


class PoseSample(NamedTuple):
    t: float
    pose: RigidTransform


class Event(NamedTuple):
    x: float
    y: float
    t: float
    polarity: int


@dataclass(frozen=True, eq=False)
class BearingRay:
    origin: np.ndarray
    direction: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0.0:
            raise DomainError("ray direction must be a finite non-zero vector")
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        object.__setattr__(self, "direction", _frozen(d / n, (3,)))

    def point(self, depth: float) -> np.ndarray:
        return self.origin + depth * self.direction


class EventArray:
    """Time-sorted event stream stored as parallel arrays.

    Polarity is kept for I/O round trips only; nothing downstream reads it.
    """

    __slots__ = ("t", "x", "y", "p")

    def __init__(self, t, x, y, p=None):
        t = np.asarray(t, dtype=np.float64).ravel()
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        p = np.ones_like(t, dtype=np.int8) if p is None else np.asarray(p, dtype=np.int8).ravel()
        if not (t.shape == x.shape == y.shape == p.shape):
            raise DomainError("event arrays must have equal length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError("events must have finite coordinates and timestamps")
        if t.size > 1 and np.any(np.diff(t) < 0):
            bad = int(np.flatnonzero(np.diff(t) < 0)[0]) + 1
            raise DomainError(f"event timestamps are not sorted (index {bad})")
        for name, arr in (("t", t), ("x", x), ("y", y), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __setattr__(self, name, value):
        raise AttributeError("EventArray is immutable")

    @classmethod
    def from_events(cls, events: Sequence[Event]) -> "EventArray":
        if len(events) == 0:
            return cls.empty()
        arr = np.array([(e.t, e.x, e.y, e.polarity) for e in events], dtype=float)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return self.t.size

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(float(self.x[i]), float(self.y[i]), float(self.t[i]), int(self.p[i]))

    def __getitem__(self, idx) -> "EventArray":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1 if idx != -1 else None)
        if not isinstance(idx, slice) or (idx.step not in (None, 1)):
            raise TypeError("EventArray supports contiguous slicing only")
        return EventArray(self.t[idx], self.x[idx], self.y[idx], self.p[idx])

    def concat(self, other: "EventArray") -> "EventArray":
        """Merge two streams, keeping time order (stable)."""
        t = np.concatenate([self.t, other.t])
        order = np.argsort(t, kind="stable")
        return EventArray(
            t[order],
            np.concatenate([self.x, other.x])[order],
            np.concatenate([self.y, other.y])[order],
            np.concatenate([self.p, other.p])[order],
        )

    def index_range(self, t0: float, t1: float) -> tuple[int, int]:
        """Half-open index range of events with ``t0 <= t <= t1``."""
        return int(np.searchsorted(self.t, t0, "left")), int(np.searchsorted(self.t, t1, "right"))

    def window(self, t0: float, t1: float) -> "EventArray":
        i0, i1 = self.index_range(t0, t1)
        return self[i0:i1]

    @property
    def pixels(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self) else 0.0


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with radial-tangential distortion.

    ``distortion`` follows the usual ``(k1, k2, p1, p2, k3)`` ordering; shorter
    tuples are zero-padded.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple = ()
    max_iterations: int = 20
    tolerance_px: float = 1e-10

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise DomainError("sensor size must be positive")
        d = tuple(float(c) for c in self.distortion)
        if len(d) > 5:
            raise DomainError("at most 5 distortion coefficients are supported")
        object.__setattr__(self, "distortion", d)

    @property
    def coeffs(self) -> np.ndarray:
        c = np.zeros(5)
        c[: len(self.distortion)] = self.distortion
        return c

    @property
    def is_distorted(self) -> bool:
        return any(c != 0.0 for c in self.distortion)

    def _distort(self, xn, yn):
        k1, k2, p1, p2, k3 = self.coeffs
        r2 = xn * xn + yn * yn
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
        yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
        return xd, yd

    def _undistort(self, xd, yd):
        k1, k2, p1, p2, k3 = self.coeffs
        x, y = xd.copy(), yd.copy()
        tol = self.tolerance_px / max(self.fx, self.fy)
        for _ in range(self.max_iterations):
            ex, ey = self._distort(x, y)
            rx, ry = xd - ex, yd - ey
            if np.all(np.abs(rx) < tol) and np.all(np.abs(ry) < tol):
                break
            r2 = x * x + y * y
            radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
            dr = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
            jxx = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
            jyy = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
            jxy = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
            det = jxx * jyy - jxy * jxy
            x = x + (jyy * rx - jxy * ry) / det
            y = y + (jxx * ry - jxy * rx) / det
        return x, y

    def project(self, points) -> np.ndarray:
        return project(self, points)

    def unproject(self, pixels) -> np.ndarray:
        return unproject(self, pixels)

    def in_bounds(self, pixels, margin: float = 0.0) -> np.ndarray:
        px = np.asarray(pixels, dtype=float)
        u, v = px[..., 0], px[..., 1]
        return (
            (u >= -0.5 + margin)
            & (u <= self.width - 0.5 - margin)
            & (v >= -0.5 + margin)
            & (v <= self.height - 0.5 - margin)
        )


def project(camera: CameraModel, points) -> np.ndarray:
    """Map camera-frame points ``(..., 3)`` to pixels ``(..., 2)``."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise DomainError("cannot project points with non-positive depth")
    xn, yn = p[..., 0] / z, p[..., 1] / z
    if camera.is_distorted:
        xn, yn = camera._distort(xn, yn)
    return np.stack([camera.fx * xn + camera.cx, camera.fy * yn + camera.cy], axis=-1)


def unproject(camera: CameraModel, pixels) -> np.ndarray:
    """Map pixels ``(..., 2)`` to unit bearings ``(..., 3)`` with positive z."""
    px = np.asarray(pixels, dtype=float)
    if not np.all(np.isfinite(px)):
        raise DomainError("pixels must be finite")
    xd = (px[..., 0] - camera.cx) / camera.fx
    yd = (px[..., 1] - camera.cy) / camera.fy
    if camera.is_distorted:
        xd, yd = camera._undistort(np.atleast_1d(xd), np.atleast_1d(yd))
        xd, yd = xd.reshape(px.shape[:-1]), yd.reshape(px.shape[:-1])
    f = np.stack([xd, yd, np.ones_like(xd)], axis=-1)
    return f / np.linalg.norm(f, axis=-1, keepdims=True)
