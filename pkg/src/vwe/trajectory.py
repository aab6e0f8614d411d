"""Continuous-time vehicle trajectories and camera poses.

Axis convention (vehicle frame): heading along +y, z up, x to the right of
the heading.  A positive yaw rate ``omega`` bends the path towards +x, i.e.
the vehicle turns clockwise seen from above, and its heading stays tangential
to the path.  Camera poses are ``T_wc(t) = T_wv(t) @ T_vc``.

All pose-array helpers work on ``(R, t)`` pairs with shapes ``(N, 3, 3)`` and
``(N, 3)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .core import PoseSample, RigidTransform
from .errors import DegenerateHeadingError, DomainError, FitError

log = logging.getLogger(__name__)

SERIES_SWITCH = 1e-6

# Camera optical axis (+z) along the vehicle heading (+y), image rows down (-z).
FORWARD_FACING_R_VC = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


# ----------------------------------------------------------------------------
# pose-array helpers
# ----------------------------------------------------------------------------


def compose_arrays(ra, ta, rb, tb):
    """Batched ``A @ B`` for pose arrays (either side may be a single pose)."""
    r = np.matmul(ra, rb)
    t = np.einsum("...ij,...j->...i", ra, tb) + ta
    return r, t


def invert_arrays(r, t):
    rt = np.swapaxes(r, -1, -2)
    return rt, -np.einsum("...ij,...j->...i", rt, t)


def yaw_matrices(angle) -> np.ndarray:
    a = np.asarray(angle, dtype=float)
    c, s = np.cos(a), np.sin(a)
    r = np.zeros(a.shape + (3, 3))
    r[..., 0, 0] = c
    r[..., 0, 1] = -s
    r[..., 1, 0] = s
    r[..., 1, 1] = c
    r[..., 2, 2] = 1.0
    return r


# ----------------------------------------------------------------------------
# extrinsics and the model base class
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Camera-to-vehicle transform ``(R_vc, t_vc)``."""

    R_vc: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_vc: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        tf = RigidTransform(self.R_vc, self.t_vc)  # validates
        object.__setattr__(self, "R_vc", tf.rotation)
        object.__setattr__(self, "t_vc", tf.translation)

    @classmethod
    def forward_facing(cls, t_vc=(0.0, 0.0, 0.0)) -> "Extrinsics":
        return cls(FORWARD_FACING_R_VC, np.asarray(t_vc, dtype=float))

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform(self.R_vc, self.t_vc)


class TrajectoryModel:
    """Continuous pose function; subclasses implement ``_vehicle_arrays``.

    ``anchor`` maps the model's own origin frame into the world frame, which
    lets tests apply a global rigid motion without touching the parameters.
    """

    extrinsics: Extrinsics
    anchor: RigidTransform

    @property
    def domain(self) -> tuple[float, float]:
        return (-np.inf, np.inf)

    def _vehicle_arrays(self, t: np.ndarray):
        raise NotImplementedError

    def _check_domain(self, t):
        a, b = self.domain
        span = max(1.0, abs(a) if np.isfinite(a) else 1.0, abs(b) if np.isfinite(b) else 1.0)
        eps = 1e-12 * span
        if np.any(t < a - eps) or np.any(t > b + eps):
            raise DomainError(f"time outside trajectory domain [{a}, {b}]")

    def vehicle_arrays(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        self._check_domain(t)
        r, p = self._vehicle_arrays(t)
        if self.anchor is not None:
            r, p = compose_arrays(self.anchor.rotation, self.anchor.translation, r, p)
        return r, p

    def camera_arrays(self, t):
        r, p = self.vehicle_arrays(t)
        return compose_arrays(r, p, self.extrinsics.R_vc, self.extrinsics.t_vc)

    def vehicle_pose(self, t: float) -> RigidTransform:
        r, p = self.vehicle_arrays([t])
        return RigidTransform(r[0], p[0])

    def camera_pose(self, t: float) -> RigidTransform:
        r, p = self.camera_arrays([t])
        return RigidTransform(r[0], p[0])

    def relative_camera_arrays(self, t_r: float, t):
        """Poses of the camera at times ``t`` expressed in the camera frame at ``t_r``."""
        rr, pr = self.camera_arrays([t_r])
        rk, pk = self.camera_arrays(t)
        ri, pi = invert_arrays(rr[0], pr[0])
        return compose_arrays(ri, pi, rk, pk)

    def sample(self, times) -> list[PoseSample]:
        r, p = self.vehicle_arrays(times)
        return [PoseSample(float(t), RigidTransform(ri, pi)) for t, ri, pi in zip(np.atleast_1d(times), r, p)]


def camera_pose(model: TrajectoryModel, t: float) -> RigidTransform:
    return model.camera_pose(t)


# ----------------------------------------------------------------------------
# Ackermann constant-velocity arc
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AckermannParams:
    omega: float
    v: float
    t_ref: float = 0.0

    def __post_init__(self):
        if not self.v > 0:
            raise DomainError("forward speed v must be positive")
        if not np.isfinite(self.omega):
            raise DomainError("omega must be finite")


def ackermann_arrays(omega, v, dt):
    """Vehicle pose at ``t_ref + dt`` in the vehicle frame at ``t_ref``.

    ``omega`` and ``dt`` broadcast against each other.
    """
    omega = np.asarray(omega, dtype=float)
    dt = np.asarray(dt, dtype=float)
    a = omega * dt
    small = np.abs(a) < SERIES_SWITCH
    vdt = v * dt
    safe_a = np.where(small, 1.0, a)
    # exact arc, with 1 - cos a written as 2 sin^2(a/2) to avoid cancellation
    x_exact = vdt * 2.0 * np.sin(0.5 * a) ** 2 / safe_a
    y_exact = vdt * np.sin(a) / safe_a
    x = np.where(small, vdt * 0.5 * a, x_exact)
    y = np.where(small, vdt * (1.0 - a * a / 6.0), y_exact)
    t = np.stack(np.broadcast_arrays(x, y, np.zeros_like(x)), axis=-1)
    return yaw_matrices(-a), t


def ackermann_relative_pose(params: AckermannParams, t_k: float) -> RigidTransform:
    r, t = ackermann_arrays(params.omega, params.v, t_k - params.t_ref)
    return RigidTransform(r, t)


@dataclass(frozen=True, eq=False)
class AckermannModel(TrajectoryModel):
    params: AckermannParams
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    anchor: RigidTransform = field(default_factory=RigidTransform)

    def _vehicle_arrays(self, t):
        return ackermann_arrays(self.params.omega, self.params.v, t - self.params.t_ref)

    def with_omega(self, omega: float) -> "AckermannModel":
        return AckermannModel(AckermannParams(omega, self.params.v, self.params.t_ref), self.extrinsics, self.anchor)


@dataclass(frozen=True, eq=False)
class PiecewiseAckermannModel(TrajectoryModel):
    """Dead-reckoned chain of constant-velocity arcs.

    Segment ``i`` covers ``[boundaries[i], boundaries[i+1]]`` with yaw rate
    ``omegas[i]``; the pose at ``boundaries[0]`` is the identity (before the
    anchor).
    """

    boundaries: np.ndarray
    omegas: np.ndarray
    v: float
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    anchor: RigidTransform = field(default_factory=RigidTransform)
    start_rotations: np.ndarray = field(init=False, repr=False)
    start_positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        w = np.asarray(self.omegas, dtype=float)
        if b.ndim != 1 or b.size != w.size + 1 or np.any(np.diff(b) <= 0):
            raise DomainError("boundaries must be strictly increasing with len(omegas) + 1 entries")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "omegas", w)
        rs = np.empty((w.size + 1, 3, 3))
        ps = np.empty((w.size + 1, 3))
        rs[0], ps[0] = np.eye(3), np.zeros(3)
        seg_r, seg_p = ackermann_arrays(w, self.v, np.diff(b))
        for i in range(w.size):
            rs[i + 1], ps[i + 1] = compose_arrays(rs[i], ps[i], seg_r[i], seg_p[i])
        object.__setattr__(self, "start_rotations", rs)
        object.__setattr__(self, "start_positions", ps)

    @property
    def domain(self):
        return float(self.boundaries[0]), float(self.boundaries[-1])

    def segment_index(self, t) -> np.ndarray:
        i = np.searchsorted(self.boundaries, t, side="right") - 1
        return np.clip(i, 0, self.omegas.size - 1)

    def _vehicle_arrays(self, t):
        i = self.segment_index(t)
        r, p = ackermann_arrays(self.omegas[i], self.v, t - self.boundaries[i])
        return compose_arrays(self.start_rotations[i], self.start_positions[i], r, p)

    def path_length(self) -> float:
        return float(self.v * (self.boundaries[-1] - self.boundaries[0]))


# ----------------------------------------------------------------------------
# planar B-spline
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlanarSpline:
    """Clamped planar B-spline ``c(t) = sum_i N_{i,p}(t) P_i``.

    ``fit_rms`` is filled in by :func:`fit_spline` and is informational.
    """

    degree: int
    knots: np.ndarray
    control_points: np.ndarray
    fit_rms: float | None = None

    def __post_init__(self):
        p = int(self.degree)
        u = np.asarray(self.knots, dtype=float).copy()
        c = np.asarray(self.control_points, dtype=float).copy()
        if p < 1:
            raise DomainError("degree must be at least 1")
        if c.ndim != 2 or c.shape[1] != 2:
            raise DomainError("control points must have shape (n+1, 2)")
        n = c.shape[0] - 1
        if n < p:
            raise DomainError(f"need at least {p + 1} control points for degree {p}")
        if u.size != n + p + 2:
            raise DomainError(f"expected {n + p + 2} knots, got {u.size}")
        if np.any(np.diff(u) < 0):
            raise DomainError("knots must be non-decreasing")
        if np.any(u[: p + 1] != u[0]) or np.any(u[-(p + 1):] != u[-1]) or u[-1] <= u[0]:
            raise DomainError("knot vector must be clamped with a non-empty domain")
        u.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "degree", p)
        object.__setattr__(self, "knots", u)
        object.__setattr__(self, "control_points", c)

    @property
    def n(self) -> int:
        return self.control_points.shape[0] - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[self.n + 1])

    def with_control_points(self, control_points) -> "PlanarSpline":
        return PlanarSpline(self.degree, self.knots, control_points)

    def _check(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a, b = self.domain
        eps = 1e-12 * max(1.0, abs(a), abs(b))
        if np.any(~np.isfinite(t)) or np.any(t < a - eps) or np.any(t > b + eps):
            raise DomainError(f"t outside spline domain [{a}, {b}]")
        return np.clip(t, a, b)

    def find_span(self, t) -> np.ndarray:
        span = np.searchsorted(self.knots, t, side="right") - 1
        return np.clip(span, self.degree, self.n)

    def basis(self, t):
        """Non-zero basis values at ``t``: ``(span, N)`` with ``N`` of shape ``(len(t), p+1)``."""
        t = self._check(t)
        return _basis_funs(self.knots, self.degree, t, self.find_span(t))

    def basis_matrix(self, t) -> np.ndarray:
        """Dense ``(len(t), n+1)`` matrix of all basis functions."""
        span, nb = self.basis(t)
        m = np.zeros((span.size, self.n + 1))
        rows = np.arange(span.size)[:, None]
        cols = span[:, None] - self.degree + np.arange(self.degree + 1)[None, :]
        m[rows, cols] = nb
        return m

    def position(self, t) -> np.ndarray:
        span, nb = self.basis(t)
        idx = span[:, None] - self.degree + np.arange(self.degree + 1)[None, :]
        return np.einsum("kr,krd->kd", nb, self.control_points[idx])

    def derivative(self) -> "PlanarSpline":
        """Exact derivative as a spline of degree ``p - 1`` (knots trimmed at both ends)."""
        p, u, c = self.degree, self.knots, self.control_points
        if p == 1:
            # piecewise-constant velocity; represent as degree-1 spline with doubled knots
            raise DomainError("derivative spline of a degree-1 curve is not continuous")
        denom = u[p + 1 : p + 1 + self.n] - u[1 : 1 + self.n]
        safe = np.where(denom > 0, denom, 1.0)
        q = np.where((denom > 0)[:, None], p * (c[1:] - c[:-1]) / safe[:, None], 0.0)
        return PlanarSpline(p - 1, u[1:-1], q)

    def velocity(self, t) -> np.ndarray:
        t = self._check(t)
        if self.degree == 1:
            span = self.find_span(t)
            u, c = self.knots, self.control_points
            return (c[span] - c[span - 1]) / (u[span + 1] - u[span])[:, None]
        return self._derivative_spline.position(t)

    @property
    def _derivative_spline(self) -> "PlanarSpline":
        d = self.__dict__.get("_dcache")
        if d is None:
            d = self.derivative()
            object.__setattr__(self, "_dcache", d)
        return d

    def arc_length(self, order: int = 8) -> float:
        """Curve length by Gauss-Legendre quadrature on every knot span."""
        x, w = np.polynomial.legendre.leggauss(order)
        u = np.unique(self.knots[self.degree : self.n + 2])
        a, b = u[:-1, None], u[1:, None]
        t = (0.5 * (b - a) * x[None, :] + 0.5 * (b + a)).ravel()
        speed = np.linalg.norm(self.velocity(t), axis=1).reshape(a.size, order)
        return float(np.sum(0.5 * (b - a) * speed * w[None, :]))

    def support(self, i: int) -> tuple[float, float]:
        """Time interval on which control point ``i`` has influence."""
        return float(self.knots[i]), float(self.knots[i + self.degree + 1])


def _basis_funs(knots, p, t, span):
    m = t.size
    nb = np.zeros((m, p + 1))
    nb[:, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    for j in range(1, p + 1):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(m)
        for r in range(j):
            temp = nb[:, r] / (right[:, r + 1] + left[:, j - r])
            nb[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        nb[:, j] = saved
    return span, nb


def spline_position(s: PlanarSpline, t) -> np.ndarray:
    return s.position(t)


def spline_velocity(s: PlanarSpline, t) -> np.ndarray:
    return s.velocity(t)


def heading_rotations(velocity, eps_vel: float = 1e-8) -> np.ndarray:
    """Tangential vehicle orientation for planar velocities ``(N, 2)``."""
    vel = np.atleast_2d(np.asarray(velocity, dtype=float))
    speed = np.linalg.norm(vel, axis=1)
    if np.any(speed <= eps_vel):
        raise DegenerateHeadingError(f"speed {speed.min():.3g} m/s too small to define a heading")
    hx, hy = vel[:, 0] / speed, vel[:, 1] / speed
    r = np.zeros((vel.shape[0], 3, 3))
    r[:, 0, 0] = hy
    r[:, 1, 0] = -hx
    r[:, 0, 1] = hx
    r[:, 1, 1] = hy
    r[:, 2, 2] = 1.0
    return r


def spline_pose(s: PlanarSpline, t: float, eps_vel: float = 1e-8) -> RigidTransform:
    r = heading_rotations(s.velocity([t]), eps_vel)[0]
    c = s.position([t])[0]
    return RigidTransform(r, [c[0], c[1], 0.0])


@dataclass(frozen=True, eq=False)
class SplineModel(TrajectoryModel):
    spline: PlanarSpline
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    anchor: RigidTransform = field(default_factory=RigidTransform)
    eps_vel: float = 1e-8

    @property
    def domain(self):
        return self.spline.domain

    def _vehicle_arrays(self, t):
        c = self.spline.position(t)
        r = heading_rotations(self.spline.velocity(t), self.eps_vel)
        return r, np.column_stack([c, np.zeros(len(c))])

    def with_control_points(self, control_points) -> "SplineModel":
        return SplineModel(self.spline.with_control_points(control_points), self.extrinsics, self.anchor, self.eps_vel)


@dataclass(frozen=True, eq=False)
class SampledTrajectory(TrajectoryModel):
    """Discrete pose list, linearly interpolated (slerp for rotation)."""

    times: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    anchor: RigidTransform = field(default_factory=RigidTransform)

    @classmethod
    def from_samples(cls, samples: Sequence[PoseSample], extrinsics: Extrinsics | None = None):
        if len(samples) < 2:
            raise DomainError("need at least two pose samples")
        times = np.array([s.t for s in samples], dtype=float)
        if np.any(np.diff(times) <= 0):
            raise DomainError("pose sample times must be strictly increasing")
        rot = np.stack([s.pose.rotation for s in samples])
        pos = np.stack([s.pose.translation for s in samples])
        return cls(times, rot, pos, extrinsics or Extrinsics())

    @property
    def domain(self):
        return float(self.times[0]), float(self.times[-1])

    def _vehicle_arrays(self, t):
        slerp = Slerp(self.times, Rotation.from_matrix(self.rotations))
        r = slerp(np.clip(t, *self.domain)).as_matrix()
        p = np.column_stack([np.interp(t, self.times, self.positions[:, k]) for k in range(3)])
        return r, p


# ----------------------------------------------------------------------------
# spline fitting
# ----------------------------------------------------------------------------


def _averaged_knots(params, p):
    m = params.size - 1
    inner = [params[j : j + p].mean() for j in range(1, m - p + 1)]
    return np.concatenate([np.full(p + 1, params[0]), inner, np.full(p + 1, params[-1])])


def _approximation_knots(params, p, n):
    m = params.size - 1
    d = (m + 1) / (n - p + 1)
    inner = []
    for j in range(1, n - p + 1):
        i = int(j * d)
        alpha = j * d - i
        inner.append((1.0 - alpha) * params[i - 1] + alpha * params[i])
    return np.concatenate([np.full(p + 1, params[0]), inner, np.full(p + 1, params[-1])])


def fit_spline(
    samples: Sequence[PoseSample],
    degree: int = 3,
    n_ctrl: int = 10,
    parametrization: str = "time",
    pin_heading: bool = False,
) -> PlanarSpline:
    """Least-squares planar spline through sampled vehicle positions.

    ``n_ctrl`` is the index of the last control point, so the spline has
    ``n_ctrl + 1`` of them.  End points are interpolated (the first pose pins
    the gauge); interior points solve the least-squares problem.  Knots come
    from parameter averaging: plain averaging when ``n_ctrl`` equals the
    number of samples minus one, otherwise the approximation variant that
    spreads ``n_ctrl - degree`` interior knots over the parameters.

    ``parametrization`` selects the sample parameters: ``"time"`` uses the
    timestamps, ``"chord"`` uses cumulative chord length mapped onto the
    time span (identical for constant-speed input).

    With ``pin_heading`` the second control point is constrained to the
    heading line of the first sample's pose, so the spline starts exactly
    in the first pose; only the distance along that line is fitted.
    """
    p, n = int(degree), int(n_ctrl)
    m = len(samples) - 1
    if n < p:
        raise FitError(f"n_ctrl={n} too small for degree {p}")
    if m < n:
        raise FitError(f"{m + 1} samples cannot determine {n + 1} control points")
    times = np.array([s.t for s in samples], dtype=float)
    if np.any(np.diff(times) <= 0):
        raise FitError("sample times must be strictly increasing")
    pts = np.array([s.pose.translation[:2] for s in samples], dtype=float)

    if parametrization == "time":
        params = times
    elif parametrization == "chord":
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        if chord[-1] <= 0:
            raise FitError("samples do not move; chord parametrization undefined")
        params = times[0] + (times[-1] - times[0]) * chord / chord[-1]
    else:
        raise ValueError(f"unknown parametrization {parametrization!r}")

    knots = _averaged_knots(params, p) if n == m else _approximation_knots(params, p, n)
    if np.any(np.diff(knots[p : n + 2]) <= 0):
        raise FitError("degenerate knot spacing (samples too clustered)")
    probe = PlanarSpline(p, knots, np.zeros((n + 1, 2)))
    a = probe.basis_matrix(params)
    ctrl = np.zeros((n + 1, 2))
    ctrl[0], ctrl[n] = pts[0], pts[-1]
    if n > 1 and pin_heading:
        h = samples[0].pose.rotation[:2, 1]
        h = h / np.linalg.norm(h)
        rhs = pts - np.outer(a[:, 0] + a[:, 1], pts[0]) - np.outer(a[:, n], pts[-1])
        # unknowns: distance along the heading, then free points 2..n-1
        cols = [np.kron(a[:, 1:2], h[None, :]).reshape(-1, 1)]
        for j in range(2, n):
            cols.append(np.kron(a[:, j : j + 1], np.eye(2)))
        big = np.hstack(cols) if len(cols) > 1 else cols[0]
        sol, _, rank, _ = np.linalg.lstsq(big, rhs.reshape(-1), rcond=None)
        if rank < big.shape[1]:
            raise FitError(f"rank-deficient least squares ({rank} < {big.shape[1]})")
        ctrl[1] = pts[0] + sol[0] * h
        ctrl[2:n] = sol[1:].reshape(-1, 2)
    elif n > 1:
        rhs = pts - np.outer(a[:, 0], pts[0]) - np.outer(a[:, n], pts[-1])
        ai = a[:, 1:n]
        sol, _, rank, _ = np.linalg.lstsq(ai, rhs, rcond=None)
        if rank < n - 1:
            raise FitError(f"rank-deficient least squares ({rank} < {n - 1})")
        ctrl[1:n] = sol
    resid = np.linalg.norm(a @ ctrl - pts, axis=1)
    rms = float(np.sqrt(np.mean(resid**2)))
    log.debug("spline fit: degree=%d n_ctrl=%d rms=%.3g m max=%.3g m", p, n, rms, resid.max())
    return PlanarSpline(p, knots, ctrl, fit_rms=rms)


def fit_residuals(spline: PlanarSpline, samples: Sequence[PoseSample]) -> np.ndarray:
    t = np.array([s.t for s in samples])
    pts = np.array([s.pose.translation[:2] for s in samples])
    return np.linalg.norm(spline.position(t) - pts, axis=1)
