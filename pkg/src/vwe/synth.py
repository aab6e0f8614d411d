"""Synthetic edge scenes and displacement-threshold event generation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import CameraModel, EventArray, PoseSample
from .errors import DomainError, InsufficientDataError
from .trajectory import (
    AckermannModel,
    AckermannParams,
    Extrinsics,
    PiecewiseAckermannModel,
    SplineModel,
    TrajectoryModel,
    fit_spline,
    invert_arrays,
)

log = logging.getLogger(__name__)

REPROJECTION_LIMIT_PX = 0.5


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """3D line segments, shape ``(S, 2, 3)`` in the world frame (meters)."""

    segments: np.ndarray
    points_per_meter: float = 40.0

    def __post_init__(self):
        seg = np.array(self.segments, dtype=float).reshape(-1, 2, 3)
        if not np.all(np.isfinite(seg)):
            raise DomainError("segment endpoints must be finite")
        if np.any(np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1) <= 0):
            raise DomainError("segments must have nonzero length")
        if not self.points_per_meter > 0:
            raise DomainError("points_per_meter must be positive")
        seg.setflags(write=False)
        object.__setattr__(self, "segments", seg)

    def points(self) -> np.ndarray:
        """Edge samples at the midpoints of ``round(length * density)`` equal pieces."""
        out = []
        for a, b in self.segments:
            n = max(1, int(round(np.linalg.norm(b - a) * self.points_per_meter)))
            s = (np.arange(n) + 0.5) / n
            out.append(a + s[:, None] * (b - a))
        return np.concatenate(out) if out else np.zeros((0, 3))


@dataclass(eq=False)
class GroundTruthBundle:
    events: EventArray
    trajectory: TrajectoryModel
    samples: list[PoseSample]
    scene: SyntheticScene
    camera: CameraModel
    depths: np.ndarray
    point_index: np.ndarray
    z_range: tuple[float, float] = (0.5, 10.0)
    meta: dict = field(default_factory=dict)

    @property
    def extrinsics(self) -> Extrinsics:
        return self.trajectory.extrinsics

    def reprojection_errors(self) -> np.ndarray:
        """Pixel distance between each event and its source point seen at the true pose."""
        ev = self.events
        if len(ev) == 0:
            return np.zeros(0)
        pts = self.scene.points()[self.point_index]
        r, p = self.trajectory.camera_arrays(ev.t)
        pc = np.einsum("nji,nj->ni", r, pts - p)
        px = self.camera.project(pc)
        return np.hypot(px[:, 0] - ev.x, px[:, 1] - ev.y)

    def verify(self) -> None:
        """Check the generator's own guarantees; raises ``DomainError``."""
        ev = self.events
        if np.any(np.diff(ev.t) < 0):
            raise DomainError("events not sorted")
        if not np.all(self.camera.in_bounds(ev.pixels)):
            raise DomainError("event outside sensor bounds")
        z0, z1 = self.z_range
        if np.any(self.depths < z0) or np.any(self.depths > z1):
            raise DomainError("event depth outside the configured frustum")
        err = self.reprojection_errors()
        if err.size and err.max() >= REPROJECTION_LIMIT_PX:
            bad = int(np.argmax(err))
            raise DomainError(f"event {bad} reprojects {err[bad]:.3g} px from its source point")


def _camera_points(r, p, pts):
    """World points into camera frames; ``r``/``p`` are per-time arrays."""
    ri, pi = invert_arrays(r, p)
    return np.einsum("...ij,nj->...ni", ri, pts) + pi[..., None, :]


def generate_events(
    scene: SyntheticScene,
    trajectory: TrajectoryModel,
    camera: CameraModel,
    duration: float,
    sampling_dt: float = 1e-3,
    seed: int = 0,
    t0: float = 0.0,
    z_range: tuple[float, float] = (0.5, 10.0),
    threshold_px: float = 1.0,
    margin_px: float = 0.0,
) -> GroundTruthBundle:
    """Emit an event each time a point's projection travels ``threshold_px``.

    Every ``sampling_dt`` the visible edge points are projected.  A point
    whose image has moved ``k >= 1`` thresholds since its last emission
    emits ``k`` events at uniformly jittered times inside the step, each at
    the exact projection for its own timestamp.  Points entering view start
    a fresh reference.  Polarity alternates per point.
    """
    if not duration > 0 or not sampling_dt > 0:
        raise DomainError("duration and sampling_dt must be positive")
    pts = scene.points()
    z0, z1 = z_range
    n_steps = max(1, int(math.ceil(duration / sampling_dt - 1e-9)))
    times = t0 + np.minimum(np.arange(n_steps + 1) * sampling_dt, duration)
    r, p = trajectory.camera_arrays(times)
    rng = np.random.default_rng(seed)

    def visible(pc):
        z = pc[:, 2]
        ok = (z >= z0) & (z <= z1)
        px = np.full((pc.shape[0], 2), np.nan)
        px[ok] = camera.project(pc[ok])
        ok &= camera.in_bounds(px, margin_px)
        return px, ok

    px, ok = visible(_camera_points(r[0], p[0], pts))
    if not ok.any() and n_steps == 0:
        raise InsufficientDataError("no scene point is visible")
    last = np.where(ok[:, None], px, np.nan)
    any_visible = ok.any()
    ev_point, ev_time = [], []
    for j in range(1, n_steps + 1):
        px, ok = visible(_camera_points(r[j], p[j], pts))
        any_visible |= ok.any()
        tracked = ok & ~np.isnan(last[:, 0])
        d = np.where(tracked[:, None], px - last, 0.0)
        dist = np.hypot(d[:, 0], d[:, 1])
        k = np.floor(dist / threshold_px + 1e-12).astype(np.int64)
        idx = np.flatnonzero(k > 0)
        if idx.size:
            counts = k[idx]
            owners = np.repeat(idx, counts)
            jitter = rng.random(owners.size)
            # sort jitter within each point so its events stay ordered
            order = np.lexsort((jitter, owners))
            ev_point.append(owners)
            ev_time.append(times[j - 1] + jitter[order] * (times[j] - times[j - 1]))
            step = counts * threshold_px / dist[idx]
            last[idx] += d[idx] * step[:, None]
        # points leaving view forget their reference; new ones start one
        last[~ok] = np.nan
        fresh = ok & np.isnan(last[:, 0])
        last[fresh] = px[fresh]
    if not any_visible:
        raise InsufficientDataError("no scene point is visible along the trajectory")

    if ev_point:
        owners = np.concatenate(ev_point)
        t_ev = np.concatenate(ev_time)
    else:
        owners = np.zeros(0, dtype=np.int64)
        t_ev = np.zeros(0)
    order = np.lexsort((owners, t_ev))
    owners, t_ev = owners[order], t_ev[order]

    # exact projection at each event's own timestamp
    re, pe = trajectory.camera_arrays(t_ev) if t_ev.size else (np.zeros((0, 3, 3)), np.zeros((0, 3)))
    pc = np.einsum("nji,nj->ni", re, pts[owners] - pe)
    keep = (pc[:, 2] >= z0) & (pc[:, 2] <= z1)
    pix = np.full((pc.shape[0], 2), np.nan)
    pix[keep] = camera.project(pc[keep])
    keep &= camera.in_bounds(pix)
    owners, t_ev, pix, depth = owners[keep], t_ev[keep], pix[keep], pc[keep, 2]

    # alternating polarity per point, in emission order
    pol = np.empty(owners.size)
    if owners.size:
        srt = np.argsort(owners, kind="stable")
        grp = owners[srt]
        start = np.r_[0, np.flatnonzero(np.diff(grp)) + 1]
        rank = np.arange(grp.size) - np.repeat(start, np.diff(np.r_[start, grp.size]))
        pol[srt] = np.where(rank % 2 == 0, 1.0, -1.0)

    events = EventArray(t_ev, pix[:, 0], pix[:, 1], pol)
    samples = trajectory.sample(times)
    log.info("generated %d events from %d points over %.3f s", len(events), len(pts), duration)
    return GroundTruthBundle(events, trajectory, samples, scene, camera, depth, owners, tuple(z_range))


# ----------------------------------------------------------------------------
# standard suites
# ----------------------------------------------------------------------------

SUITE_CAMERA = dict(fx=250.0, fy=250.0, cx=172.5, cy=129.5, width=346, height=260)


def suite_camera() -> CameraModel:
    return CameraModel(**SUITE_CAMERA)


def vertical_posts(xy, z_lo=-0.8, z_hi=1.2) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    lo = np.column_stack([xy, np.full(len(xy), z_lo)])
    hi = np.column_stack([xy, np.full(len(xy), z_hi)])
    return np.stack([lo, hi], axis=1)


def post_frames(xy, rng, z_lo=-0.8, z_hi=1.2, bar=0.5, n_bars=3) -> np.ndarray:
    """Vertical posts each carrying short horizontal bars at random heights and bearings.

    Pure vertical edges leave depth and yaw rate nearly interchangeable
    under planar motion; the bars pin depth through vertical image motion.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    segs = [vertical_posts(xy, z_lo, z_hi)]
    for q in xy:
        for _ in range(n_bars):
            z = rng.uniform(z_lo, z_hi)
            a = rng.uniform(0, np.pi)
            u = 0.5 * bar * np.array([np.cos(a), np.sin(a), 0.0])
            c = np.array([q[0], q[1], z])
            segs.append(np.array([[c - u, c + u]]))
    return np.concatenate(segs)


def corridor_posts(rng, path_xy, heading_xy, n, lateral=(0.7, 2.0), max_inner=None):
    """Seeded posts on both sides of a planar path.

    Each post picks a random path sample and a lateral offset drawn from
    ``lateral`` on a random side; ``max_inner`` caps offsets on the side the
    path bends towards (inside a turn).
    """
    path_xy = np.asarray(path_xy, dtype=float)
    heading_xy = np.asarray(heading_xy, dtype=float)
    heading_xy = heading_xy / np.linalg.norm(heading_xy, axis=1, keepdims=True)
    right = np.column_stack([heading_xy[:, 1], -heading_xy[:, 0]])
    i = rng.integers(len(path_xy), size=n)
    side = rng.choice([-1.0, 1.0], n)
    off = rng.uniform(*lateral, n)
    if max_inner is not None:
        off = np.where(side > 0, np.minimum(off, max_inner), off)
    return path_xy[i] + (side * off)[:, None] * right[i]


def frontal_wall(distance, x_range=(-1.5, 1.5), z_range=(-0.8, 0.8), n_vertical=12, n_horizontal=6):
    """Grid of edges on the plane ``y = distance`` facing a vehicle at the origin."""
    segs = []
    for x in np.linspace(*x_range, n_vertical):
        segs.append([[x, distance, z_range[0]], [x, distance, z_range[1]]])
    for z in np.linspace(*z_range, n_horizontal):
        segs.append([[x_range[0], distance, z], [x_range[1], distance, z]])
    return np.array(segs, dtype=float)


def circle_bundle(seed=0, omega=0.3, v=0.5, duration=4.0, points_per_meter=25.0, n_posts=80, sampling_dt=1e-3,
                  lateral=(0.7, 2.0), heights=(-0.8, 1.2)):
    """Constant yaw-rate arc along a corridor of posts."""
    rng = np.random.default_rng(seed)
    ext = Extrinsics.forward_facing()
    model = AckermannModel(AckermannParams(omega, v, 0.0), ext)
    tt = np.linspace(-2.0, duration + 10.0, 400)
    r, p = model.vehicle_arrays(tt)
    radius = v / abs(omega) if omega else None
    posts = corridor_posts(rng, p[:, :2], r[:, :2, 1], n_posts, lateral,
                           max_inner=None if radius is None else 0.7 * radius)
    scene = SyntheticScene(post_frames(posts, rng, *heights), points_per_meter)
    b = generate_events(scene, model, suite_camera(), duration, sampling_dt, seed)
    b.meta.update(suite="circle", omega=omega, v=v, seed=seed)
    return b


def str_bundle(seed=0, v=0.5, duration=4.0, **kw):
    """Straight motion along a corridor of posts."""
    b = circle_bundle(seed, 0.0, v, duration, **kw)
    b.meta["suite"] = "str"
    return b


LONG_OMEGAS = (0.0, 0.3, 0.4, 0.1, -0.3, -0.2)


def long_truth(v=0.5, duration=6.0, omegas=LONG_OMEGAS, n_ctrl=12) -> SplineModel:
    """Smooth spline through a dead-reckoned chain of arcs."""
    ext = Extrinsics.forward_facing()
    bounds = np.linspace(0.0, duration, len(omegas) + 1)
    chain = PiecewiseAckermannModel(bounds, np.array(omegas), v, ext)
    samples = chain.sample(np.linspace(0.0, duration, 401))
    spline = fit_spline(samples, degree=3, n_ctrl=n_ctrl)
    return SplineModel(spline, ext)


def long_bundle(seed=0, v=0.5, duration=6.0, points_per_meter=6.0, n_posts=100, sampling_dt=1e-3):
    """Varying yaw rate on a spline trajectory along a corridor of posts."""
    rng = np.random.default_rng(seed)
    model = long_truth(v, duration)
    tt = np.linspace(0, duration, 400)
    r, p = model.vehicle_arrays(tt)
    head = r[:, :2, 1]
    ext_t = np.linspace(0.0, 10.0, 100)[1:]
    path = np.concatenate([p[:, :2], p[-1, :2] + v * ext_t[:, None] * head[-1]])
    head = np.concatenate([head, np.repeat(head[-1:], ext_t.size, axis=0)])
    posts = corridor_posts(rng, path, head, n_posts)
    scene = SyntheticScene(post_frames(posts, rng), points_per_meter)
    b = generate_events(scene, model, suite_camera(), duration, sampling_dt, seed)
    b.meta.update(suite="long", v=v, seed=seed)
    return b


def wall_bundle(seed=0, distances=(2.0,), v=0.3, duration=0.4, omega=0.5, points_per_meter=60.0, sampling_dt=5e-4):
    """Walls parallel to the image plane at the given depths (at mid-sequence).

    The vehicle arcs in front of the walls so edges sweep laterally across
    the image.  With two depths the nearer wall covers the left half.
    """
    ext = Extrinsics.forward_facing()
    t_mid = 0.5 * duration
    model = AckermannModel(AckermannParams(omega, v, t_mid), ext)
    segs = []
    if len(distances) == 1:
        segs.append(frontal_wall(distances[0], x_range=(-1.6 * distances[0] / 2, 1.6 * distances[0] / 2),
                                 z_range=(-0.5 * distances[0], 0.5 * distances[0])))
    else:
        for k, d in enumerate(distances):
            half = 1.4 * d / 2
            xr = (-half, -0.05 * d) if k == 0 else (0.05 * d, half)
            segs.append(frontal_wall(d, x_range=xr, z_range=(-0.5 * d, 0.5 * d), n_vertical=7, n_horizontal=5))
    scene = SyntheticScene(np.concatenate(segs), points_per_meter)
    b = generate_events(scene, model, suite_camera(), duration, sampling_dt, seed)
    b.meta.update(suite="wall" if len(distances) == 1 else "walls", distances=list(distances), v=v, omega=omega,
                  t_ref=t_mid, seed=seed)
    return b


SUITES = {
    "circle": circle_bundle,
    "str": str_bundle,
    "long": long_bundle,
    "wall": wall_bundle,
    "walls": lambda seed=0, **kw: wall_bundle(seed, distances=(1.5, 3.0), **kw),
}


def make_suite(name: str, seed: int = 0, **kw) -> GroundTruthBundle:
    if name not in SUITES:
        raise DomainError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](seed=seed, **kw)


def standard_suites(seed: int = 0) -> dict[str, GroundTruthBundle]:
    """The ``circle``, ``str`` and ``long`` bundles."""
    return {name: make_suite(name, seed) for name in ("circle", "str", "long")}
