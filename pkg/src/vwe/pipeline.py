"""End-to-end estimation: front-end arcs, spline back-end, depth maps, RPE."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .core import CameraModel, EventArray, PoseSample
from .errors import DomainError, InsufficientDataError
from .field import DensityField, GridSpec, KernelSchedule, VoxelGrid, accumulate_fast
from .objective import (
    MultiVolumeConfig,
    MultiVolumeContrast,
    OmegaObjective,
    SolveNDResult,
    SplineContrast,
    TurnAngleContrast,
    VolumeContrast,
    VolumeWindow,
    solve_1d,
    solve_nd,
)
from .trajectory import (
    Extrinsics,
    PiecewiseAckermannModel,
    PlanarSpline,
    SampledTrajectory,
    SplineModel,
    TrajectoryModel,
    fit_spline,
)

log = logging.getLogger(__name__)


def sensor_grid(camera: CameraModel, nz: int = 32, z_min: float = 0.5, z_max: float = 10.0, scale: float = 1.0):
    """Grid with one lateral cell per ``1/scale`` pixels."""
    return GridSpec(
        max(2, int(round(camera.width * scale))), max(2, int(round(camera.height * scale))), nz, z_min, z_max
    )


# ----------------------------------------------------------------------------
# front-end
# ----------------------------------------------------------------------------


@dataclass
class FrontEndConfig:
    window_span: float = 0.1
    v_config: float = 0.5
    min_events: int = 500
    omega_bracket: tuple[float, float] = (-1.0, 1.0)
    grid: GridSpec | None = None  # None: one lateral cell per pixel
    kernel_voxels: float = 0.5
    truncation_radius: float = 6.0
    n_grid: int = 21
    tol: float = 1e-5
    max_iter: int = 100
    h: float = 1e-4
    samples_per_window: int = 10

    def __post_init__(self):
        if not self.window_span > 0:
            raise DomainError("window_span must be positive")
        if not self.v_config > 0:
            raise DomainError("v_config must be positive")
        lo, hi = self.omega_bracket
        if not lo < hi:
            raise DomainError("omega_bracket must be increasing")

    def grid_for(self, camera: CameraModel) -> GridSpec:
        return self.grid if self.grid is not None else sensor_grid(camera)


@dataclass
class Segment:
    t_start: float
    t_end: float
    omega: float
    value: float
    n_events: int
    evaluations: int = 0
    flagged: bool = False
    boundary_warning: bool = False


@dataclass
class FrontEndResult:
    segments: list[Segment]
    model: PiecewiseAckermannModel
    chained_trajectory: list[PoseSample]
    elapsed: float
    n_events: int

    @property
    def omegas(self) -> np.ndarray:
        return np.array([s.omega for s in self.segments])

    @property
    def throughput(self) -> float:
        """Events processed per second of wall-clock time."""
        return self.n_events / self.elapsed if self.elapsed > 0 else math.inf

    @property
    def realtime_factor(self) -> float:
        """Processing time divided by stream duration (below 1 is faster than real time)."""
        span = self.segments[-1].t_end - self.segments[0].t_start
        return self.elapsed / span if span > 0 else math.inf


def window_boundaries(t0: float, t1: float, span: float) -> np.ndarray:
    n = max(1, int(math.ceil((t1 - t0) / span - 1e-9)))
    return t0 + span * np.arange(n + 1)


def run_frontend(
    events: EventArray,
    camera: CameraModel,
    config: FrontEndConfig | None = None,
    extrinsics: Extrinsics | None = None,
) -> FrontEndResult:
    """Per-window yaw-rate estimates chained into a dead-reckoned path.

    The first window starts from a grid scan over the bracket; later ones
    warm-start from the previous estimate.  Windows with fewer than
    ``min_events`` keep the previous yaw rate and are flagged.
    """
    config = config or FrontEndConfig()
    extrinsics = extrinsics or Extrinsics.forward_facing()
    if len(events) == 0:
        raise InsufficientDataError("empty event stream")
    t_begin = time.perf_counter()
    grid_spec = config.grid_for(camera)
    bearings = camera.unproject(events.pixels)
    bounds = window_boundaries(float(events.t[0]), float(events.t[-1]), config.window_span)
    segments: list[Segment] = []
    prev = None
    for a, b in zip(bounds[:-1], bounds[1:]):
        window = VolumeWindow.from_bounds(events, a, b)
        n = len(window)
        if n < config.min_events:
            omega = 0.0 if prev is None else prev
            log.warning("window [%.3f, %.3f] has %d events; carrying omega=%.4f", a, b, n, omega)
            segments.append(Segment(a, b, omega, math.nan, n, 0, flagged=True))
            prev = omega
            continue
        contrast = VolumeContrast(events, camera, window, grid_spec, None, config.min_events, bearings)
        contrast.kernel = KernelSchedule.for_grid(contrast.grid, config.kernel_voxels, config.truncation_radius)
        objective = OmegaObjective(contrast, config.v_config, extrinsics)
        res = solve_1d(
            objective, config.omega_bracket, init=prev, n_grid=config.n_grid, tol=config.tol,
            max_iter=config.max_iter, h=config.h,
        )
        segments.append(Segment(a, b, res.omega, res.value, n, res.evaluations, boundary_warning=res.boundary_warning))
        log.debug("window [%.3f, %.3f]: omega=%.5f (%d evaluations)", a, b, res.omega, res.evaluations)
        prev = res.omega
    model = PiecewiseAckermannModel(bounds, np.array([s.omega for s in segments]), config.v_config, extrinsics)
    k = max(1, config.samples_per_window)
    times = np.concatenate([np.linspace(a, b, k, endpoint=False) for a, b in zip(bounds[:-1], bounds[1:])] + [bounds[-1:]])
    elapsed = time.perf_counter() - t_begin
    result = FrontEndResult(segments, model, model.sample(times), elapsed, len(events))
    log.info(
        "front-end: %d windows, %d events in %.2f s (%.0f events/s, %.2fx real time)",
        len(segments), len(events), elapsed, result.throughput, result.realtime_factor,
    )
    return result


# ----------------------------------------------------------------------------
# back-end
# ----------------------------------------------------------------------------


@dataclass
class SplineConfig:
    degree: int = 3
    ctrl_per_second: float = 2.0
    n_ctrl: int | None = None
    fit_rate: float = 50.0  # pose samples per second fed to the fit
    grid: GridSpec | None = None
    kernel_voxels: float = 0.5
    truncation_radius: float = 6.0
    min_events: int = 500
    h: float = 1e-4
    max_iter: int = 50
    rel_tol: float = 1e-6
    max_step: float = 0.05  # radians for "turns", metres for "points"
    threads: int = 1
    coordinates: str = "turns"  # "turns" (fixed leg lengths) or "points"
    hold_length: bool = True  # "points" only: keep the initial path length

    def __post_init__(self):
        if self.coordinates not in ("turns", "points"):
            raise DomainError(f"unknown back-end coordinates {self.coordinates!r}")

    def control_count(self, duration: float) -> int:
        if self.n_ctrl is not None:
            return int(self.n_ctrl)
        return max(self.degree + 1, int(round(duration * self.ctrl_per_second)) + self.degree - 1)


@dataclass
class BackEndResult:
    spline: PlanarSpline
    initial: PlanarSpline
    solve: SolveNDResult
    model: SplineModel
    elapsed: float


def gauge_mask(n_points: int, pinned: int = 2) -> np.ndarray:
    """Free-coordinate mask over stacked ``(x, y)`` control points.

    The first point fixes the origin and the second fixes the heading;
    everything after is free.
    """
    free = np.ones(2 * n_points, dtype=bool)
    free[: 2 * pinned] = False
    return free


def length_projector(spline: PlanarSpline):
    """Return a map that rescales control points about the first one.

    The result keeps the arc length of ``spline``.  Scaling about the first
    point leaves the origin and the initial heading direction untouched.
    """
    target = spline.arc_length()
    if not target > 0:
        raise DomainError("initial spline has zero length")

    def project(theta):
        cp = np.asarray(theta, dtype=float).reshape(-1, 2)
        length = spline.with_control_points(cp).arc_length()
        if not length > 0:
            return np.asarray(theta, dtype=float)
        origin = cp[0]
        return (origin + (cp - origin) * (target / length)).reshape(-1)

    return project


def resample(samples: list[PoseSample], rate: float) -> list[PoseSample]:
    traj = SampledTrajectory.from_samples(samples)
    a, b = traj.domain
    n = max(2, int(math.ceil((b - a) * rate)) + 1)
    return traj.sample(np.linspace(a, b, n))


def run_backend(
    events: EventArray,
    camera: CameraModel,
    initial: FrontEndResult | list[PoseSample],
    spline_config: SplineConfig | None = None,
    mv_config: MultiVolumeConfig | None = None,
    extrinsics: Extrinsics | None = None,
    callback=None,
) -> BackEndResult:
    """Fit a spline to the initial path and maximize the summed volume contrast."""
    sc = spline_config or SplineConfig()
    mv_config = mv_config or MultiVolumeConfig()
    extrinsics = extrinsics or Extrinsics.forward_facing()
    t_begin = time.perf_counter()
    samples = initial.chained_trajectory if isinstance(initial, FrontEndResult) else list(initial)
    samples = resample(samples, sc.fit_rate)
    duration = samples[-1].t - samples[0].t
    spline0 = fit_spline(samples, sc.degree, sc.control_count(duration), pin_heading=True)
    base = SplineModel(spline0, extrinsics)
    grid_spec = sc.grid if sc.grid is not None else sensor_grid(camera)
    kernel = None
    contrast = MultiVolumeContrast(
        events, camera, mv_config, grid_spec, kernel, sc.min_events, t_span=base.domain, threads=sc.threads
    )
    for v in contrast.volumes:
        v.kernel = KernelSchedule.for_grid(v.grid, sc.kernel_voxels, sc.truncation_radius)
    if sc.coordinates == "turns":
        objective = TurnAngleContrast(contrast, base)
        theta0 = objective.angles(spline0.control_points)
        free = np.ones(theta0.size, dtype=bool)
        free[0] = False
        project = None
    else:
        objective = SplineContrast(contrast, base)
        theta0 = spline0.control_points.reshape(-1).copy()
        free = gauge_mask(spline0.n + 1)
        project = length_projector(spline0) if sc.hold_length else None
    report = None if callback is None else (lambda it, th, f: callback(it, objective.model(th), f))
    res = solve_nd(
        objective, theta0, gradient=lambda th: objective.gradient(th, sc.h, free), free=free, h=sc.h,
        max_iter=sc.max_iter, rel_tol=sc.rel_tol, max_step=sc.max_step, callback=report, project=project,
    )
    res.evaluations = contrast.evaluations
    refined = spline0.with_control_points(objective.control_points(res.theta))
    elapsed = time.perf_counter() - t_begin
    log.info(
        "back-end: %d volumes, %d control points, objective %.6g -> %.6g in %d iterations (%.1f s)",
        len(contrast.volumes), spline0.n + 1, res.initial_value, res.value, res.iterations, elapsed,
    )
    return BackEndResult(refined, spline0, res, SplineModel(refined, extrinsics), elapsed)


def align_first_pose(samples: list[PoseSample], truth: TrajectoryModel) -> list[PoseSample]:
    """Rigidly move ``samples`` so the first one coincides with ``truth`` at that time."""
    first = samples[0]
    g = truth.vehicle_pose(first.t) @ first.pose.inverse()
    return [PoseSample(s.t, g @ s.pose) for s in samples]


def position_rmse(model: TrajectoryModel, truth: TrajectoryModel, times) -> float:
    """RMS planar distance between two vehicle paths, over the shared part of ``times``."""
    times = np.asarray(times, dtype=float)
    lo = max(model.domain[0], truth.domain[0])
    hi = min(model.domain[1], truth.domain[1])
    times = times[(times >= lo) & (times <= hi)]
    if times.size == 0:
        raise InsufficientDataError("no common time range")
    pa = model.vehicle_arrays(times)[1][:, :2]
    pb = truth.vehicle_arrays(times)[1][:, :2]
    return float(np.sqrt(np.mean(np.sum((pa - pb) ** 2, axis=1))))


# ----------------------------------------------------------------------------
# depth maps
# ----------------------------------------------------------------------------


@dataclass
class DepthMap:
    """Per-cell depth in the reference view; NaN marks cells without a peak."""

    t_ref: float
    depth: np.ndarray
    confidence: np.ndarray
    grid: VoxelGrid
    threshold: float

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def __len__(self) -> int:
        return int(self.valid.sum())

    def points(self) -> np.ndarray:
        """Valid cells as 3D points in the reference camera frame."""
        n, m = np.nonzero(self.valid)
        z = self.depth[n, m]
        return np.column_stack([self.grid.xs[m] * z, self.grid.ys[n] * z, z])

    def pixels(self) -> np.ndarray:
        n, m = np.nonzero(self.valid)
        return np.column_stack([self.grid.us[m], self.grid.vs[n]])


def depth_from_field(field_: DensityField, k: float = 3.0, t_ref: float | None = None) -> DepthMap:
    values = field_.values
    if values.size == 0:
        raise DomainError("empty density field")
    threshold = float(values.mean() + k * values.std())
    arg = np.argmax(values, axis=0)
    peak = np.take_along_axis(values, arg[None], axis=0)[0]
    keep = peak > threshold
    depth = np.where(keep, field_.grid.depths[arg], np.nan)
    conf = np.where(keep, peak, 0.0)
    return DepthMap(field_.grid.t_ref if t_ref is None else t_ref, depth, conf, field_.grid, threshold)


def extract_depth_map(
    events: EventArray,
    camera: CameraModel,
    model: TrajectoryModel,
    t_ref: float,
    grid_spec: GridSpec | None = None,
    kernel: KernelSchedule | None = None,
    span: float = 0.4,
    k: float = 3.0,
) -> DepthMap:
    """Column-wise density maxima over depth, kept above ``mean + k * std``."""
    grid_spec = grid_spec or sensor_grid(camera)
    window = events.window(t_ref - 0.5 * span, t_ref + 0.5 * span)
    if len(window) == 0:
        raise InsufficientDataError("no events around the reference time")
    grid = grid_spec.build(camera, t_ref, model.camera_pose(t_ref))
    kernel = kernel or KernelSchedule.for_grid(grid)
    return depth_from_field(accumulate_fast(window, model, camera, grid, kernel), k, t_ref)


# ----------------------------------------------------------------------------
# relative pose error
# ----------------------------------------------------------------------------


@dataclass
class RPEMetrics:
    rmse_rot_degps: float
    median_rot_degps: float
    rmse_trans_degps: float
    median_trans_degps: float
    n_pairs: int
    n_trans_pairs: int
    interval: float

    def as_dict(self) -> dict:
        return {
            "rmse_rot_degps": self.rmse_rot_degps,
            "median_rot_degps": self.median_rot_degps,
            "rmse_trans_degps": self.rmse_trans_degps,
            "median_trans_degps": self.median_trans_degps,
        }


def _angle_between(a, b) -> np.ndarray:
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    return np.arctan2(cross, np.sum(a * b, axis=1))


def rpe_errors(estimate, truth, interval: float, min_translation: float = 1e-3):
    """Per-pair rotation and translation-direction errors in deg/s.

    Pairs start at the estimate's sample times that leave room for a full
    interval inside the common time range; both trajectories are
    interpolated at ``t`` and ``t + interval``.
    """
    if not interval > 0:
        raise DomainError("interval must be positive")
    est = SampledTrajectory.from_samples(estimate)
    ref = SampledTrajectory.from_samples(truth)
    lo = max(est.domain[0], ref.domain[0])
    hi = min(est.domain[1], ref.domain[1])
    t0 = np.array([s.t for s in estimate])
    eps = 1e-9 * max(1.0, abs(hi))
    t0 = t0[(t0 >= lo - eps) & (t0 + interval <= hi + eps)]
    if t0.size == 0:
        raise InsufficientDataError("trajectories do not overlap by one interval")
    t1 = np.minimum(t0 + interval, hi)
    t0 = np.maximum(t0, lo)

    def relative(traj):
        ra, pa = traj.vehicle_arrays(t0)
        rb, pb = traj.vehicle_arrays(t1)
        rel_r = np.einsum("nji,njk->nik", ra, rb)
        rel_t = np.einsum("nji,nj->ni", ra, pb - pa)
        return rel_r, rel_t

    re, te = relative(est)
    rt, tt = relative(ref)
    delta = np.einsum("nji,njk->nik", rt, re)
    rot = np.degrees(Rotation.from_matrix(delta).magnitude()) / interval
    moving = np.linalg.norm(tt, axis=1) >= min_translation
    trans = np.degrees(_angle_between(te[moving], tt[moving])) / interval
    return rot, trans


def evaluate_rpe(estimate, truth, interval: float = 1.0, min_translation: float = 1e-3) -> RPEMetrics:
    rot, trans = rpe_errors(estimate, truth, interval, min_translation)

    def rmse(x):
        return float(np.sqrt(np.mean(x**2))) if x.size else math.nan

    def median(x):
        return float(np.median(x)) if x.size else math.nan

    return RPEMetrics(rmse(rot), median(rot), rmse(trans), median(trans), rot.size, trans.size, interval)
