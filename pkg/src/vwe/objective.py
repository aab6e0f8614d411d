"""Contrast objectives over ray-density fields and gradient-ascent solvers."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import CameraModel, EventArray
from .errors import DomainError, InsufficientDataError, NumericalError
from .field import (
    DensityField,
    GridSpec,
    KernelSchedule,
    accumulate_fast_rays,
    event_bearings,
    warp_rays,
)
from .trajectory import AckermannModel, SplineModel, TrajectoryModel

log = logging.getLogger(__name__)


def variance(field_: DensityField | np.ndarray) -> float:
    """Population variance over all voxels."""
    values = field_.values if isinstance(field_, DensityField) else np.asarray(field_)
    if values.size == 0:
        raise DomainError("variance of an empty field")
    return float(np.var(values))


# ----------------------------------------------------------------------------
# windows
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class VolumeWindow:
    """Events with ``t_lo <= t <= t_hi`` feed one volume centred on ``t_r``."""

    t_r: float
    half_span: float
    event_range: tuple[int, int]
    bounds: tuple[float, float] | None = None  # exact ends when built from boundaries

    @classmethod
    def from_stream(cls, events: EventArray, t_r: float, span: float) -> "VolumeWindow":
        half = 0.5 * span
        return cls(t_r, half, events.index_range(t_r - half, t_r + half))

    @classmethod
    def from_bounds(cls, events: EventArray, t0: float, t1: float) -> "VolumeWindow":
        """Window over ``[t0, t1]`` that keeps events sitting exactly on either end."""
        return cls(0.5 * (t0 + t1), 0.5 * (t1 - t0), events.index_range(t0, t1), (t0, t1))

    @property
    def t_lo(self) -> float:
        return self.t_r - self.half_span if self.bounds is None else self.bounds[0]

    @property
    def t_hi(self) -> float:
        return self.t_r + self.half_span if self.bounds is None else self.bounds[1]

    def verify(self, events: EventArray) -> None:
        if tuple(self.event_range) != events.index_range(self.t_lo, self.t_hi):
            raise DomainError("event range inconsistent with window timestamps")

    def __len__(self) -> int:
        return self.event_range[1] - self.event_range[0]

    def contains(self, t: float) -> bool:
        return self.t_lo <= t <= self.t_hi


@dataclass(frozen=True)
class MultiVolumeConfig:
    """Reference times ``t_0 + tau2/2 + i*tau1`` for ``i < M``.

    ``M=None`` fits as many volumes as the stream allows.
    """

    tau1: float = 0.2
    tau2: float = 0.4
    M: int | None = None

    def __post_init__(self):
        if not self.tau1 > 0 or not self.tau2 > 0:
            raise DomainError("tau1 and tau2 must be positive")
        if self.M is not None and self.M < 1:
            raise DomainError("M must be at least 1")

    def reference_times(self, t_start: float, t_end: float) -> np.ndarray:
        first = t_start + 0.5 * self.tau2
        avail = int(math.floor((t_end - t_start - self.tau2) / self.tau1 + 1e-9)) + 1
        m = avail if self.M is None else self.M
        if m < 1:
            raise InsufficientDataError("stream shorter than one volume window")
        return first + self.tau1 * np.arange(m)

    def windows(self, events: EventArray, t_start=None, t_end=None) -> list[VolumeWindow]:
        t_start = events.t[0] if t_start is None else t_start
        t_end = events.t[-1] if t_end is None else t_end
        return [VolumeWindow.from_stream(events, float(t), self.tau2) for t in self.reference_times(t_start, t_end)]


@dataclass
class ObjectiveReport:
    value: float
    per_volume: list[float]
    gradient: np.ndarray | None = None
    evaluations: int = 1
    skipped: list[int] = field(default_factory=list)


# ----------------------------------------------------------------------------
# single volume
# ----------------------------------------------------------------------------


class VolumeContrast:
    """Variance of one density field as a function of the trajectory model.

    Bearings and the event slice are computed once; each call warps the rays
    with the given model and splats them.
    """

    def __init__(
        self,
        events: EventArray,
        camera: CameraModel,
        window: VolumeWindow,
        grid_spec: GridSpec,
        kernel: KernelSchedule | None = None,
        min_events: int = 500,
        bearings: np.ndarray | None = None,
    ):
        i0, i1 = window.event_range
        if i1 - i0 < max(1, min_events):
            raise InsufficientDataError(f"window at t={window.t_r:.3f}s has {i1 - i0} events (< {min_events})")
        self.window = window
        self.times = np.array(events.t[i0:i1])
        self.bearings = event_bearings(events[i0:i1], camera) if bearings is None else bearings[i0:i1]
        self.grid = grid_spec.build(camera, window.t_r)
        self.kernel = kernel or KernelSchedule.for_grid(self.grid)
        self.evaluations = 0

    def __len__(self) -> int:
        return self.times.size

    def field(self, model: TrajectoryModel) -> DensityField:
        o, d = warp_rays(model, self.window.t_r, self.times, self.bearings)
        return DensityField(self.grid, accumulate_fast_rays(o, d, self.grid, self.kernel))

    def __call__(self, model: TrajectoryModel) -> float:
        self.evaluations += 1
        value = variance(self.field(model))
        if not math.isfinite(value):
            raise NumericalError(f"non-finite objective at t_r={self.window.t_r}")
        return value


def single_volume_objective(
    events: EventArray,
    model: TrajectoryModel,
    camera: CameraModel,
    window: VolumeWindow,
    grid_spec: GridSpec,
    kernel: KernelSchedule | None = None,
    min_events: int = 500,
) -> ObjectiveReport:
    vc = VolumeContrast(events, camera, window, grid_spec, kernel, min_events)
    value = vc(model)
    return ObjectiveReport(value, [value], evaluations=vc.evaluations)


class OmegaObjective:
    """Single-volume contrast as a function of the yaw rate of an arc model."""

    def __init__(self, contrast: VolumeContrast, v: float, extrinsics):
        self.contrast = contrast
        self.v = v
        self.extrinsics = extrinsics

    def model(self, omega: float) -> AckermannModel:
        from .trajectory import AckermannParams

        return AckermannModel(AckermannParams(float(omega), self.v, self.contrast.window.t_r), self.extrinsics)

    def __call__(self, omega: float) -> float:
        return self.contrast(self.model(omega))


# ----------------------------------------------------------------------------
# multiple volumes
# ----------------------------------------------------------------------------


class MultiVolumeContrast:
    """Sum of per-volume variances over overlapping windows.

    Per-volume values are cached against the last evaluated parameters so a
    finite-difference probe only re-splats the volumes whose window overlaps
    the support of the perturbed control point.  Cached and recomputed values
    are bit-identical because basis functions vanish exactly outside their
    support.
    """

    def __init__(
        self,
        events: EventArray,
        camera: CameraModel,
        config: MultiVolumeConfig,
        grid_spec: GridSpec,
        kernel: KernelSchedule | None = None,
        min_events: int = 500,
        t_span: tuple[float, float] | None = None,
        threads: int = 1,
    ):
        bearings = event_bearings(events, camera)
        t0, t1 = t_span if t_span is not None else (events.t[0], events.t[-1])
        self.volumes: list[VolumeContrast] = []
        self.skipped: list[int] = []
        for i, w in enumerate(config.windows(events, t0, t1)):
            try:
                self.volumes.append(VolumeContrast(events, camera, w, grid_spec, kernel, min_events, bearings))
            except InsufficientDataError as exc:
                log.warning("skipping volume %d: %s", i, exc)
                self.skipped.append(i)
        if not self.volumes:
            raise InsufficientDataError("every volume window has too few events")
        self.threads = max(1, int(threads))
        self.evaluations = 0

    @property
    def reference_times(self) -> np.ndarray:
        return np.array([v.window.t_r for v in self.volumes])

    def per_volume(self, model: TrajectoryModel, which: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.volumes)) if which is None else which
        self.evaluations += 1
        if self.threads > 1 and len(idx) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                vals = list(pool.map(lambda i: self.volumes[i](model), idx))
        else:
            vals = [self.volumes[i](model) for i in idx]
        return np.array(vals)

    def __call__(self, model: TrajectoryModel) -> float:
        return float(np.sum(self.per_volume(model)))

    def affected(self, t_lo: float, t_hi: float) -> list[int]:
        """Volumes whose time window intersects ``[t_lo, t_hi]``."""
        return [
            i
            for i, v in enumerate(self.volumes)
            if v.window.t_lo <= t_hi and v.window.t_hi >= t_lo
        ]


def multi_volume_objective(
    events: EventArray,
    model: TrajectoryModel,
    camera: CameraModel,
    config: MultiVolumeConfig,
    grid_spec: GridSpec,
    kernel: KernelSchedule | None = None,
    min_events: int = 500,
) -> ObjectiveReport:
    mv = MultiVolumeContrast(events, camera, config, grid_spec, kernel, min_events)
    per = mv.per_volume(model)
    return ObjectiveReport(float(per.sum()), per.tolist(), evaluations=len(mv.volumes), skipped=mv.skipped)


class SplineContrast:
    """Multi-volume contrast as a function of stacked spline control points."""

    def __init__(self, contrast: MultiVolumeContrast, base: SplineModel):
        self.contrast = contrast
        self.base = base
        self.n_ctrl = base.spline.n + 1
        self._theta: np.ndarray | None = None
        self._per: np.ndarray | None = None
        self._affected = self._affected_volumes()

    def _affected_volumes(self) -> list[list[int]]:
        """Volume indices each coordinate can change."""
        out = []
        for j in range(self.n_ctrl):
            idx = self.contrast.affected(*self.base.spline.support(j))
            out += [idx, idx]
        return out

    def control_points(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float).reshape(-1, 2)

    def model(self, theta) -> SplineModel:
        return self.base.with_control_points(self.control_points(theta))

    def per_volume(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        per = self.contrast.per_volume(self.model(theta))
        self._theta, self._per = theta.copy(), per
        return per

    def __call__(self, theta) -> float:
        return float(np.sum(self.per_volume(theta)))

    def gradient(self, theta, h: float = 1e-4, free=None) -> np.ndarray:
        """Central differences, re-splatting only volumes a coordinate can reach."""
        theta = np.asarray(theta, dtype=float)
        if self._theta is None or not np.array_equal(self._theta, theta):
            self.per_volume(theta)
        base = self._per
        g = np.zeros_like(theta)
        coords = range(theta.size) if free is None else np.flatnonzero(free)
        for j in coords:
            idx = self._affected[j]
            if not idx:
                continue
            vals = []
            for sign in (1.0, -1.0):
                th = theta.copy()
                th[j] += sign * h
                per = base.copy()
                per[idx] = self.contrast.per_volume(self.model(th), idx)
                vals.append(float(np.sum(per)))
            if not all(map(math.isfinite, vals)):
                raise NumericalError(f"non-finite objective while differentiating coordinate {j}")
            g[j] = (vals[0] - vals[1]) / (2.0 * h)
        return g


class TurnAngleContrast(SplineContrast):
    """Multi-volume contrast over the turn angles of the control polygon.

    The polygon keeps the first point and every leg length of ``base``;
    coordinate 0 is the heading of the first leg and coordinate ``j > 0`` the
    heading change between legs ``j - 1`` and ``j``.  Changing coordinate
    ``j`` rotates the rest of the polygon rigidly about point ``j``, so only
    the volumes overlapping spans that mix moved and fixed points change.
    """

    def __init__(self, contrast: MultiVolumeContrast, base: SplineModel):
        cp = base.spline.control_points
        legs = np.diff(cp, axis=0)
        self.origin = cp[0].copy()
        self.lengths = np.linalg.norm(legs, axis=1)
        if np.any(self.lengths == 0):
            raise DomainError("control polygon has a zero-length leg")
        super().__init__(contrast, base)

    def _affected_volumes(self) -> list[list[int]]:
        u, p = self.base.spline.knots, self.base.spline.degree
        return [self.contrast.affected(u[j + 1], u[j + p + 1]) for j in range(self.n_ctrl - 1)]

    def angles(self, control_points) -> np.ndarray:
        """Turn-angle coordinates of a polygon with the same leg count."""
        legs = np.diff(np.asarray(control_points, dtype=float), axis=0)
        heading = np.unwrap(np.arctan2(legs[:, 1], legs[:, 0]))
        return np.concatenate([heading[:1], np.diff(heading)])

    def control_points(self, theta) -> np.ndarray:
        heading = np.cumsum(np.asarray(theta, dtype=float))
        legs = self.lengths[:, None] * np.column_stack([np.cos(heading), np.sin(heading)])
        return np.vstack([self.origin, self.origin + np.cumsum(legs, axis=0)])


# ----------------------------------------------------------------------------
# derivatives and solvers
# ----------------------------------------------------------------------------


def gradient_fd(objective: Callable[[np.ndarray], float], theta, h) -> np.ndarray:
    """Central finite-difference gradient; ``h`` is a scalar or per-coordinate step."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    steps = np.broadcast_to(np.asarray(h, dtype=float), theta.shape)
    g = np.empty_like(theta)
    for j in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += steps[j]
        tm[j] -= steps[j]
        fp, fm = objective(tp), objective(tm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite objective at coordinate {j}")
        g[j] = (fp - fm) / (2.0 * steps[j])
    return g


@dataclass
class Solve1DResult:
    omega: float
    value: float
    evaluations: int
    iterations: int
    boundary_warning: bool = False
    scan: np.ndarray | None = None


def grid_scan(objective: Callable[[float], float], bracket, n: int = 21):
    """Evaluate on an even grid; ties resolve towards the smaller ``|omega|``."""
    lo, hi = map(float, bracket)
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise DomainError(f"invalid bracket {bracket}")
    xs = np.linspace(lo, hi, n)
    vals = np.array([objective(x) for x in xs])
    if not np.all(np.isfinite(vals)):
        raise NumericalError("non-finite objective on the scan grid")
    best = vals.max()
    ties = np.flatnonzero(vals == best)
    i = int(ties[np.argmin(np.abs(xs[ties]))])
    return i, xs, vals


def solve_1d(
    objective: Callable[[float], float],
    bracket=(-1.0, 1.0),
    init: float | None = None,
    n_grid: int = 21,
    tol: float = 1e-5,
    max_iter: int = 100,
    h: float = 1e-4,
    max_step: float | None = None,
) -> Solve1DResult:
    """Maximize a scalar function of one parameter.

    Without ``init`` a coarse grid scan over ``bracket`` picks the start;
    a maximum on the scan boundary sets ``boundary_warning``.  Gradient
    ascent then uses central-difference slopes, Barzilai-Borwein step
    lengths and step halving until an accepted move is below ``tol``.
    """
    lo, hi = map(float, bracket)
    evals = 0
    scan = None
    warn = False

    def f(x):
        nonlocal evals
        evals += 1
        v = objective(x)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite objective at {x}")
        return v

    if init is None:
        i, xs, vals = grid_scan(f, (lo, hi), n_grid)
        x, fx = float(xs[i]), float(vals[i])
        warn = i in (0, n_grid - 1)
        scan = np.column_stack([xs, vals])
        if warn:
            log.warning("objective maximum on the scan boundary (omega=%.4f)", x)
        cell = (hi - lo) / (n_grid - 1)
    else:
        x = float(init)
        fx = f(x)
        cell = (hi - lo) / (n_grid - 1)
    max_step = cell if max_step is None else max_step

    alpha = None
    prev_x = prev_g = None
    it = 0
    for it in range(1, max_iter + 1):
        g = (f(x + h) - f(x - h)) / (2.0 * h)
        if g == 0.0:
            break
        if prev_g is not None and (g - prev_g) * (x - prev_x) < 0:
            alpha = abs((x - prev_x) / (g - prev_g))
        elif alpha is None:
            alpha = 0.25 * max_step / abs(g)
        step = float(np.clip(alpha * g, -max_step, max_step))
        accepted = False
        for _ in range(40):
            xn = x + step
            fn = f(xn)
            if fn > fx:
                accepted = True
                break
            step *= 0.5
            if abs(step) < 0.1 * tol:
                break
        if not accepted:
            break
        prev_x, prev_g = x, g
        x, fx = xn, fn
        if abs(step) < tol:
            break
    return Solve1DResult(x, fx, evals, it, warn, scan)


@dataclass
class SolveNDResult:
    theta: np.ndarray
    value: float
    initial_value: float
    iterations: int
    evaluations: int
    converged: bool
    warning: str | None = None
    history: list[float] = field(default_factory=list)


def solve_nd(
    objective: Callable[[np.ndarray], float],
    theta0,
    gradient: Callable[[np.ndarray], np.ndarray] | None = None,
    free=None,
    h: float = 1e-4,
    max_iter: int = 50,
    rel_tol: float = 1e-6,
    max_step: float = 0.02,
    callback=None,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
) -> SolveNDResult:
    """Gradient ascent with Barzilai-Borwein steps and backtracking.

    ``free`` masks the coordinates allowed to move (gauge-fixed ones stay
    exactly at their initial values).  Stops when the relative gain of an
    accepted step drops below ``rel_tol`` or after ``max_iter`` iterations.
    ``max_step`` caps the largest coordinate change per iteration.
    ``project`` maps every trial point back onto a constraint set before it
    is evaluated.
    """
    theta = np.array(theta0, dtype=float, copy=True)
    free = np.ones(theta.size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    evals = 0

    def f(th):
        nonlocal evals
        evals += 1
        v = objective(th)
        if not math.isfinite(v):
            raise NumericalError("non-finite objective")
        return v

    if gradient is None:
        def gradient(th):
            nonlocal evals
            evals += 2 * int(free.sum())
            g = np.zeros_like(th)
            idx = np.flatnonzero(free)
            sub = gradient_fd(lambda s: objective(_embed(th, idx, s)), th[idx], h)
            g[idx] = sub
            return g

    fx = f(theta)
    f0 = fx
    history = [fx]
    alpha = None
    prev_theta = prev_g = None
    converged = False
    warning = None
    it = 0
    for it in range(1, max_iter + 1):
        g = np.where(free, gradient(theta), 0.0)
        gmax = np.abs(g).max()
        if gmax == 0.0:
            converged = True
            break
        if prev_g is not None:
            s, y = theta - prev_theta, g - prev_g
            sy = float(s @ y)
            if sy < 0:
                alpha = float(s @ s) / -sy
        if alpha is None:
            alpha = 0.25 * max_step / gmax
        step = alpha * g
        big = np.abs(step).max()
        if big > max_step:
            step *= max_step / big
        accepted = False
        for _ in range(30):
            trial = theta + step
            if project is not None:
                trial = project(trial)
            ft = f(trial)
            if ft > fx:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            warning = "backtracking exhausted"
            log.warning("solve_nd: %s at iteration %d", warning, it)
            break
        gain = (ft - fx) / max(abs(fx), 1e-300)
        prev_theta, prev_g = theta, g
        theta, fx = trial, ft
        history.append(fx)
        if callback is not None:
            callback(it, theta, fx)
        if gain < rel_tol:
            converged = True
            break
    return SolveNDResult(theta, fx, f0, it, evals, converged, warning, history)


def _embed(theta, idx, sub):
    out = theta.copy()
    out[idx] = sub
    return out
