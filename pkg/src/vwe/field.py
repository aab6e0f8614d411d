"""Volumetric ray-density fields built from warped event rays.

Every event becomes a ray in the reference camera frame whose pose follows
the continuous trajectory at the event timestamp.  The field value at a
voxel center is the sum over rays of a Gaussian in the point-to-line
distance, with a width that grows linearly with depth.

Values are stored as ``(nz, ny, nx)`` arrays, i.e. one contiguous slice per
depth plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .core import BearingRay, CameraModel, Event, EventArray, RigidTransform
from .errors import DomainError
from .trajectory import TrajectoryModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    """Resolution and depth range of a projective voxel grid."""

    nx: int = 64
    ny: int = 48
    nz: int = 32
    z_min: float = 0.5
    z_max: float = 10.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise DomainError("grid resolution must be positive")
        if not (0 < self.z_min < self.z_max) and not (self.nz == 1 and 0 < self.z_min):
            raise DomainError("need 0 < z_min < z_max")

    def build(self, camera: CameraModel, t_ref: float = 0.0, ref_pose: RigidTransform | None = None) -> "VoxelGrid":
        return VoxelGrid(camera, self, t_ref, ref_pose or RigidTransform())


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Projective sampling volume in front of a reference view.

    Lateral cells tile the image rectangle; their centers are back-projected
    through the (undistorted) pinhole to every depth plane.  Depth planes are
    uniform in inverse depth.  ``ref_pose`` (camera-to-world at ``t_ref``) is
    only used to export world coordinates; accumulation works in the
    reference camera frame.
    """

    camera: CameraModel
    spec: GridSpec = field(default_factory=GridSpec)
    t_ref: float = 0.0
    ref_pose: RigidTransform = field(default_factory=RigidTransform)
    depths: np.ndarray = field(init=False, repr=False)
    xs: np.ndarray = field(init=False, repr=False)
    ys: np.ndarray = field(init=False, repr=False)
    us: np.ndarray = field(init=False, repr=False)
    vs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s, cam = self.spec, self.camera
        if s.nz == 1:
            depths = np.array([s.z_min])
        else:
            depths = 1.0 / np.linspace(1.0 / s.z_min, 1.0 / s.z_max, s.nz)
        u = (np.arange(s.nx) + 0.5) * cam.width / s.nx - 0.5
        v = (np.arange(s.ny) + 0.5) * cam.height / s.ny - 0.5
        named = (("depths", depths), ("xs", (u - cam.cx) / cam.fx), ("ys", (v - cam.cy) / cam.fy), ("us", u), ("vs", v))
        for name, arr in named:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.spec.nz, self.spec.ny, self.spec.nx)

    @property
    def n_voxels(self) -> int:
        return self.spec.nx * self.spec.ny * self.spec.nz

    def centers(self) -> np.ndarray:
        """Voxel centers in the reference camera frame, shape ``(nz, ny, nx, 3)``."""
        z = self.depths[:, None, None]
        x = self.xs[None, None, :] * z
        y = self.ys[None, :, None] * z
        shape = self.shape
        return np.stack(np.broadcast_arrays(x, y, z), axis=-1).reshape(shape + (3,))

    def lateral_pitch(self, depth) -> np.ndarray:
        """Voxel width (meters) along x at the given depth."""
        return np.asarray(depth) * self.camera.width / (self.spec.nx * self.camera.fx)

    def inverse_depth_step(self) -> float:
        if self.spec.nz == 1:
            return 0.0
        return (1.0 / self.spec.z_min - 1.0 / self.spec.z_max) / (self.spec.nz - 1)

    def plane_spacing(self, depth: float) -> float:
        """Distance between neighbouring planes around ``depth``."""
        return float(depth * depth * self.inverse_depth_step())


@dataclass(frozen=True)
class KernelSchedule:
    """Depth-dependent Gaussian width ``sigma(z) = sigma0 * z / lambda0``."""

    sigma0: float
    lambda0: float
    truncation_radius: float = 6.0

    def __post_init__(self):
        if not self.sigma0 > 0 or not self.lambda0 > 0:
            raise DomainError("sigma0 and lambda0 must be positive")
        if not self.truncation_radius > 0:
            raise DomainError("truncation radius must be positive")

    @classmethod
    def for_grid(cls, grid: VoxelGrid, voxels: float = 0.5, truncation_radius: float = 6.0) -> "KernelSchedule":
        """Width equal to ``voxels`` lateral voxel pitches at every depth."""
        z0 = grid.spec.z_min
        return cls(float(voxels * grid.lateral_pitch(z0)), z0, truncation_radius)

    def sigma(self, depth) -> np.ndarray:
        return self.sigma0 * np.asarray(depth, dtype=float) / self.lambda0


@dataclass(frozen=True, eq=False)
class DensityField:
    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise DomainError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    def variance(self) -> float:
        from .objective import variance

        return variance(self)


# ----------------------------------------------------------------------------
# ray warping
# ----------------------------------------------------------------------------


def event_bearings(events: EventArray, camera: CameraModel) -> np.ndarray:
    return camera.unproject(events.pixels)


def warp_rays(model: TrajectoryModel, t_r: float, times, bearings):
    """Ray origins and unit directions in the reference camera frame at ``t_r``."""
    r, t = model.relative_camera_arrays(t_r, times)
    d = np.einsum("kij,kj->ki", r, bearings)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return t, d


def warp_event_to_ray(e: Event, model: TrajectoryModel, camera: CameraModel, t_r: float) -> BearingRay:
    f = camera.unproject([e.x, e.y])
    o, d = warp_rays(model, t_r, [e.t], f[None, :])
    return BearingRay(o[0], d[0], e.t)


def object_space_distance(ray: BearingRay, v) -> float:
    """Perpendicular distance from ``v`` to the infinite line of ``ray``."""
    return float(object_space_distances(ray.origin[None], ray.direction[None], np.asarray(v, float)[None])[0])


def object_space_distances(origins, directions, points) -> np.ndarray:
    """Row-wise point-to-line distances (all arguments broadcast over rows)."""
    d = np.asarray(directions, dtype=float)
    w = np.asarray(points, dtype=float) - np.asarray(origins, dtype=float)
    dd = np.sum(d * d, axis=-1, keepdims=True)
    perp = w - d * (np.sum(w * d, axis=-1, keepdims=True) / dd)
    return np.linalg.norm(perp, axis=-1)


def householder_distance(r_rk, t_rk, f_k, v) -> float:
    """Point-to-ray distance written in the event camera frame.

    ``v`` is moved into the camera frame at the event time and projected
    onto the plane normal to the bearing ``f_k``.
    """
    f = np.asarray(f_k, dtype=float)
    proj = np.eye(3) - np.outer(f, f) / (f @ f)
    return float(np.linalg.norm(proj @ (np.asarray(r_rk).T @ (np.asarray(v) - np.asarray(t_rk)))))


# ----------------------------------------------------------------------------
# accumulation
# ----------------------------------------------------------------------------


def _rays(events, model, camera, grid, bearings):
    if bearings is None:
        bearings = event_bearings(events, camera)
    return warp_rays(model, grid.t_ref, events.t, bearings)


def accumulate_naive_rays(origins, directions, grid: VoxelGrid, kernel: KernelSchedule, chunk: int = 32) -> np.ndarray:
    """Untruncated sum over every (ray, voxel) pair; O(N * V) reference path."""
    centers = grid.centers().reshape(-1, 3)
    inv2s2 = 1.0 / (2.0 * kernel.sigma(grid.depths) ** 2)
    inv2s2 = np.broadcast_to(inv2s2[:, None, None], grid.shape).reshape(-1)
    out = np.zeros(centers.shape[0])
    for k0 in range(0, origins.shape[0], chunk):
        o = origins[k0 : k0 + chunk, None, :]
        d = directions[k0 : k0 + chunk, None, :]
        w = centers[None, :, :] - o
        perp = w - d * np.sum(w * d, axis=-1, keepdims=True)
        e2 = np.sum(perp * perp, axis=-1)
        out += np.exp(-e2 * inv2s2[None, :]).sum(axis=0)
    return out.reshape(grid.shape)


def accumulate_fast_rays(origins, directions, grid: VoxelGrid, kernel: KernelSchedule) -> np.ndarray:
    """Plane-sweep splat: per ray and depth plane, visit only the lateral
    window within ``truncation_radius`` kernel widths of the intersection."""
    values, skipped = _kernels.splat(
        origins, directions, grid.depths, grid.xs, grid.ys, kernel.sigma(grid.depths), kernel.truncation_radius
    )
    if skipped:
        log.debug("skipped %d ray/plane intersections (ray parallel to plane)", skipped)
    return values


def accumulate_naive(
    events: EventArray,
    model: TrajectoryModel,
    camera: CameraModel,
    grid: VoxelGrid,
    kernel: KernelSchedule,
    bearings=None,
) -> DensityField:
    o, d = _rays(events, model, camera, grid, bearings)
    return DensityField(grid, accumulate_naive_rays(o, d, grid, kernel))


def accumulate_fast(
    events: EventArray,
    model: TrajectoryModel,
    camera: CameraModel,
    grid: VoxelGrid,
    kernel: KernelSchedule,
    bearings=None,
) -> DensityField:
    o, d = _rays(events, model, camera, grid, bearings)
    return DensityField(grid, accumulate_fast_rays(o, d, grid, kernel))


# ----------------------------------------------------------------------------
# 2D image of warped events
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ImageGrid:
    width: int
    height: int
    sigma_px: float = 1.0
    values: np.ndarray | None = None
    truncation_radius: float = 6.0

    def __post_init__(self):
        if self.values is None:
            object.__setattr__(self, "values", np.zeros((self.height, self.width)))
        elif self.values.shape != (self.height, self.width):
            raise DomainError("image values must have shape (height, width)")
        if not self.sigma_px > 0:
            raise DomainError("sigma_px must be positive")

    def variance(self) -> float:
        return float(np.var(self.values))


def accumulate_iwe(warped_pixels, image: ImageGrid) -> ImageGrid:
    """Add a Gaussian blob per warped pixel; pixel centers sit at integer coordinates."""
    pts = np.asarray(warped_pixels, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise DomainError("warped pixels must be finite")
    values = np.array(image.values, dtype=float, copy=True)
    if pts.size:
        s = image.sigma_px
        reach = image.truncation_radius * s
        half = int(np.ceil(reach))
        off = np.arange(-half, half + 1)
        cx = np.rint(pts[:, 0]).astype(int)
        cy = np.rint(pts[:, 1]).astype(int)
        gx = cx[:, None, None] + off[None, None, :]
        gy = cy[:, None, None] + off[None, :, None]
        d2 = (gx - pts[:, 0, None, None]) ** 2 + (gy - pts[:, 1, None, None]) ** 2
        keep = (d2 <= reach * reach) & (gx >= 0) & (gx < image.width) & (gy >= 0) & (gy < image.height)
        np.add.at(values, (np.broadcast_to(gy, d2.shape)[keep], np.broadcast_to(gx, d2.shape)[keep]),
                  np.exp(-d2[keep] / (2.0 * s * s)))
    return ImageGrid(image.width, image.height, image.sigma_px, values, image.truncation_radius)


def warp_pixels_rotational(events: EventArray, model: TrajectoryModel, camera: CameraModel, t_r: float) -> np.ndarray:
    """Warp events into the reference view ignoring translation (infinite-depth homography).

    This is the classic 2D warp the image-of-warped-events baseline relies on.
    """
    f = event_bearings(events, camera)
    r, _ = model.relative_camera_arrays(t_r, events.t)
    d = np.einsum("kij,kj->ki", r, f)
    ok = d[:, 2] > 0
    out = np.full((len(events), 2), np.nan)
    out[ok] = camera.project(d[ok])
    return out[ok]


def density_slices(field_: DensityField) -> Sequence[np.ndarray]:
    return [field_.values[l] for l in range(field_.values.shape[0])]
