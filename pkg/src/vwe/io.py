"""Plain-text and binary file formats.

Numbers are written with 17 significant digits so every float64 survives a
write/read cycle unchanged.  Parse failures raise :class:`FormatError` naming
the file and line.
"""

from __future__ import annotations

import logging
import os
import re
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.spatial.transform import Rotation

from .core import CameraModel, EventArray, PoseSample, RigidTransform
from .errors import DomainError, FormatError
from .field import DensityField, GridSpec, VoxelGrid
from .trajectory import Extrinsics, PlanarSpline

log = logging.getLogger(__name__)

FLOAT = "%.17g"


def fmt(x) -> str:
    return FLOAT % float(x)


def fmt_row(values) -> str:
    return " ".join(fmt(v) for v in values)


def _lines(path) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(line_number, tokens)`` for non-blank, non-comment lines."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        for no, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if body:
                yield no, body.split()


def _floats(path, no, tokens, count=None) -> list[float]:
    if count is not None and len(tokens) != count:
        raise FormatError(f"{path}:{no}: expected {count} values, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"{path}:{no}: {exc}") from None
    if not all(np.isfinite(vals)):
        raise FormatError(f"{path}:{no}: non-finite value")
    return vals


def _write(path, lines: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_kv(path) -> dict[str, tuple[int, list[str]]]:
    out = {}
    for no, tokens in _lines(path):
        key = tokens[0]
        if key in out:
            raise FormatError(f"{path}:{no}: duplicate key {key!r}")
        out[key] = (no, tokens[1:])
    return out


def _kv_floats(path, kv, key, count=None, default=None):
    if key not in kv:
        if default is not None:
            return default
        raise FormatError(f"{path}: missing key {key!r}")
    no, tokens = kv[key]
    return _floats(path, no, tokens, count)


def _kv_int(path, kv, key) -> int:
    (v,) = _kv_floats(path, kv, key, 1)
    if v != int(v):
        raise FormatError(f"{path}:{kv[key][0]}: {key} must be an integer")
    return int(v)


# ----------------------------------------------------------------------------
# events
# ----------------------------------------------------------------------------


def save_events(path, events: EventArray) -> None:
    lines = ["# t x y p"]
    lines += [f"{fmt(t)} {fmt(x)} {fmt(y)} {int(p)}" for t, x, y, p in zip(events.t, events.x, events.y, events.p)]
    _write(path, lines)


def load_events(path) -> EventArray:
    """Read ``t x y p`` lines; timestamps must be non-decreasing."""
    rows = []
    last_t, last_no = -np.inf, 0
    for no, tokens in _lines(path):
        t, x, y, p = _floats(path, no, tokens, 4)
        if p not in (-1.0, 0.0, 1.0):
            raise FormatError(f"{path}:{no}: polarity must be -1, 0 or 1")
        if t < last_t:
            raise FormatError(f"{path}:{no}: timestamp {t!r} precedes line {last_no}; events must be time-sorted")
        last_t, last_no = t, no
        rows.append((t, x, y, p))
    if not rows:
        return EventArray.empty()
    a = np.array(rows)
    return EventArray(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


# ----------------------------------------------------------------------------
# calibration
# ----------------------------------------------------------------------------


def save_calibration(path, camera: CameraModel, extrinsics: Extrinsics | None = None) -> None:
    extrinsics = extrinsics or Extrinsics()
    c = camera.coeffs
    lines = [
        f"fx {fmt(camera.fx)}",
        f"fy {fmt(camera.fy)}",
        f"cx {fmt(camera.cx)}",
        f"cy {fmt(camera.cy)}",
        f"width {camera.width}",
        f"height {camera.height}",
    ]
    lines += [f"dist{i} {fmt(c[i])}" for i in range(5)]
    lines += [f"Rvc {fmt_row(extrinsics.R_vc.ravel())}", f"tvc {fmt_row(extrinsics.t_vc)}"]
    _write(path, lines)


CALIBRATION_KEYS = {"fx", "fy", "cx", "cy", "width", "height", "Rvc", "tvc"} | {f"dist{i}" for i in range(5)}


def load_calibration(path) -> tuple[CameraModel, Extrinsics]:
    kv = _read_kv(path)
    for key, (no, _) in kv.items():
        if key not in CALIBRATION_KEYS:
            raise FormatError(f"{path}:{no}: unknown key {key!r}")
    dist = tuple(_kv_floats(path, kv, f"dist{i}", 1, [0.0])[0] for i in range(5))
    while dist and dist[-1] == 0.0:
        dist = dist[:-1]
    try:
        camera = CameraModel(
            _kv_floats(path, kv, "fx", 1)[0],
            _kv_floats(path, kv, "fy", 1)[0],
            _kv_floats(path, kv, "cx", 1)[0],
            _kv_floats(path, kv, "cy", 1)[0],
            _kv_int(path, kv, "width"),
            _kv_int(path, kv, "height"),
            dist,
        )
        r = np.reshape(_kv_floats(path, kv, "Rvc", 9, list(np.eye(3).ravel())), (3, 3))
        t = np.array(_kv_floats(path, kv, "tvc", 3, [0.0, 0.0, 0.0]))
        ext = Extrinsics(r, t)
    except DomainError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return camera, ext


# ----------------------------------------------------------------------------
# trajectories
# ----------------------------------------------------------------------------


def save_trajectory(path, samples: list[PoseSample]) -> None:
    """TUM layout ``t tx ty tz qx qy qz qw`` (vehicle-to-world poses)."""
    lines = ["# t tx ty tz qx qy qz qw"]
    for s in samples:
        q = Rotation.from_matrix(s.pose.rotation).as_quat()
        lines.append(f"{fmt(s.t)} {fmt_row(s.pose.translation)} {fmt_row(q)}")
    _write(path, lines)


def load_trajectory(path) -> list[PoseSample]:
    out = []
    for no, tokens in _lines(path):
        vals = _floats(path, no, tokens, 8)
        q = np.array(vals[4:])
        if not 0.5 < np.linalg.norm(q) < 2.0:
            raise FormatError(f"{path}:{no}: quaternion is far from unit length")
        if out and vals[0] <= out[-1].t:
            raise FormatError(f"{path}:{no}: timestamps must be strictly increasing")
        pose = RigidTransform(Rotation.from_quat(q).as_matrix(), vals[1:4])
        out.append(PoseSample(vals[0], pose))
    if not out:
        raise FormatError(f"{path}: no poses")
    return out


# ----------------------------------------------------------------------------
# splines and scenes
# ----------------------------------------------------------------------------


def save_spline(path, spline: PlanarSpline) -> None:
    """Header ``degree``, ``n_ctrl`` and ``knots`` lines, then one ``x y`` per point.

    As in :func:`~vwe.trajectory.fit_spline`, ``n_ctrl`` is the index of the
    last control point, so ``n_ctrl + 1`` point lines follow.
    """
    lines = [f"degree {spline.degree}", f"n_ctrl {spline.n}", f"knots {fmt_row(spline.knots)}"]
    lines += [fmt_row(p) for p in spline.control_points]
    _write(path, lines)


def load_spline(path) -> PlanarSpline:
    it = iter(_lines(path))
    header = {}
    for key in ("degree", "n_ctrl", "knots"):
        try:
            no, tokens = next(it)
        except StopIteration:
            raise FormatError(f"{path}: truncated header, missing {key!r}") from None
        if tokens[0] != key:
            raise FormatError(f"{path}:{no}: expected {key!r}, got {tokens[0]!r}")
        header[key] = (no, tokens[1:])
    degree = int(_floats(path, header["degree"][0], header["degree"][1], 1)[0])
    n_ctrl = int(_floats(path, header["n_ctrl"][0], header["n_ctrl"][1], 1)[0])
    knots = _floats(path, *header["knots"])
    pts, last = [], header["knots"][0]
    for no, tokens in it:
        pts.append(_floats(path, no, tokens, 2))
        last = no
    if len(pts) != n_ctrl + 1:
        raise FormatError(f"{path}:{last}: expected {n_ctrl + 1} control points, found {len(pts)}")
    try:
        return PlanarSpline(degree, np.array(knots), np.array(pts))
    except DomainError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_scene(path, scene) -> None:
    lines = [f"# points_per_meter {fmt(scene.points_per_meter)}", "# x1 y1 z1 x2 y2 z2"]
    lines += [fmt_row(s.ravel()) for s in scene.segments]
    _write(path, lines)


def load_scene(path, points_per_meter: float | None = None):
    from .synth import SyntheticScene

    ppm = points_per_meter
    if ppm is None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok = line.strip().lstrip("#").split()
                if line.startswith("#") and len(tok) == 2 and tok[0] == "points_per_meter":
                    ppm = float(tok[1])
                    break
    segs = [_floats(path, no, tokens, 6) for no, tokens in _lines(path)]
    if not segs:
        raise FormatError(f"{path}: no segments")
    try:
        return SyntheticScene(np.array(segs).reshape(-1, 2, 3), 40.0 if ppm is None else ppm)
    except DomainError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ----------------------------------------------------------------------------
# density fields and depth maps
# ----------------------------------------------------------------------------


def _camera_lines(camera: CameraModel) -> list[str]:
    return [
        f"camera {fmt(camera.fx)} {fmt(camera.fy)} {fmt(camera.cx)} {fmt(camera.cy)} {camera.width} {camera.height}",
        f"distortion {fmt_row(camera.coeffs)}",
    ]


def _pose_line(key, pose: RigidTransform) -> str:
    return f"{key} {fmt_row(pose.translation)} {fmt_row(Rotation.from_matrix(pose.rotation).as_quat())}"


def _grid_lines(grid: VoxelGrid) -> list[str]:
    s = grid.spec
    return [
        f"shape {s.nz} {s.ny} {s.nx}",
        f"z_range {fmt(s.z_min)} {fmt(s.z_max)}",
        f"t_ref {fmt(grid.t_ref)}",
        _pose_line("ref_pose", grid.ref_pose),
    ] + _camera_lines(grid.camera)


def _grid_from_kv(path, kv) -> VoxelGrid:
    nz, ny, nx = (int(v) for v in _kv_floats(path, kv, "shape", 3))
    z_min, z_max = _kv_floats(path, kv, "z_range", 2)
    (t_ref,) = _kv_floats(path, kv, "t_ref", 1)
    pose = _kv_floats(path, kv, "ref_pose", 7)
    cam = _kv_floats(path, kv, "camera", 6)
    dist = tuple(_kv_floats(path, kv, "distortion", 5))
    while dist and dist[-1] == 0.0:
        dist = dist[:-1]
    try:
        camera = CameraModel(cam[0], cam[1], cam[2], cam[3], int(cam[4]), int(cam[5]), dist)
        ref = RigidTransform(Rotation.from_quat(pose[3:]).as_matrix(), pose[:3])
        return GridSpec(nx, ny, nz, z_min, z_max).build(camera, t_ref, ref)
    except DomainError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _sidecar(prefix) -> Path:
    return Path(str(prefix) + ".txt")


def _binary(prefix) -> Path:
    return Path(str(prefix) + ".f32")


def save_density(prefix, field_: DensityField) -> None:
    """Write ``<prefix>.f32`` (little-endian float32, z-major) and ``<prefix>.txt``."""
    _write(_sidecar(prefix), ["# density field, float32 little-endian, layout z y x"] + _grid_lines(field_.grid))
    field_.values.astype("<f4").tofile(_binary(prefix))


def load_density(prefix) -> DensityField:
    kv = _read_kv(_sidecar(prefix))
    grid = _grid_from_kv(_sidecar(prefix), kv)
    values = np.fromfile(_binary(prefix), dtype="<f4")
    if values.size != np.prod(grid.shape):
        raise FormatError(f"{_binary(prefix)}: expected {np.prod(grid.shape)} floats, found {values.size}")
    return DensityField(grid, values.reshape(grid.shape).astype(np.float64))


def slice_images(values: np.ndarray) -> np.ndarray:
    """Map a field to 8-bit slices using one scale for the whole volume."""
    top = float(values.max()) if values.size else 0.0
    if top <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.clip(np.rint(255.0 * values / top), 0, 255).astype(np.uint8)


def save_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def load_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the pixels
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if head is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, top = (int(g) for g in head.groups())
    if top != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    body = data[head.end():]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def save_density_slices(directory, field_: DensityField, stem: str = "slice") -> list[Path]:
    images = slice_images(field_.values)
    paths = []
    for l, img in enumerate(images):
        p = Path(directory) / f"{stem}_{l:03d}.pgm"
        save_pgm(p, img)
        paths.append(p)
    return paths


def save_depth_map(prefix, depth_map) -> None:
    """Write ``<prefix>.f32`` (NaN marks empty cells) and a sidecar."""
    ny, nx = depth_map.depth.shape
    lines = [
        "# depth map, float32 little-endian, layout y x, NaN where no peak",
        f"size {nx} {ny}",
        f"threshold {fmt(depth_map.threshold)}",
        f"valid {len(depth_map)}",
    ] + _grid_lines(depth_map.grid)
    _write(_sidecar(prefix), lines)
    depth_map.depth.astype("<f4").tofile(_binary(prefix))


def load_depth_map(prefix) -> tuple[np.ndarray, dict]:
    """Return the ``(ny, nx)`` depth array and the sidecar fields."""
    path = _sidecar(prefix)
    kv = _read_kv(path)
    nx, ny = (int(v) for v in _kv_floats(path, kv, "size", 2))
    depth = np.fromfile(_binary(prefix), dtype="<f4")
    if depth.size != nx * ny:
        raise FormatError(f"{_binary(prefix)}: expected {nx * ny} floats, found {depth.size}")
    meta = {
        "threshold": _kv_floats(path, kv, "threshold", 1)[0],
        "t_ref": _kv_floats(path, kv, "t_ref", 1)[0],
        "grid": _grid_from_kv(path, kv),
    }
    return depth.reshape(ny, nx).astype(np.float64), meta


def save_point_cloud(path, points) -> None:
    _write(path, ["# x y z"] + [fmt_row(p) for p in np.asarray(points, dtype=float).reshape(-1, 3)])


def load_point_cloud(path) -> np.ndarray:
    rows = [_floats(path, no, tokens, 3) for no, tokens in _lines(path)]
    return np.array(rows, dtype=float).reshape(-1, 3)


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"{p}: cannot create directory ({exc.strerror})") from exc
    if not os.access(p, os.W_OK):
        raise FormatError(f"{p}: directory is not writable")
    return p
