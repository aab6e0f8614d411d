"""Dependency-free SVG output: trajectory top views and density slices."""

from __future__ import annotations

import numpy as np

from .core import PoseSample, RigidTransform
from .errors import DomainError
from .trajectory import SampledTrajectory

COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e")


def align(samples: list[PoseSample], truth: list[PoseSample], mode: str = "first") -> list[PoseSample]:
    """Move ``samples`` onto ``truth`` by the first pose, optionally rescaled.

    ``"scaled"`` additionally scales positions about the first one by the
    least-squares factor against time-matched truth positions.
    """
    from .pipeline import align_first_pose

    model = SampledTrajectory.from_samples(truth)
    lo, hi = model.domain
    kept = [s for s in samples if lo <= s.t <= hi]
    if not kept:
        raise DomainError("estimate and truth do not overlap in time")
    out = align_first_pose(kept, model)
    if mode == "first":
        return out
    if mode != "scaled":
        raise DomainError(f"unknown alignment {mode!r}")
    p = np.array([s.pose.translation for s in out])
    q = model.vehicle_arrays(np.array([s.t for s in out]))[1]
    d, e = p - p[0], q - q[0]
    den = float(np.sum(d * d))
    scale = float(np.sum(d * e)) / den if den > 0 else 1.0
    return [
        PoseSample(s.t, RigidTransform(s.pose.rotation, p[0] + scale * (s.pose.translation - p[0])))
        for s in out
    ]


def _path(xy: np.ndarray) -> str:
    head = "M %.4f %.4f" % tuple(xy[0])
    return head + "".join(" L %.4f %.4f" % (x, y) for x, y in xy[1:])


def trajectory_svg(curves: dict[str, list[PoseSample]], size: int = 600, margin: int = 30) -> str:
    """Top view (x right, y up) of vehicle positions, one polyline per curve."""
    if not curves:
        raise DomainError("nothing to plot")
    xy = {k: np.array([s.pose.translation[:2] for s in v]) for k, v in curves.items()}
    allp = np.concatenate(list(xy.values()))
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    extent = float(max(hi - lo)) or 1.0
    scale = (size - 2 * margin) / extent

    def to_px(p):
        return np.column_stack([margin + (p[:, 0] - lo[0]) * scale, size - margin - (p[:, 1] - lo[1]) * scale])

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for i, (name, pts) in enumerate(xy.items()):
        color = COLORS[i % len(COLORS)]
        parts.append(f'<path id="{name}" d="{_path(to_px(pts))}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{margin}" y="{margin - 10 + 14 * i}" fill="{color}" font-size="12">{name}</text>')
    parts.append(f'<text x="{size - margin}" y="{size - 8}" text-anchor="end" font-size="10">{extent:.3f} m</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def density_svg(values: np.ndarray, columns: int = 8, cell: int = 2, max_width: int = 64) -> str:
    """Grid of grayscale depth slices sharing one intensity scale."""
    values = np.asarray(values, dtype=float)
    nz, ny, nx = values.shape
    step = max(1, int(np.ceil(nx / max_width)))
    small = values[:, ::step, ::step]
    top = float(small.max()) or 1.0
    h, w = small.shape[1:]
    rows = int(np.ceil(nz / columns))
    pad = 4
    width = columns * (w * cell + pad)
    height = rows * (h * cell + pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="black"/>']
    for l in range(nz):
        ox = (l % columns) * (w * cell + pad)
        oy = (l // columns) * (h * cell + pad)
        level = np.rint(255 * small[l] / top).astype(int)
        parts.append(f'<g id="slice{l}">')
        for n, m in zip(*np.nonzero(level)):
            g = level[n, m]
            parts.append(f'<rect x="{ox + m * cell}" y="{oy + n * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({g},{g},{g})"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
