"""Small helpers shared by several test modules."""

import numpy as np
from scipy.spatial.transform import Rotation

from vwe.core import CameraModel, EventArray
from vwe.field import GridSpec
from vwe.trajectory import AckermannModel, AckermannParams, Extrinsics


def random_rotation(rng):
    q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


SMALL_CAM = CameraModel(40.0, 40.0, 15.5, 11.5, 32, 24)


def line_distance_by_search(origin, direction, point, lo=-1e4, hi=1e4, n=2001, levels=12):
    """Minimise |origin + s*direction - point| over s by nested sampling."""
    o = np.asarray(origin)[:, None, :]
    d = np.asarray(direction)[:, None, :]
    p = np.asarray(point)[:, None, :]
    a = np.full(o.shape[0], lo)
    b = np.full(o.shape[0], hi)
    best = None
    for _ in range(levels):
        s = a[:, None] + (b - a)[:, None] * np.linspace(0.0, 1.0, n)[None, :]
        dist = np.linalg.norm(o + s[..., None] * d - p, axis=-1)
        k = np.argmin(dist, axis=1)
        best = dist[np.arange(k.size), k]
        step = (b - a) / (n - 1)
        centre = s[np.arange(k.size), k]
        a, b = centre - step, centre + step
    return best


def random_instance(rng, n_events=200, grid=(12, 10, 8), model=None, span=0.1):
    spec = GridSpec(*grid, z_min=0.8, z_max=6.0)
    t = np.sort(rng.uniform(-span / 2, span / 2, n_events))
    ev = EventArray(t, rng.uniform(-0.5, 31.5, n_events), rng.uniform(-0.5, 23.5, n_events))
    model = model or AckermannModel(AckermannParams(rng.uniform(-1, 1), rng.uniform(0.2, 1.0)), Extrinsics.forward_facing())
    grid_ = spec.build(SMALL_CAM, 0.0)
    return ev, model, grid_


# grid
