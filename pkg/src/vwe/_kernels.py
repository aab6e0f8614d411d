"""Numba kernels for ray-density splatting.

Layout: fields are ``(nz, ny, nx)`` arrays.  Column/row centers are given by
normalized image coordinates ``xs``/``ys`` so the voxel center of
``(l, n, m)`` is ``depths[l] * (xs[m], ys[n], 1)``.

Work is split by depth plane: each plane's slice of the output has a single
writer that visits the rays in stream order, so every voxel sums its
contributions in the same order whatever the thread count.

The splat of one ray into one depth plane uses the identity

    |e|^2 = a^2 (1 - dx^2) + b^2 (1 - dy^2) - 2 a b dx dy

for the perpendicular offset ``e`` of an in-plane displacement ``(a, b)``
from the ray/plane intersection, which lets the Gaussian factor into
per-column, per-row and cross terms evaluated by multiplicative
recurrences.  When the exponents over the window could leave the safe
floating point range the kernel evaluates ``exp`` per voxel instead.
"""

import math
import os

import numba
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

# Largest exponent magnitude for which the factorized recurrence is used;
# keeps every intermediate factor inside exp(+-600).
_FACTOR_LIMIT = 600.0


@numba.njit(cache=True, nogil=True)
def _step_coefficients(zl, sig, dxn, dyn):
    # c * da^2, c * db^2 and c * da * db for one plane
    c = 1.0 / (2.0 * sig * sig)
    da = dxn * zl
    db = dyn * zl
    return np.array([c * da * da, c * db * db, c * da * db])


@numba.njit(cache=True, nogil=True)
def _same_steps(a, b):
    for i in range(3):
        if abs(a[i] - b[i]) > 1e-12 * abs(b[i]):
            return False
    return True


@numba.njit(cache=True, nogil=True)
def _ray_constants(dirs, ref):
    # Second-difference factors of the recurrences.  They depend on the
    # plane only through ``ref``, which is constant when sigma grows
    # linearly with depth.
    n = dirs.shape[0]
    out = np.empty((n, 3))
    for k in range(n):
        fx = dirs[k, 0]
        fy = dirs[k, 1]
        out[k, 0] = math.exp(-2.0 * (1.0 - fx * fx) * ref[0])
        out[k, 1] = math.exp(-2.0 * (1.0 - fy * fy) * ref[1])
        out[k, 2] = math.exp(2.0 * fx * fy * ref[2])
    return out


@numba.njit(cache=True, nogil=True)
def _splat_plane(origins, dirs, consts, ref, l, depths, xs, ys, sigmas, radius, out, scratch):
    nz, ny, nx = out.shape
    x0 = xs[0]
    y0 = ys[0]
    dxn = xs[1] - xs[0] if nx > 1 else 1.0
    dyn = ys[1] - ys[0] if ny > 1 else 1.0
    skipped = 0
    zl = depths[l]
    sig = sigmas[l]
    shared = _same_steps(_step_coefficients(zl, sig, dxn, dyn), ref)
    for k in range(origins.shape[0]):
        ox = origins[k, 0]
        oy = origins[k, 1]
        oz = origins[k, 2]
        fx = dirs[k, 0]
        fy = dirs[k, 1]
        fz = dirs[k, 2]
        if abs(fz) < 1e-12:
            skipped += 1
            continue
        qa = 1.0 - fx * fx
        qb = 1.0 - fy * fy
        kxy = fx * fy
        afz = abs(fz)
        lam = (zl - oz) / fz
        if lam <= 0.0:
            continue
        px = ox + lam * fx
        py = oy + lam * fy
        w = radius * sig / afz
        if math.isinf(w):
            mlo, mhi, nlo, nhi = 0, nx - 1, 0, ny - 1
        else:
            mlo = max(0, int(math.ceil(((px - w) / zl - x0) / dxn)))
            mhi = min(nx - 1, int(math.floor(((px + w) / zl - x0) / dxn)))
            nlo = max(0, int(math.ceil(((py - w) / zl - y0) / dyn)))
            nhi = min(ny - 1, int(math.floor(((py + w) / zl - y0) / dyn)))
        if mlo > mhi or nlo > nhi:
            continue
        c = 1.0 / (2.0 * sig * sig)
        da = dxn * zl
        db = dyn * zl
        a0 = (x0 + mlo * dxn) * zl - px
        b0 = (y0 + nlo * dyn) * zl - py
        a1 = a0 + (mhi - mlo) * da
        b1 = b0 + (nhi - nlo) * db
        amax = max(abs(a0), abs(a1))
        bmax = max(abs(b0), abs(b1))
        bound = max(
            c * qa * (amax + da) * (amax + da),
            c * qb * (bmax + db) * (bmax + db),
            2.0 * c * abs(kxy) * (amax + da) * (bmax + db),
        )
        if bound < _FACTOR_LIMIT:
            nm = mhi - mlo + 1
            e = math.exp(-c * qa * a0 * a0)
            rr = math.exp(-c * qa * (2.0 * a0 * da + da * da))
            if shared:
                ss = consts[k, 0]
                sb = consts[k, 1]
                qr = consts[k, 2]
            else:
                ss = math.exp(-2.0 * c * qa * da * da)
                sb = math.exp(-2.0 * c * qb * db * db)
                qr = math.exp(2.0 * c * kxy * da * db)
            for i in range(nm):
                scratch[i] = e
                e *= rr
                rr *= ss
            eb = math.exp(-c * qb * b0 * b0)
            rb = math.exp(-c * qb * (2.0 * b0 * db + db * db))
            k2 = 2.0 * c * kxy
            t0 = math.exp(k2 * a0 * b0)
            t0r = math.exp(k2 * a0 * db)
            q = math.exp(k2 * da * b0)
            for n in range(nlo, nhi + 1):
                t = eb * t0
                for i in range(nm):
                    out[l, n, mlo + i] += scratch[i] * t
                    t *= q
                eb *= rb
                rb *= sb
                t0 *= t0r
                q *= qr
        else:
            for n in range(nlo, nhi + 1):
                b = b0 + (n - nlo) * db
                for m in range(mlo, mhi + 1):
                    a = a0 + (m - mlo) * da
                    e2 = a * a * qa + b * b * qb - 2.0 * a * b * kxy
                    if e2 < 0.0:
                        e2 = 0.0
                    out[l, n, m] += math.exp(-c * e2)
    return skipped


@numba.njit(cache=True, parallel=True)
def _splat_planes(origins, dirs, depths, xs, ys, sigmas, radius, out):
    nz, ny, nx = out.shape
    skipped = np.zeros(nz, dtype=np.int64)
    dxn = xs[1] - xs[0] if nx > 1 else 1.0
    dyn = ys[1] - ys[0] if ny > 1 else 1.0
    ref = _step_coefficients(depths[0], sigmas[0], dxn, dyn)
    consts = _ray_constants(dirs, ref)
    for l in numba.prange(nz):
        scratch = np.empty(nx)
        skipped[l] = _splat_plane(origins, dirs, consts, ref, l, depths, xs, ys, sigmas, radius, out, scratch)
    return skipped.sum()


def splat(origins, dirs, depths, xs, ys, sigmas, radius):
    """Accumulate rays into a fresh ``(nz, ny, nx)`` field.

    Returns ``(field, skipped_plane_intersections)``.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    out = np.zeros((depths.size, ys.size, xs.size))
    skipped = _splat_planes(origins, dirs, depths, xs, ys, sigmas, float(radius), out)
    return out, int(skipped)
