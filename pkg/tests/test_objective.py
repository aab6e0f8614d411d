import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vwe import pipeline, synth
from vwe.core import EventArray, RigidTransform
from vwe.errors import DomainError, InsufficientDataError, NumericalError
from vwe.field import GridSpec, KernelSchedule
from vwe.objective import (
    MultiVolumeConfig,
    MultiVolumeContrast,
    OmegaObjective,
    SplineContrast,
    TurnAngleContrast,
    VolumeContrast,
    VolumeWindow,
    gradient_fd,
    grid_scan,
    multi_volume_objective,
    single_volume_objective,
    solve_1d,
    solve_nd,
    variance,
)
from vwe.trajectory import AckermannModel, AckermannParams, Extrinsics, SplineModel

from helpers import random_rotation


# variance


def test_variance_examples():
    assert variance(np.full((3, 4, 5), 7.5)) == 0.0
    assert variance(np.array([0.0, 2.0])) == 1.0
    with pytest.raises(DomainError):
        variance(np.zeros(0))


def test_variance_matches_two_pass_sum(rng):
    x = rng.gamma(2.0, 3.0, size=(16, 16, 16))
    mean = math.fsum(x.ravel()) / x.size
    two_pass = math.fsum(((x - mean) ** 2).ravel()) / x.size
    assert abs(variance(x) - two_pass) / two_pass < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
def test_variance_scales_quadratically(c, seed):
    x = np.random.default_rng(seed).random((5, 6, 7))
    assert variance(c * x) == pytest.approx(c * c * variance(x), rel=1e-12)


# single volume


@pytest.fixture(scope="module")
def circle_window(short_circle):
    b = short_circle
    return b, VolumeWindow.from_stream(b.events, 0.4, 0.2), pipeline.sensor_grid(b.camera)


def test_true_omega_has_highest_contrast(circle_window):
    b, w, spec = circle_window
    omega = b.meta["omega"]
    vals = {}
    for f in (0.8, 1.0, 1.2):
        model = AckermannModel(AckermannParams(omega * f, b.meta["v"], w.t_r), b.extrinsics)
        vals[f] = single_volume_objective(b.events, model, b.camera, w, spec).value
    assert vals[1.0] > vals[0.8] and vals[1.0] > vals[1.2]


def test_empty_window_is_rejected(circle_window):
    b, _, spec = circle_window
    w = VolumeWindow.from_stream(b.events, 5.0, 0.2)
    model = AckermannModel(AckermannParams(0.3, 0.5), b.extrinsics)
    with pytest.raises(InsufficientDataError):
        single_volume_objective(b.events, model, b.camera, w, spec)


def test_duplicated_events_quadruple_variance(circle_window):
    b, w, _ = circle_window
    spec = GridSpec(64, 48, 8)
    ev = b.events.window(0.38, 0.42)
    twice = ev.concat(ev)
    model = AckermannModel(AckermannParams(0.3, 0.5, w.t_r), b.extrinsics)
    win1 = VolumeWindow.from_stream(ev, w.t_r, 0.04)
    win2 = VolumeWindow.from_stream(twice, w.t_r, 0.04)
    one = single_volume_objective(ev, model, b.camera, win1, spec, min_events=1).value
    two = single_volume_objective(twice, model, b.camera, win2, spec, min_events=1).value
    assert two == pytest.approx(4.0 * one, rel=1e-12)


def test_volume_window_membership():
    cfg = MultiVolumeConfig(tau1=0.1, tau2=0.2)
    t = np.linspace(0.0, 1.0, 1001)
    ev = EventArray(t, np.zeros_like(t), np.zeros_like(t))
    wins = cfg.windows(ev)
    refs = np.array([w.t_r for w in wins])
    assert np.allclose(np.diff(refs), 0.1)
    i = 3
    probe = refs[i] + 0.6 * 0.1
    inside = [k for k, w in enumerate(wins) if w.contains(probe)]
    assert inside == [i, i + 1]
    for w in wins:
        w.verify(ev)


def test_window_range_check():
    t = np.linspace(0, 1, 11)
    ev = EventArray(t, t, t)
    with pytest.raises(DomainError):
        VolumeWindow(0.5, 0.1, (0, 3)).verify(ev)


def test_config_validation():
    with pytest.raises(DomainError):
        MultiVolumeConfig(tau1=0.0)
    with pytest.raises(DomainError):
        MultiVolumeConfig(M=0)
    with pytest.raises(InsufficientDataError):
        MultiVolumeConfig(tau2=2.0).reference_times(0.0, 1.0)


# multiple volumes


def test_single_volume_config_equals_single_objective(long_bundle):
    b = long_bundle
    spec = GridSpec(64, 48, 8)
    cfg = MultiVolumeConfig(M=1)
    multi = multi_volume_objective(b.events, b.trajectory, b.camera, cfg, spec)
    w = cfg.windows(b.events)[0]
    single = single_volume_objective(b.events, b.trajectory, b.camera, w, spec)
    assert multi.value == single.value
    assert multi.per_volume == [single.value]


def test_multi_volume_objective_is_gauge_invariant(long_bundle):
    b = long_bundle
    spec = GridSpec(64, 48, 8)
    cfg = MultiVolumeConfig(M=3)
    a = multi_volume_objective(b.events, b.trajectory, b.camera, cfg, spec).value
    anchor = RigidTransform(random_rotation(np.random.default_rng(4)), [3.0, -2.0, 1.0])
    moved = SplineModel(b.trajectory.spline, b.extrinsics, anchor)
    c = multi_volume_objective(b.events, moved, b.camera, cfg, spec).value
    assert abs(a - c) <= 1e-9 * abs(a)


def test_all_windows_insufficient(long_bundle):
    b = long_bundle
    with pytest.raises(InsufficientDataError):
        MultiVolumeContrast(b.events, b.camera, MultiVolumeConfig(M=2), GridSpec(8, 6, 4), min_events=10**7)


def test_ground_truth_beats_perturbed_control_points(long_bundle):
    b = long_bundle
    mv = MultiVolumeContrast(b.events, b.camera, MultiVolumeConfig(M=3), pipeline.sensor_grid(b.camera))
    obj = SplineContrast(mv, b.trajectory)
    theta = b.trajectory.spline.control_points.ravel().copy()
    f0 = obj(theta)
    rng = np.random.default_rng(0)
    # control points whose support reaches the three windows
    reach = [j for j in range(obj.n_ctrl) if obj._affected[2 * j]]
    for _ in range(20):
        j = rng.choice(reach)
        d = rng.normal(size=2)
        th = theta.copy()
        th[2 * j : 2 * j + 2] += 0.05 * d / np.linalg.norm(d)
        assert obj(th) < f0


def test_restricted_gradient_equals_full_finite_difference(long_bundle):
    b = long_bundle
    spec = GridSpec(64, 48, 8)
    mv = MultiVolumeContrast(b.events, b.camera, MultiVolumeConfig(M=4), spec)
    obj = SplineContrast(mv, b.trajectory)
    theta = b.trajectory.spline.control_points.ravel().copy()
    free = np.zeros(theta.size, dtype=bool)
    free[4:12] = True
    g = obj.gradient(theta, 1e-4, free)
    full = np.zeros_like(theta)
    for j in np.flatnonzero(free):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += 1e-4
        tm[j] -= 1e-4
        full[j] = (sum(mv.per_volume(obj.model(tp))) - sum(mv.per_volume(obj.model(tm)))) / 2e-4
    assert np.abs(g - full).max() <= 1e-10 * max(1.0, np.abs(full).max())


def test_turn_angles_round_trip(long_bundle):
    b = long_bundle
    mv = MultiVolumeContrast(b.events, b.camera, MultiVolumeConfig(M=2), GridSpec(8, 6, 4))
    obj = TurnAngleContrast(mv, b.trajectory)
    cp = b.trajectory.spline.control_points
    assert np.allclose(obj.control_points(obj.angles(cp)), cp, atol=1e-12)
    th = obj.angles(cp)
    th[3] += 0.1
    moved = obj.control_points(th)
    assert np.allclose(np.linalg.norm(np.diff(moved, axis=0), axis=1), obj.lengths, atol=1e-12)
    assert np.allclose(moved[:4], cp[:4], atol=1e-12)


# finite differences


def test_gradient_of_quadratic():
    g = gradient_fd(lambda th: -((th[0] - 3.0) ** 2), [1.0], 1e-4)
    assert abs(g[0] - 4.0) < 1e-8


def test_gradient_of_constant():
    assert np.all(gradient_fd(lambda th: 2.0, np.zeros(4), 1e-3) == 0.0)


def test_gradient_non_finite():
    with pytest.raises(NumericalError):
        gradient_fd(lambda th: math.nan, [0.0], 1e-3)


# one-dimensional solver


def test_solve_1d_analytic_maximum():
    res = solve_1d(lambda w: -((w - 0.1) ** 2))
    assert abs(res.omega - 0.1) < 1e-6
    assert not res.boundary_warning
    assert res.scan.shape == (21, 2)


def test_solve_1d_boundary_warning():
    res = solve_1d(lambda w: w, bracket=(-1.0, 1.0))
    assert res.boundary_warning
    assert res.omega >= 1.0


def test_grid_scan_tie_prefers_small_magnitude():
    i, xs, _ = grid_scan(lambda w: 1.0, (-1.0, 1.0), 21)
    assert xs[i] == 0.0
    with pytest.raises(DomainError):
        grid_scan(lambda w: 1.0, (1.0, -1.0))


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(0.5, 20.0))
def test_solve_1d_never_loses_ground(peak, init, width):
    def f(w):
        return math.exp(-width * (w - peak) ** 2) + 0.1 * math.sin(13 * w)

    res = solve_1d(f, init=init)
    assert res.value >= f(init)


def test_solve_1d_recovers_omega(circle_window):
    b, w, spec = circle_window
    vc = VolumeContrast(b.events, b.camera, w, spec)
    obj = OmegaObjective(vc, b.meta["v"], b.extrinsics)
    res = solve_1d(obj, (-1.0, 1.0))
    assert abs(res.omega - b.meta["omega"]) < 0.02


def test_solve_1d_scale_equivariance():
    v, omega, s = 0.5, 0.3, 2.0
    cam = synth.suite_camera()
    rng = np.random.default_rng(5)
    base = AckermannModel(AckermannParams(omega, v), Extrinsics.forward_facing())
    posts = synth.corridor_posts(rng, base.vehicle_arrays(np.linspace(0, 4, 50))[1][:, :2],
                                 base.vehicle_arrays(np.linspace(0, 4, 50))[0][:, :2, 1], 40, max_inner=1.0)
    segs = synth.post_frames(posts, rng)
    results = []
    for k in (1.0, s):
        scene = synth.SyntheticScene(segs * k, 25.0 / k)
        model = AckermannModel(AckermannParams(omega, v * k), Extrinsics.forward_facing())
        b = synth.generate_events(scene, model, cam, 0.3, seed=3, z_range=(0.5 * k, 10.0 * k))
        spec = GridSpec(346, 260, 32, 0.5 * k, 10.0 * k)
        w = VolumeWindow.from_stream(b.events, 0.15, 0.2)
        obj = OmegaObjective(VolumeContrast(b.events, cam, w, spec), v * k, model.extrinsics)
        results.append(solve_1d(obj, (-1.0, 1.0)).omega)
    assert abs(results[0] - results[1]) < 1e-4


# n-dimensional solver


def test_solve_nd_quadratic_with_pinned_coordinates():
    target = np.array([1.0, -2.0, 0.5])

    def f(th):
        return -float(np.sum((th - target) ** 2))

    free = np.array([True, False, True])
    res = solve_nd(f, np.zeros(3), free=free, max_iter=200, max_step=0.5, rel_tol=1e-14)
    assert res.theta[1] == 0.0
    assert np.allclose(res.theta[[0, 2]], target[[0, 2]], atol=1e-4)
    assert res.value >= res.initial_value
    assert res.history == sorted(res.history)


def test_solve_nd_projection_is_applied():
    def f(th):
        return -float(np.sum((th - 3.0) ** 2))

    res = solve_nd(f, np.array([0.0, 0.0]), max_iter=100, max_step=1.0, project=lambda th: np.minimum(th, 1.0))
    assert np.all(res.theta <= 1.0)
    assert np.allclose(res.theta, 1.0, atol=1e-6)


def test_solve_nd_non_finite():
    with pytest.raises(NumericalError):
        solve_nd(lambda th: math.inf, np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solve_nd_monotone(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=3)

    def f(th):
        return float(np.cos(th @ c) - 0.1 * th @ th)

    th0 = rng.normal(size=3)
    res = solve_nd(f, th0, max_iter=20)
    assert res.value >= f(th0)


def test_solve_nd_matches_2d_grid_search(long_bundle):
    """One control point free inside a box; ascent with box projection vs brute force."""
    b = long_bundle
    mv = MultiVolumeContrast(b.events, b.camera, MultiVolumeConfig(tau1=0.1, tau2=0.2, M=2), GridSpec(173, 130, 16))
    for v in mv.volumes:
        v.kernel = KernelSchedule.for_grid(v.grid, 1.0)
    obj = SplineContrast(mv, b.trajectory)
    theta = b.trajectory.spline.control_points.ravel().copy()
    j, cell, half = 2, 0.01, 6
    free = np.zeros(theta.size, dtype=bool)
    free[2 * j : 2 * j + 2] = True
    lo, hi = theta - half * cell, theta + half * cell

    res = solve_nd(obj, theta, gradient=lambda th: obj.gradient(th, 1e-4, free), free=free,
                   max_iter=60, max_step=0.02, rel_tol=1e-9, project=lambda th: np.clip(th, lo, hi))
    offs = np.arange(-half, half + 1) * cell
    vals = np.empty((offs.size, offs.size))
    for a, dx in enumerate(offs):
        for c, dy in enumerate(offs):
            th = theta.copy()
            th[2 * j] += dx
            th[2 * j + 1] += dy
            vals[a, c] = obj(th)
    a, c = np.unravel_index(np.argmax(vals), vals.shape)
    moved = res.theta[2 * j : 2 * j + 2] - theta[2 * j : 2 * j + 2]
    assert abs(moved[0] - offs[a]) <= cell and abs(moved[1] - offs[c]) <= cell
    assert res.value >= vals.max() - 1e-3 * abs(vals.max())


CONTRACTION = (
    "the summed variance keeps rising as the early path contracts, so ascent "
    "drifts millimetres away from the true spline on short sequences"
)


@pytest.fixture(scope="module")
def early_turns(long_bundle):
    b = long_bundle
    mv = MultiVolumeContrast(b.events, b.camera, MultiVolumeConfig(M=4), pipeline.sensor_grid(b.camera))

    def run(base, iterations):
        obj = TurnAngleContrast(mv, base)
        th0 = obj.angles(base.spline.control_points)
        free = np.array([bool(a) for a in obj._affected])
        free[0] = False
        res = solve_nd(obj, th0, gradient=lambda th: obj.gradient(th, 1e-4, free), free=free,
                       max_iter=iterations, max_step=0.05)
        return obj.control_points(res.theta)

    return run


@pytest.mark.xfail(reason=CONTRACTION, strict=False)
def test_ground_truth_start_barely_moves(long_bundle, early_turns):
    b = long_bundle
    cp = early_turns(b.trajectory, 6)
    moved = np.linalg.norm(cp - b.trajectory.spline.control_points, axis=1)
    print("control point motion [mm]:", np.round(1e3 * moved, 3))
    assert moved.max() < 1e-3


@pytest.mark.xfail(reason=CONTRACTION, strict=False)
def test_perturbed_start_does_not_get_worse(long_bundle, early_turns):
    b = long_bundle
    rng = np.random.default_rng(1)
    cp = b.trajectory.spline.control_points.copy()
    cp[1:] += rng.normal(0.0, 0.02, cp[1:].shape)
    start = b.trajectory.with_control_points(cp)
    refined = start.with_control_points(early_turns(start, 6))
    times = np.linspace(0.0, 1.0, 101)
    before = pipeline.position_rmse(start, b.trajectory, times)
    after = pipeline.position_rmse(refined, b.trajectory, times)
    print(f"RMSE before {before:.4f} m, after {after:.4f} m")
    assert after <= before
