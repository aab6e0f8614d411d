import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vwe.core import PoseSample, RigidTransform, orthonormality_error
from vwe.errors import DegenerateHeadingError, DomainError, FitError
from vwe.trajectory import (
    SERIES_SWITCH,
    AckermannModel,
    AckermannParams,
    Extrinsics,
    PiecewiseAckermannModel,
    PlanarSpline,
    SampledTrajectory,
    SplineModel,
    ackermann_arrays,
    ackermann_relative_pose,
    camera_pose,
    fit_residuals,
    fit_spline,
    heading_rotations,
    spline_pose,
    spline_position,
    spline_velocity,
)


def clamped_knots(p, n, a=0.0, b=1.0, interior=None):
    inner = np.linspace(a, b, n - p + 2)[1:-1] if interior is None else interior
    return np.concatenate([np.full(p + 1, a), inner, np.full(p + 1, b)])


def random_spline(rng, p=3, n=8, duration=4.0):
    inner = np.sort(rng.uniform(0.0, duration, n - p))
    cp = np.cumsum(rng.normal(0.0, 0.3, size=(n + 1, 2)) + [0.0, 0.5], axis=0)
    return PlanarSpline(p, clamped_knots(p, n, 0.0, duration, inner), cp)


def kasa_circle(xy):
    """Algebraic least-squares circle fit: centre and radius."""
    a = np.column_stack([2 * xy[:, 0], 2 * xy[:, 1], np.ones(len(xy))])
    b = np.sum(xy**2, axis=1)
    cx, cy, c = np.linalg.lstsq(a, b, rcond=None)[0]
    return np.array([cx, cy]), float(np.sqrt(c + cx * cx + cy * cy))


# Ackermann arcs


def test_straight_limit():
    pose = ackermann_relative_pose(AckermannParams(0.0, 1.0), 2.0)
    assert np.allclose(pose.rotation, np.eye(3), atol=0)
    assert np.allclose(pose.translation, [0.0, 2.0, 0.0], atol=1e-15)


def test_quarter_circle():
    pose = ackermann_relative_pose(AckermannParams(np.pi / 2, np.pi / 2), 1.0)
    assert np.allclose(pose.translation, [1.0, 1.0, 0.0], atol=1e-12)
    assert abs(abs(pose.yaw_angle()) - np.pi / 2) < 1e-12
    # heading stays tangential: the vehicle's +y axis points along +x after the quarter turn
    assert np.allclose(pose.rotation[:, 1], [1.0, 0.0, 0.0], atol=1e-12)


def test_identity_at_reference_time():
    for omega in (-2.0, 0.0, 0.3):
        pose = ackermann_relative_pose(AckermannParams(omega, 0.7, 1.5), 1.5)
        assert np.allclose(pose.matrix(), np.eye(4), atol=0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(0.05, 3), st.floats(-3, 3))
def test_constant_velocity_composition(omega, v, dt):
    r1, t1 = ackermann_arrays(omega, v, dt / 2)
    r, t = ackermann_arrays(omega, v, dt)
    half = RigidTransform(r1, t1)
    full = half @ half
    assert np.allclose(full.rotation, r, atol=1e-10)
    assert np.allclose(full.translation, t, atol=1e-10)


def test_series_branch_is_continuous():
    v = 1.3
    for dt in (1.0, 0.25):
        omega = SERIES_SWITCH / dt
        _, below = ackermann_arrays(omega * (1 - 1e-9), v, dt)
        _, above = ackermann_arrays(omega * (1 + 1e-9), v, dt)
        assert np.abs(below - above).max() < 1e-9


def test_arc_tangent_matches_heading():
    r, t = ackermann_arrays(0.8, 0.5, np.linspace(-2, 2, 41))
    h = 1e-6
    _, tp = ackermann_arrays(0.8, 0.5, np.linspace(-2, 2, 41) + h)
    _, tm = ackermann_arrays(0.8, 0.5, np.linspace(-2, 2, 41) - h)
    tangent = (tp - tm) / (2 * h)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    assert np.allclose(tangent, r[:, :, 1], atol=1e-8)


def test_params_validation():
    with pytest.raises(DomainError):
        AckermannParams(0.1, 0.0)
    with pytest.raises(DomainError):
        AckermannParams(np.inf, 1.0)


def test_identity_extrinsics_camera_equals_vehicle():
    m = AckermannModel(AckermannParams(0.3, 0.5))
    for t in (-1.0, 0.0, 2.0):
        a, b = m.camera_pose(t), m.vehicle_pose(t)
        assert np.allclose(a.matrix(), b.matrix(), atol=0)


def test_forward_offset_on_straight_path_is_parallel():
    m = AckermannModel(AckermannParams(0.0, 0.5), Extrinsics(t_vc=[0.0, 0.1, 0.0]))
    for t in np.linspace(0, 3, 7):
        c = camera_pose(m, t).translation
        assert np.allclose(c - m.vehicle_pose(t).translation, [0.0, 0.1, 0.0], atol=1e-15)


@pytest.mark.parametrize("offset, expected", [((0.0, 0.3, 0.0), "forward"), ((0.3, 0.0, 0.0), "lateral")])
def test_camera_circle_radius(offset, expected):
    v, omega = 0.5, 0.25
    r = v / omega
    m = AckermannModel(AckermannParams(omega, v), Extrinsics(t_vc=offset))
    times = np.linspace(0, 2 * np.pi / omega, 10_000, endpoint=False)
    pc = m.camera_arrays(times)[1]
    centre, radius = kasa_circle(pc[:, :2])
    pv = m.vehicle_arrays(times)[1]
    vc, vr = kasa_circle(pv[:, :2])
    assert np.allclose(centre, vc, atol=1e-9)
    assert vr == pytest.approx(r, abs=1e-9)
    d = 0.3
    # the centre of rotation lies on the +x side of the vehicle for omega > 0
    target = np.hypot(r, d) if expected == "forward" else r - d
    assert radius == pytest.approx(target, abs=1e-9)


def test_piecewise_model_continuity_and_length():
    b = np.linspace(0.0, 3.0, 16)
    w = np.random.default_rng(3).uniform(-0.5, 0.5, 15)
    m = PiecewiseAckermannModel(b, w, 0.4)
    eps = 1e-12
    before = m.vehicle_arrays(b[1:-1] - eps)[1]
    after = m.vehicle_arrays(b[1:-1] + eps)[1]
    assert np.abs(before - after).max() < 1e-10
    t = np.linspace(0.0, 3.0, 30001)
    p = m.vehicle_arrays(t)[1]
    polyline = np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1))
    assert polyline == pytest.approx(m.path_length(), rel=1e-7)
    assert m.path_length() == pytest.approx(0.4 * 3.0, abs=1e-12)


def test_piecewise_model_validation():
    with pytest.raises(DomainError):
        PiecewiseAckermannModel(np.array([0.0, 1.0]), np.array([0.1, 0.2]), 1.0)
    with pytest.raises(DomainError):
        PiecewiseAckermannModel(np.array([0.0, 0.0, 1.0]), np.array([0.1, 0.2]), 1.0)


# splines


def test_degree_one_midpoint():
    s = PlanarSpline(1, [0, 0, 1, 1], [[0, 0], [1, 0]])
    assert np.allclose(spline_position(s, 0.5), [[0.5, 0.0]])


def test_constant_control_points_give_constant_curve(rng):
    s = PlanarSpline(3, clamped_knots(3, 6), np.tile([2.5, -1.0], (7, 1)))
    assert np.allclose(s.position(rng.uniform(0, 1, 50)), [2.5, -1.0], atol=1e-14)


def test_velocity_matches_finite_difference(rng):
    s = random_spline(rng)
    h = 1e-6
    t = rng.uniform(h, 4.0 - h, 100)
    fd = (s.position(t + h) - s.position(t - h)) / (2 * h)
    v = spline_velocity(s, t)
    assert np.all(np.linalg.norm(v - fd, axis=1) / np.linalg.norm(v, axis=1) < 1e-5)


def test_basis_partition_of_unity(rng):
    s = random_spline(rng, p=3, n=11)
    m = s.basis_matrix(rng.uniform(0, 4, 1000))
    assert np.all(m >= 0)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-14)


def test_spline_outside_domain_raises():
    s = PlanarSpline(2, clamped_knots(2, 3), np.zeros((4, 2)))
    with pytest.raises(DomainError):
        s.position([1.5])
    with pytest.raises(DomainError):
        s.velocity([-0.1])


def test_spline_validation():
    with pytest.raises(DomainError):
        PlanarSpline(3, clamped_knots(3, 5)[:-1], np.zeros((6, 2)))
    with pytest.raises(DomainError):
        PlanarSpline(3, [0, 0, 0, 0, 1, 1, 1], np.zeros((3, 2)))
    with pytest.raises(DomainError):
        PlanarSpline(2, [0, 0, 0.5, 0, 1, 1, 1], np.zeros((4, 2)))


def test_arc_length_of_known_curves():
    line = PlanarSpline(3, clamped_knots(3, 5), np.column_stack([np.zeros(6), np.linspace(0, 5, 6)]))
    assert line.arc_length() == pytest.approx(5.0, abs=1e-12)
    poly = PlanarSpline(1, [0, 0, 1, 2, 2], [[0, 0], [3, 0], [3, 3]])
    assert poly.arc_length() == pytest.approx(6.0, abs=1e-12)


def test_heading_examples():
    assert np.allclose(heading_rotations([[0.0, 2.0]])[0], np.eye(3), atol=0)
    expected = RigidTransform.yaw(-np.pi / 2).rotation
    assert np.allclose(heading_rotations([[3.0, 0.0]])[0], expected, atol=1e-15)


def test_spline_pose_orthonormality_sweep(rng):
    s = random_spline(rng, n=12)
    for t in rng.uniform(0, 4, 1000):
        r = spline_pose(s, t).rotation
        assert orthonormality_error(r) < 1e-10
        assert abs(np.linalg.det(r) - 1.0) < 1e-10
        assert np.allclose(r[:, 2], [0, 0, 1], atol=0)


def test_degenerate_heading():
    s = PlanarSpline(2, clamped_knots(2, 2), np.zeros((3, 2)))
    with pytest.raises(DegenerateHeadingError):
        spline_pose(s, 0.5)


def test_orientation_ignores_speed(rng):
    s = random_spline(rng)
    fast = PlanarSpline(s.degree, s.knots / 2.0, s.control_points)
    t = rng.uniform(0, 4, 200)
    ra = SplineModel(s).vehicle_arrays(t)[0]
    rb = SplineModel(fast).vehicle_arrays(t / 2.0)[0]
    assert np.abs(ra - rb).max() < 1e-10


def test_derivative_spline_is_exact(rng):
    s = random_spline(rng, p=4, n=9)
    d = s.derivative()
    assert d.degree == 3
    t = rng.uniform(0, 4, 50)
    assert np.allclose(d.position(t), s.velocity(t), atol=0)


# spline fitting


def samples_from(points, times):
    out = []
    for t, (x, y) in zip(times, points):
        out.append(PoseSample(float(t), RigidTransform(np.eye(3), [x, y, 0.0])))
    return out


def test_fit_reproduces_a_line():
    t = np.linspace(0, 2, 40)
    smp = samples_from(np.column_stack([0.3 * t - 1, 0.5 * t]), t)
    s = fit_spline(smp, 3, 6)
    assert s.fit_rms < 1e-10


def test_fit_circle_radius_two():
    t = np.linspace(0, 4, 50)
    a = t / 4 * 1.5 * np.pi
    smp = samples_from(np.column_stack([2 * np.cos(a), 2 * np.sin(a)]), t)
    s = fit_spline(smp, 3, 10)
    assert fit_residuals(s, smp).max() < 0.01
    assert s.n == 10


@pytest.mark.parametrize("param", ["time", "chord"])
def test_fit_interpolates_when_square(param, rng):
    t = np.sort(rng.uniform(0, 3, 12))
    smp = samples_from(rng.normal(size=(12, 2)), t)
    s = fit_spline(smp, 3, 11, parametrization=param)
    assert s.fit_rms < 1e-9


def test_fit_residual_non_increasing_in_control_count():
    t = np.linspace(0, 6, 121)
    pts = np.column_stack([np.sin(t) + 0.2 * t, np.cos(0.7 * t) * t])
    smp = samples_from(pts, t)
    rms = [fit_spline(smp, 3, n).fit_rms for n in range(3, 60)]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(rms, rms[1:]))


def test_fit_pin_heading_starts_on_pose():
    t = np.linspace(0, 2, 60)
    pose0 = RigidTransform.yaw(0.4)
    pts = np.column_stack([np.sin(0.5 * t), t])
    smp = [PoseSample(0.0, RigidTransform(pose0.rotation, [0, 0, 0]))] + samples_from(pts[1:], t[1:])
    s = fit_spline(smp, 3, 8, pin_heading=True)
    assert np.allclose(s.control_points[0], [0, 0])
    d = s.control_points[1] - s.control_points[0]
    h = pose0.rotation[:2, 1]
    assert abs(d[0] * h[1] - d[1] * h[0]) / np.linalg.norm(d) < 1e-12


def test_fit_errors():
    t = np.linspace(0, 1, 5)
    smp = samples_from(np.column_stack([t, t]), t)
    with pytest.raises(FitError):
        fit_spline(smp, 3, 2)
    with pytest.raises(FitError):
        fit_spline(smp, 3, 5)


# sampled trajectories


def test_sampled_trajectory_reproduces_samples(rng):
    m = AckermannModel(AckermannParams(0.4, 0.6))
    t = np.linspace(0, 2, 21)
    st_ = SampledTrajectory.from_samples(m.sample(t))
    r, p = st_.vehicle_arrays(t)
    r0, p0 = m.vehicle_arrays(t)
    assert np.allclose(r, r0, atol=1e-12) and np.allclose(p, p0, atol=1e-12)
    with pytest.raises(DomainError):
        SampledTrajectory.from_samples(m.sample([0.0]))
