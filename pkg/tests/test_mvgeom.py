import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_camera, random_lines, ring_rig
from mvconsensus.autodiff import check_grad
from mvconsensus.camera import CameraRig, Line3, look_at
from mvconsensus.errors import DegenerateConfiguration
from mvconsensus.mvgeom import nearest_point_bruteforce, nearest_point_to_lines, rig_focus_point

BOUNDS = ((-4.0, -4.0, -4.0), (4.0, 4.0, 4.0))


def L(o, n):
    return Line3.from_points(o, n)


def test_common_intersection():
    p = (1.0, 2.0, 3.0)
    res = nearest_point_to_lines([L(p, (1, 0, 0)), L(p, (0, 1, 0)), L(p, (0, 0, 1))])
    np.testing.assert_allclose(res.point.numpy(), p, atol=1e-9)
    assert float(res.residual) < 1e-9


def test_skew_pair_example():
    lines = [L((0, 0, 0), (1, 0, 0)), L((0, 1, 2), (0, 0, 1))]
    res = nearest_point_to_lines(lines)
    np.testing.assert_allclose(res.point.numpy(), [0.0, 0.5, 0.0], atol=1e-8)
    np.testing.assert_allclose(float(res.residual), 0.5, atol=1e-8)
    brute = nearest_point_bruteforce(lines, BOUNDS, 0.25)
    np.testing.assert_allclose(brute, [0.0, 0.5, 0.0], atol=1e-4)


def test_bruteforce_finds_intersection():
    p = (0.3, -1.1, 0.7)
    lines = [L(p, (1, 1, 0)), L(p, (0, 1, -1)), L(p, (1, 0, 2))]
    np.testing.assert_allclose(nearest_point_bruteforce(lines, BOUNDS, 0.25), p, atol=1e-4)


def test_parallel_lines_degenerate():
    with pytest.raises(DegenerateConfiguration):
        nearest_point_to_lines([L((0, 0, 0), (1, 0, 0)), L((0, 1, 0), (1, 0, 0))])
    with pytest.raises(DegenerateConfiguration):
        nearest_point_to_lines([L((0, 0, 0), (1, 0, 0))])


def test_bruteforce_rejects_bad_step():
    with pytest.raises(ValueError):
        nearest_point_bruteforce([L((0, 0, 0), (1, 0, 0))] * 2, BOUNDS, 0.0)


def test_random_instances_match_bruteforce():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        lines = random_lines(rng, int(rng.integers(2, 7)))
        try:
            res = nearest_point_to_lines(lines)
        except DegenerateConfiguration:
            continue
        if np.abs(res.point.numpy()).max() > 3.5:
            continue
        worst = max(worst, float(np.abs(nearest_point_bruteforce(lines, BOUNDS, 0.25) - res.point.numpy()).max()))
    assert worst < 1e-3


def test_residual_nonnegative(rng):
    for _ in range(50):
        assert float(nearest_point_to_lines(random_lines(rng, 4)).residual) >= 0.0


def test_focus_point_ring():
    np.testing.assert_allclose(rig_focus_point(ring_rig(4, 10.0)).numpy(), 0.0, atol=1e-6)


def test_focus_point_skew_axes():
    a = look_at((5.0, 0.0, 0.0), (0.0, 0.0, 0.5), 100.0, 64, 64)
    b = look_at((0.0, 6.0, 1.0), (0.5, 0.0, -0.5), 100.0, 64, 64)
    rig = CameraRig((a, b))
    from mvconsensus.camera import optical_axis
    brute = nearest_point_bruteforce([optical_axis(c) for c in rig], BOUNDS, 0.25)
    np.testing.assert_allclose(rig_focus_point(rig).numpy(), brute, atol=1e-4)


def test_focus_point_parallel_axes():
    a = look_at((0.0, 0.0, 0.0), (0.0, 5.0, 0.0), 100.0, 64, 64)
    b = look_at((1.0, 0.0, 0.0), (1.0, 5.0, 0.0), 100.0, 64, 64)
    with pytest.raises(DegenerateConfiguration):
        rig_focus_point(CameraRig((a, b)))


vec = st.lists(st.floats(-3, 3), min_size=3, max_size=3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), shift=vec)
def test_translation_equivariance(seed, shift):
    rng = np.random.default_rng(seed)
    lines = random_lines(rng, 3)
    t = torch.tensor(shift)
    moved = [Line3(line.origin + t, line.dir) for line in lines]
    try:
        a = nearest_point_to_lines(lines).point
    except DegenerateConfiguration:
        return
    b = nearest_point_to_lines(moved).point
    np.testing.assert_allclose((b - a).numpy(), shift, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_rotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    lines = random_lines(rng, 3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    R = torch.tensor(q)
    rotated = [Line3(R @ line.origin, R @ line.dir) for line in lines]
    try:
        a = nearest_point_to_lines(lines)
    except DegenerateConfiguration:
        return
    if a.condition > 1e6:
        return
    b = nearest_point_to_lines(rotated).point
    np.testing.assert_allclose(b.numpy(), (R @ a.point).numpy(), atol=1e-8)


def _solve_from_flat(x, dirs, coord):
    lines = [Line3(x[3 * i: 3 * i + 3], d) for i, d in enumerate(dirs)]
    return nearest_point_to_lines(lines).point[coord]


def test_gradient_wrt_origins(rng):
    for trial in range(10):
        lines = random_lines(rng, 3)
        if nearest_point_to_lines(lines).condition > 1e4:
            continue
        x0 = np.concatenate([line.origin.numpy() for line in lines])
        dirs = [line.dir for line in lines]
        for coord in range(3):
            rep = check_grad(lambda x: _solve_from_flat(x, dirs, coord), x0, h=1e-5, tol=1e-4, engine="torch")
            assert rep.ok, rep


def test_gradient_wrt_directions(rng):
    lines = random_lines(rng, 4)
    origins = [line.origin for line in lines]

    def f(x):
        ls = [Line3(o, x[3 * i: 3 * i + 3] / torch.linalg.norm(x[3 * i: 3 * i + 3])) for i, o in enumerate(origins)]
        return nearest_point_to_lines(ls).point.sum()

    x0 = np.concatenate([line.dir.numpy() for line in lines])
    assert check_grad(f, x0, h=1e-5, tol=1e-4, engine="torch").ok


def test_random_camera_rays_meet_at_point(rng):
    X = np.array([0.2, -0.1, 0.3])
    from mvconsensus.camera import project, ray_through_pixel
    cams = [random_camera(rng) for _ in range(3)]
    lines = [ray_through_pixel(c, *project(c, X)) for c in cams]
    np.testing.assert_allclose(nearest_point_to_lines(lines).point.numpy(), X, atol=1e-6)
