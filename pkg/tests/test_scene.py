import math

import numpy as np
import pytest

from gradcheck import random_set, small_camera
from rdg.scene import (
    BehindCamera,
    Camera,
    GaussianPrimitive,
    GaussianSet,
    build_covariance,
    covariances,
    look_at,
    project_all,
    project_gaussian,
    quat_to_rotmat,
)

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _prim(position=(0.0, 0.0, 0.0), rotation=IDENTITY, log_scale=(0.0, 0.0, 0.0)):
    return GaussianPrimitive(np.array(position, float), np.array(rotation, float), np.array(log_scale, float), 0.0, np.full(3, 0.5))


def _axis_camera(f=50.0, size=21):
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, np.eye(3), np.zeros(3), size, size, near=0.1, far=100.0)


def test_covariance_examples():
    assert np.allclose(build_covariance(_prim()), np.eye(3))
    assert np.allclose(build_covariance(_prim(log_scale=(math.log(2), 0, 0))), np.diag([4.0, 1, 1]))
    qz = [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)]
    assert np.allclose(build_covariance(_prim(rotation=qz, log_scale=(math.log(2), 0, 0))), np.diag([1.0, 4, 1]))


def test_covariances_are_symmetric_psd_for_many_primitives():
    rng = np.random.default_rng(0)
    g = GaussianSet(rng.normal(size=(1000, 3)), rng.normal(size=(1000, 4)), rng.uniform(-4, 1, (1000, 3)), np.zeros(1000), np.zeros((1000, 3)))
    S = covariances(g)
    assert np.array_equal(S, np.transpose(S, (0, 2, 1))) or np.allclose(S, np.transpose(S, (0, 2, 1)), atol=1e-15)
    w, U = np.linalg.eigh(S)
    assert w.min() >= -1e-9
    rebuilt = U @ (w[:, :, None] * np.transpose(U, (0, 2, 1)))
    assert np.abs(rebuilt - S).max() <= 1e-6


def test_rotation_matrices_are_orthonormal():
    q = np.random.default_rng(1).normal(size=(50, 4))
    R = quat_to_rotmat(q)
    assert np.allclose(R @ np.transpose(R, (0, 2, 1)), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)


def test_isotropic_projection_on_axis():
    sigma, z, f = 0.3, 4.0, 50.0
    p = project_gaussian(_prim(position=(0, 0, z), log_scale=(math.log(sigma),) * 3), _axis_camera(f), cov_floor=0.0)
    assert np.allclose(p.cov2d, (f * sigma / z) ** 2 * np.eye(2))
    assert np.allclose(p.mean2d, [10.0, 10.0])
    assert p.view_depth == z


def test_behind_camera_raises():
    with pytest.raises(BehindCamera):
        project_gaussian(_prim(position=(0, 0, -1.0)), _axis_camera())
    with pytest.raises(BehindCamera):
        project_gaussian(_prim(position=(0, 0, 0.0)), _axis_camera())


@pytest.mark.parametrize("seed", range(10))
def test_cov2d_matches_numeric_jacobian(seed):
    rng = np.random.default_rng(seed)
    cam = small_camera(32)
    g = random_set(rng, 1)
    t, _, cov2d, _, V = project_all(g, cam, cov_floor=0.0)

    def proj(x):
        return np.array([cam.fx * x[0] / x[2] + cam.cx, cam.fy * x[1] / x[2] + cam.cy])

    h = 1e-4
    J = np.stack([(proj(t[0] + h * e) - proj(t[0] - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    ref = J @ V[0] @ J.T
    assert np.linalg.norm(cov2d[0] - ref) / np.linalg.norm(ref) <= 1e-3


def test_view_depth_is_view_space_z():
    rng = np.random.default_rng(2)
    cam = small_camera(16)
    g = random_set(rng, 20)
    t, _, _, _, _ = project_all(g, cam)
    assert np.array_equal(t[:, 2], cam.world_to_view(g.positions)[:, 2])


def test_rigid_translation_invariance():
    rng = np.random.default_rng(3)
    cam = small_camera(16)
    g = random_set(rng, 5)
    offset = np.array([1.5, -2.0, 0.7])
    moved = g.copy()
    moved.positions = moved.positions + offset
    a = project_all(g, cam)
    b = project_all(moved, cam.translated(offset))
    for x, y in zip(a, b):
        assert np.allclose(x, y, atol=1e-10)


def test_camera_validation_and_round_trip():
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4, near=0.0)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4, near=2.0, far=1.0)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 2 * np.eye(3), np.zeros(3), 4, 4)
    cam = look_at([1.0, 2.0, -3.0], [0, 0, 0], focal=20.0, height=8, width=10)
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.rotation, cam.rotation) and back.width == 10
    assert np.allclose(cam.center, [1.0, 2.0, -3.0])


def test_ray_hits_pixel_at_requested_depth():
    cam = look_at([0.5, -1.0, -4.0], [0, 0, 0], focal=30.0, height=20, width=20)
    o, d = cam.ray(3.0, 14.0)
    p = o + 2.5 * d
    assert np.allclose(cam.project_points(p)[0], [3.0, 14.0])
    assert cam.world_to_view(p[None])[0, 2] == pytest.approx(2.5)


def test_set_helpers():
    rng = np.random.default_rng(4)
    g = random_set(rng, 6)
    assert len(g.subset([0, 2])) == 2
    d = GaussianSet.from_dict(g.to_dict())
    assert np.array_equal(d.positions, g.positions)
    prims = [g[i] for i in range(len(g))]
    assert np.array_equal(GaussianSet.from_primitives(prims).colors, g.colors)
    assert len(GaussianSet.from_primitives([])) == 0
    assert np.all((g.opacities > 0) & (g.opacities < 1))
    g.normalize_rotations()
    assert np.allclose(np.linalg.norm(g.rotations, axis=1), 1.0, atol=1e-12)
