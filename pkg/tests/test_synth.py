import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rdg.splatter import render
from rdg.synth import MIN_DEPTH, CorruptionModel, SceneSpec, affine_align, aligned_rmse, corrupt_depth, make_scene


def test_single_primitive_depth_is_camera_distance():
    scene = make_scene(SceneSpec(n_gaussians=1, n_train=1, n_eval=0, resolution=33))
    d = scene.gt_depths[0]
    assert d[16, 16] == pytest.approx(scene.spec.camera_distance, abs=1e-12)


def test_same_seed_gives_identical_scene():
    spec = SceneSpec(n_gaussians=40, resolution=24, seed=7)
    a, b = make_scene(spec), make_scene(spec)
    assert np.array_equal(a.gt_set.positions, b.gt_set.positions)
    for x, y in zip(a.gt_images + a.gt_depths, b.gt_images + b.gt_depths):
        assert np.array_equal(x, y)
    c = make_scene(SceneSpec(n_gaussians=40, resolution=24, seed=8))
    assert not np.array_equal(a.gt_set.positions, c.gt_set.positions)


@pytest.mark.parametrize("layout", ["clustered", "uniform"])
def test_counts_and_buffers(layout):
    scene = make_scene({"n_gaussians": 30, "layout": layout, "n_train": 3, "n_eval": 1, "resolution": 16, "seed": 1})
    assert len(scene.gt_set) == 30
    assert len(scene.train_cameras) == 3 and len(scene.eval_cameras) == 1
    assert len(scene.gt_images) == 4 and len(scene.gt_depths) == 4
    assert np.all(np.abs(scene.gt_set.positions) <= 2.5)
    assert scene.scene_extent > 0


def test_buffers_rerender_bit_exactly():
    scene = make_scene(SceneSpec(n_gaussians=30, resolution=16, seed=3))
    for cam, img, depth in scene.train_views() + scene.eval_views():
        out = render(scene.gt_set, cam)
        assert np.array_equal(out.image, img) and np.array_equal(out.depth, depth)


def test_clustered_scene_covers_every_pixel():
    scene = make_scene(SceneSpec(resolution=32))
    for d in scene.gt_depths:
        assert d.min() > 0


@pytest.mark.parametrize("bad", [dict(n_gaussians=0), dict(n_train=0), dict(layout="grid"), dict(n_eval=-1)])
def test_bad_specs_are_rejected(bad):
    with pytest.raises(ValueError):
        SceneSpec(**bad)


def _depth(seed):
    return np.random.default_rng(seed).uniform(1.0, 4.0, (20, 24))


def test_identity_corruption():
    d = _depth(0)
    assert np.array_equal(corrupt_depth(d, CorruptionModel()), d)


def test_affine_corruption_is_pointwise():
    d = _depth(1)
    assert np.allclose(corrupt_depth(d, CorruptionModel(scale=2.0, shift=1.0)), 2 * d + 1, rtol=0, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 5.0), shift=st.floats(-0.5, 3.0))
def test_affine_corruption_keeps_full_correlation(seed, scale, shift):
    d = _depth(seed)
    assume(scale * d.min() + shift > MIN_DEPTH)
    dc = corrupt_depth(d, CorruptionModel(scale=scale, shift=shift))
    assert np.corrcoef(d.ravel(), dc.ravel())[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert aligned_rmse(dc, d) < 1e-9


def test_corruption_clamps_to_positive_depth():
    d = _depth(3)
    dc = corrupt_depth(d, CorruptionModel(scale=0.25, shift=-0.5))
    assert dc.min() == MIN_DEPTH
    assert np.array_equal(dc, np.maximum(0.25 * d - 0.5, MIN_DEPTH))


def test_noise_uses_only_the_declared_seed():
    d = _depth(2)
    m = CorruptionModel(noise_sigma=0.1, seed=5)
    assert np.array_equal(corrupt_depth(d, m), corrupt_depth(d, m))
    assert not np.array_equal(corrupt_depth(d, m), corrupt_depth(d, CorruptionModel(noise_sigma=0.1, seed=6)))


def test_corruption_stays_positive_and_validates():
    d = _depth(3)
    assert corrupt_depth(d, CorruptionModel(shift=-10.0)).min() > 0
    with pytest.raises(ValueError):
        CorruptionModel(blur_sigma=-1.0)


def test_affine_align_recovers_scale_and_shift():
    d = _depth(4)
    assert np.allclose(affine_align(0.3 * d - 2.0, d), d)
