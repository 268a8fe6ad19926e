import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import random_set, small_camera
from rdg.densifier import (
    NEW_OPACITY,
    AdaptiveView,
    DensifyConfig,
    DensifyStats,
    ErrorPatchMap,
    merge,
    sample_along_rays,
    sample_depths,
    schedule_step,
    select_error_patches,
)
from rdg.scene import GaussianSet, exact_logit, sigmoid
from rdg.splatter import GradientSet

RESET_OPACITY = float(sigmoid(exact_logit(0.04)))


def test_sample_depths_examples():
    assert np.allclose(sample_depths(1, 3, 4), [1, 5 / 3, 7 / 3, 3])
    assert np.allclose(sample_depths(1, 3, 1), [2.0])
    with pytest.raises(ValueError):
        sample_depths(3, 1, 4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_selection_is_strictly_above_mean(seed):
    rng = np.random.default_rng(seed)
    losses = rng.uniform(0, 1, (4, 5))
    sel = select_error_patches(losses)
    expected = np.flatnonzero(losses.ravel() > losses.mean())
    assert sel.selected == expected.tolist()
    assert sel.threshold == pytest.approx(losses.mean())


def test_uniform_loss_selects_nothing_and_adds_nothing():
    sel = select_error_patches(np.full((4, 4), 0.3))
    assert sel.selected == []
    cam = small_camera(32)
    new = sample_along_rays(sel, cam, None, 8, np.zeros((32, 32, 3)))
    assert len(new) == 0


def test_samples_reproject_onto_patch_centres():
    cam = small_camera(32)
    rng = np.random.default_rng(0)
    losses = rng.uniform(0, 1, (4, 4))
    sel = select_error_patches(losses)
    image = rng.uniform(0, 1, (32, 32, 3))
    existing = random_set(rng, 10)
    new = sample_along_rays(sel, cam, (1.0, 5.0), 4, image, existing)
    assert len(new) == 4 * len(sel.selected)
    uv = cam.project_points(new.positions)
    depths = cam.world_to_view(new.positions)[:, 2]
    for n, pid in enumerate(sel.selected):
        r, c = sel.centre_pixel(pid)
        block = slice(4 * n, 4 * n + 4)
        assert np.abs(uv[block] - [c, r]).max() <= 0.5
        assert np.allclose(depths[block], sample_depths(1.0, 5.0, 4))
        assert np.allclose(new.colors[block], image[r, c])
    assert np.allclose(new.opacities, NEW_OPACITY)
    # isotropic scales
    assert np.allclose(new.log_scales, new.log_scales[:, :1])


def test_centre_pixel():
    m = ErrorPatchMap(np.zeros((2, 3)), 0.0, [], 8)
    assert m.centre_pixel(0) == (4, 4)
    assert m.centre_pixel(4) == (12, 12)


def test_merge_counts_order_and_tag():
    rng = np.random.default_rng(0)
    a, b = random_set(rng, 10), random_set(rng, 4)
    m = merge(a, b)
    assert len(m) == 14 and m.generation_tag == a.generation_tag + 1
    assert np.array_equal(m.positions[:10], a.positions)
    e = merge(a, GaussianSet.empty())
    assert len(e) == 10 and e.generation_tag == a.generation_tag + 1


def _stats(n, value):
    s = DensifyStats.zeros(n)
    g = GradientSet.zeros(n)
    g.screen_grad[:] = value
    g.visible[:] = True
    s.add(g)
    return s


@pytest.mark.parametrize("t", [1000, 3000])
def test_opacity_reset_is_exact(t):
    g = random_set(np.random.default_rng(1), 20)
    out = schedule_step(g, _stats(20, 0.0), t, DensifyConfig(adaptive_sampling=False)).gset
    # 0.04 is not in the float image of the sigmoid; the reset lands on the nearest value
    assert np.all(out.opacities == RESET_OPACITY)
    assert abs(RESET_OPACITY - 0.04) <= np.spacing(0.04)


def test_off_interval_steps_leave_the_set_alone():
    g = random_set(np.random.default_rng(2), 12)
    res = schedule_step(g, _stats(12, 1.0), 150, DensifyConfig())
    assert res.gset is g


def test_low_opacity_primitives_are_pruned():
    g = random_set(np.random.default_rng(3), 6)
    g.opacity_logits[2] = np.log(0.001 / 0.999)
    res = schedule_step(g, _stats(6, 0.0), 200, DensifyConfig(adaptive_sampling=False))
    assert len(res.gset) == 5 and res.report.pruned == 1
    assert 2 not in res.origin


def test_clone_and_split_bookkeeping():
    rng = np.random.default_rng(4)
    g = random_set(rng, 10)
    g.log_scales[:5] = np.log(0.001)  # small: cloned
    g.log_scales[5:] = np.log(0.5)  # large: split
    res = schedule_step(g, _stats(10, 1.0), 200, DensifyConfig(adaptive_sampling=False), extent=1.0, rng=rng)
    r = res.report
    assert (r.cloned, r.split) == (5, 5)
    assert len(res.gset) == 10 + 5 + 5
    assert len(res.origin) == len(res.gset)
    # children are smaller than their parent
    kids = res.origin >= 5
    assert np.all(res.gset.log_scales[kids] < np.log(0.5))


def test_adaptive_sampling_adds_k_per_selected_patch():
    rng = np.random.default_rng(5)
    g = random_set(rng, 8)
    cam = small_camera(32)
    losses = np.zeros((4, 4))
    losses[1, 2] = losses[3, 0] = 1.0
    view = AdaptiveView(cam, rng.uniform(0, 1, (32, 32, 3)), losses)
    cfg = DensifyConfig(k_samples=8)
    res = schedule_step(g, _stats(8, 0.0), 1000, cfg, views=[view])
    assert res.report.sampled == 16 and res.report.selected_patches == 2
    assert np.sum(res.origin == -1) == 16
    # the same step is also an opacity reset
    assert np.all(res.gset.opacities == RESET_OPACITY)
    early = schedule_step(g, _stats(8, 0.0), 900, cfg, views=[view])
    assert early.report.sampled == 0


def test_negative_step_is_rejected():
    with pytest.raises(ValueError):
        schedule_step(GaussianSet.empty(), DensifyStats.zeros(0), -1, DensifyConfig())
