import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posecascade.errors import (
    DegenerateBoxError,
    InvalidArgumentError,
    MissingTorsoError,
)
from posecascade.geometry import (
    CROP_FILL,
    BoundingBox,
    PoseTree,
    crop_resample,
    denormalize_point,
    full_image_box,
    joint_box,
    normalize_point,
    pose_diameter,
)

from conftest import make_pose

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
positive = st.floats(min_value=1e-3, max_value=1e6, allow_nan=False)


# --- normalization -----------------------------------------------------------


def test_normalize_center_is_origin(square_box):
    assert np.allclose(normalize_point((110, 110), square_box), (0, 0))


def test_normalize_hand_values(square_box):
    assert np.allclose(normalize_point((165, 165), square_box), (0.25, 0.25))
    assert np.allclose(normalize_point((0, 0), square_box), (-0.5, -0.5))


def test_denormalize_hand_values(square_box):
    assert np.allclose(denormalize_point((0, 0), square_box), (110, 110))
    assert np.allclose(denormalize_point((0.25, 0.25), square_box), (165, 165))
    assert np.allclose(denormalize_point((-0.5, -0.5), square_box), (0, 0))


def test_normalize_rejects_non_finite(square_box):
    with pytest.raises(InvalidArgumentError):
        normalize_point((np.nan, 0), square_box)
    with pytest.raises(InvalidArgumentError):
        denormalize_point((np.inf, 0), square_box)


@given(x=finite, y=finite, cx=finite, cy=finite, w=positive, h=positive)
@settings(max_examples=200, deadline=None)
def test_round_trip(x, y, cx, cy, w, h):
    b = BoundingBox(np.array([cx, cy]), w, h)
    back = denormalize_point(normalize_point((x, y), b), b)
    assert abs(back[0] - x) < 1e-9 and abs(back[1] - y) < 1e-9


# pixel-scale ranges: fp cancellation dominates the 1e-12 bound outside them
pixel = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
pixel_size = st.floats(min_value=1.0, max_value=1e3, allow_nan=False)


@given(x=pixel, y=pixel, tx=pixel, ty=pixel, w=pixel_size, h=pixel_size)
@settings(max_examples=200, deadline=None)
def test_translation_equivariance(x, y, tx, ty, w, h):
    b = BoundingBox(np.array([1.0, 2.0]), w, h)
    v0 = normalize_point((x, y), b)
    v1 = normalize_point((x + tx, y + ty), b.shifted((tx, ty)))
    assert np.all(np.abs(v1 - v0) < 1e-12)


def test_box_validation():
    with pytest.raises(DegenerateBoxError):
        BoundingBox(np.zeros(2), 0.0, 5.0)
    with pytest.raises(DegenerateBoxError):
        BoundingBox(np.zeros(2), 5.0, -1.0)
    with pytest.raises(InvalidArgumentError):
        BoundingBox(np.array([np.nan, 0.0]), 5.0, 5.0)


# --- pose tree and diameter --------------------------------------------------


def test_tree_rejects_cycles():
    with pytest.raises(InvalidArgumentError):
        PoseTree(3, limbs=[(0, 1), (1, 2), (2, 0)], torso_pairs=[])


def test_tree_rejects_overlapping_swaps():
    with pytest.raises(InvalidArgumentError):
        PoseTree(4, limbs=[], torso_pairs=[], left_right_swap=[(0, 1), (1, 2)])


def test_tree_rejects_out_of_range():
    with pytest.raises(InvalidArgumentError):
        PoseTree(2, limbs=[(0, 5)], torso_pairs=[])


def test_diameter_single_pair(tiny_tree):
    pose = make_pose([(0, 0), (5, 5), (7, 7), (30, 40)])
    assert pose_diameter(pose, tiny_tree) == pytest.approx(50.0)


def test_diameter_coincident_pair_is_zero(tiny_tree):
    pose = make_pose([(3, 4), (5, 5), (7, 7), (3, 4)])
    assert pose_diameter(pose, tiny_tree) == 0.0


def test_diameter_mean_of_pairs():
    tree = PoseTree(4, limbs=[], torso_pairs=[(0, 1), (2, 3)])
    pose = make_pose([(0, 0), (40, 0), (0, 0), (0, 60)])
    assert pose_diameter(pose, tree) == pytest.approx(50.0)


def test_diameter_skips_partially_masked_pairs():
    tree = PoseTree(4, limbs=[], torso_pairs=[(0, 1), (2, 3)])
    pose = make_pose([(0, 0), (40, 0), (0, 0), (0, 60)], mask=[True, False, True, True])
    assert pose_diameter(pose, tree) == pytest.approx(60.0)


def test_diameter_missing_torso(tiny_tree):
    pose = make_pose([(0, 0), (1, 1), (2, 2), (3, 3)], mask=[True, True, True, False])
    with pytest.raises(MissingTorsoError):
        pose_diameter(pose, tiny_tree)


def test_diameter_translation_invariant(tiny_tree):
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 100, size=(4, 2))
    pose = make_pose(pts)
    d0 = pose_diameter(pose, tiny_tree)
    shifted = make_pose(pts + np.array([17.0, -4.5]))
    assert pose_diameter(shifted, tiny_tree) == pytest.approx(d0, abs=1e-9)


# --- joint boxes ---------------------------------------------------------------


def test_joint_box_flic_scale(tiny_tree):
    pose = make_pose([(50, 60), (5, 5), (7, 7), (80, 100)])
    diam = pose_diameter(pose, tiny_tree)
    b = joint_box(pose, 0, 1.0, tiny_tree)
    assert np.allclose(b.center, (50, 60))
    assert b.width == b.height == pytest.approx(diam)


def test_joint_box_lsp_scale_doubles(tiny_tree):
    pose = make_pose([(50, 60), (5, 5), (7, 7), (80, 100)])
    b1 = joint_box(pose, 0, 1.0, tiny_tree)
    b2 = joint_box(pose, 0, 2.0, tiny_tree)
    assert b2.width == 2.0 * b1.width
    assert b2.height == 2.0 * b1.height


def test_joint_box_rejects_zero_sigma(tiny_tree):
    pose = make_pose([(50, 60), (5, 5), (7, 7), (80, 100)])
    with pytest.raises(DegenerateBoxError):
        joint_box(pose, 0, 0.0, tiny_tree)


def test_joint_box_rejects_zero_diameter(tiny_tree):
    pose = make_pose([(50, 60), (5, 5), (7, 7), (50, 60)])
    # torso pair (0, 3) coincident
    with pytest.raises(DegenerateBoxError):
        joint_box(pose, 1, 1.0, tiny_tree)


def test_joint_box_requires_present_joint(tiny_tree):
    pose = make_pose([(50, 60), (5, 5), (7, 7), (80, 100)], mask=[False, True, True, True])
    with pytest.raises(InvalidArgumentError):
        joint_box(pose, 0, 1.0, tiny_tree)


# --- crop / resample -----------------------------------------------------------


def test_crop_identity():
    rng = np.random.default_rng(1)
    img = rng.random((12, 10, 1))
    out = crop_resample(img, full_image_box(10, 12), (10, 12))
    assert np.array_equal(out, img)


def test_crop_checkerboard_mean():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])[:, :, None]
    out = crop_resample(img, full_image_box(2, 2), (1, 1))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx(0.5)


def test_crop_fully_outside_is_fill():
    img = np.zeros((4, 4, 1))
    b = BoundingBox(np.array([100.0, 100.0]), 8.0, 8.0)
    out = crop_resample(img, b, (3, 3))
    assert np.all(out == CROP_FILL)


def test_crop_rejects_bad_out_size():
    img = np.zeros((4, 4, 1))
    with pytest.raises(InvalidArgumentError):
        crop_resample(img, full_image_box(4, 4), (0, 3))


def _naive_crop(img, b, out_size):
    """Independent per-pixel bilinear resampler (plain loops)."""
    h, w, ch = img.shape
    ow, oh = out_size
    out = np.empty((oh, ow, ch))
    for r in range(oh):
        for q in range(ow):
            sx = (b.center[0] - b.width / 2) + (q + 0.5) * (b.width / ow) - 0.5
            sy = (b.center[1] - b.height / 2) + (r + 0.5) * (b.height / oh) - 0.5
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            fx, fy = sx - x0, sy - y0
            acc = np.zeros(ch)
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        val = img[yy, xx]
                    else:
                        val = CROP_FILL
                    acc = acc + wy * wx * val
            out[r, q] = acc
    return out


def test_crop_matches_naive_oracle():
    rng = np.random.default_rng(7)
    img = rng.random((9, 11, 3))
    for _ in range(8):
        b = BoundingBox(rng.uniform(-3, 13, size=2), rng.uniform(0.5, 15), rng.uniform(0.5, 15))
        out_size = (int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        got = crop_resample(img, b, out_size)
        want = _naive_crop(img, b, out_size)
        assert np.allclose(got, want, atol=1e-12)
