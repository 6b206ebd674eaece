import math

import numpy as np
import numpy.testing as npt
import pytest

from eacnet import gradcheck, geometry, layers
from eacnet import tensor as T


def centers_for(face_landmarks):
    return geometry.au_centers(face_landmarks)


# ---------------------------------------------------------------------------
# enhancing layer
# ---------------------------------------------------------------------------

def test_enhance_zero_attention_is_identity(rng, face_landmarks):
    x = rng.standard_normal((2, 3, 8, 8))
    g = rng.standard_normal((2, 5, 8, 8))
    params = layers.EnhanceParams(projection_kernel=rng.standard_normal((5, 3, 1, 1)))
    zero = geometry.AttentionMap(grid=np.zeros((100, 100)))
    out = layers.enhance_forward(x, g, zero, params)
    npt.assert_array_equal(out, g)


def test_enhance_unit_attention_identity_projection(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    g = rng.standard_normal((1, 1, 6, 6))
    params = layers.EnhanceParams(projection_kernel=np.ones((1, 1, 1, 1)))
    ones = geometry.AttentionMap(grid=np.ones((100, 100)))
    out = layers.enhance_forward(x, g, ones, params)
    npt.assert_allclose(out, g + x, rtol=1e-12)


def test_enhance_support_containment(rng, face_landmarks):
    amap = geometry.attention_map(centers_for(face_landmarks))
    x = rng.standard_normal((1, 2, 28, 28))
    g = rng.standard_normal((1, 4, 28, 28))
    params = layers.EnhanceParams(projection_kernel=rng.standard_normal((4, 2, 1, 1)))
    out = layers.enhance_forward(x, g, amap, params)
    resized = T.bilinear_resize(amap.grid, (28, 28))
    diff = out - g
    assert np.all(diff[:, :, resized == 0] == 0)
    assert np.any(diff != 0)


def test_enhance_params_validation():
    with pytest.raises(T.ShapeError):
        layers.EnhanceParams(projection_kernel=np.zeros((4, 2, 3, 3)))


def test_enhance_rejects_mismatched_group_output(rng):
    params = layers.EnhanceParams(projection_kernel=np.zeros((4, 2, 1, 1)))
    amap = geometry.AttentionMap(grid=np.zeros((100, 100)))
    with pytest.raises(T.ShapeError):
        layers.enhance_forward(np.zeros((1, 2, 8, 8)), np.zeros((1, 4, 6, 6)), amap, params)


# ---------------------------------------------------------------------------
# cropping layer
# ---------------------------------------------------------------------------

def test_crop_matches_bruteforce_slice_oracle(rng, face_landmarks):
    centers = centers_for(face_landmarks)
    f = rng.standard_normal((2, 3, 28, 28))
    crops = layers.crop_forward(f, centers)
    assert len(crops) == 20
    for c, crop in zip(centers.centers, crops):
        r = min(max(int(math.floor(c.position[1] * 28 / 100 + 0.5)), 1), 26)
        col = min(max(int(math.floor(c.position[0] * 28 / 100 + 0.5)), 1), 26)
        npt.assert_array_equal(crop, f[:, :, r - 1 : r + 2, col - 1 : col + 2])


def test_crop_constant_input(face_landmarks):
    f = np.full((1, 2, 28, 28), 3.25)
    for crop in layers.crop_forward(f, centers_for(face_landmarks)):
        npt.assert_array_equal(crop, np.full((1, 2, 3, 3), 3.25))


def test_crop_requires_20_centers(face_landmarks):
    centers = centers_for(face_landmarks)
    broken = geometry.AUCenterSet(centers=centers.centers[:19], scale_d=centers.scale_d)
    with pytest.raises(ValueError, match="20"):
        layers.crop_forward(np.zeros((1, 1, 28, 28)), broken)


def test_crop_backward_conserves_gradient_mass(rng, face_landmarks):
    centers = centers_for(face_landmarks)
    gys = [rng.standard_normal((2, 3, 3, 3)) for _ in range(20)]
    gx = layers.crop_backward((2, 3, 28, 28), centers, gys)
    npt.assert_allclose(gx.sum(), sum(g.sum() for g in gys), rtol=1e-12)


# ---------------------------------------------------------------------------
# local response normalization
# ---------------------------------------------------------------------------

def test_lrn_zero_input():
    npt.assert_array_equal(layers.lrn(np.zeros((1, 4, 2, 2))), np.zeros((1, 4, 2, 2)))


def test_lrn_scalar_single_channel():
    out = layers.lrn(np.ones((1, 1, 1, 1)))
    expected = 1.0 / (2.0 + 0.002 * 1.0) ** 0.75
    npt.assert_allclose(out, [[[[expected]]]], rtol=1e-12)
    assert abs(expected - 0.594158) < 1e-5


def test_lrn_scalar_five_channels():
    out = layers.lrn(np.ones((1, 5, 1, 1)))
    expected_center = 1.0 / (2.0 + 0.002 * 5.0) ** 0.75
    npt.assert_allclose(out[0, 2, 0, 0], expected_center, rtol=1e-12)
    assert abs(expected_center - 0.592384) < 1e-5
    # border channels see only 3 neighbors inside the window
    expected_edge = 1.0 / (2.0 + 0.002 * 3.0) ** 0.75
    npt.assert_allclose(out[0, 0, 0, 0], expected_edge, rtol=1e-12)


def test_lrn_magnitude_bound(rng):
    x = rng.standard_normal((2, 7, 4, 4)) * 10
    out = layers.lrn(x)
    assert np.all(np.abs(out) <= np.abs(x) / 2.0**0.75 + 1e-12)


def test_lrn_params_validation():
    with pytest.raises(ValueError):
        layers.LrnParams(window=4)
    with pytest.raises(ValueError):
        layers.LrnParams(k=0.0)


# ---------------------------------------------------------------------------
# region head / concat
# ---------------------------------------------------------------------------

def make_head_params(c, width, rng=None):
    if rng is None:
        return layers.RegionHeadParams(
            conv_kernel=np.zeros((c, c, 3, 3)), conv_bias=np.zeros(c),
            fc_weight=np.zeros((c * 16, width)), fc_bias=np.zeros(width))
    return layers.RegionHeadParams(
        conv_kernel=rng.standard_normal((c, c, 3, 3)), conv_bias=rng.standard_normal(c),
        fc_weight=rng.standard_normal((c * 16, width)), fc_bias=rng.standard_normal(width))


def test_region_head_zero_crop_zero_biases(rng):
    params = make_head_params(4, 150, rng)
    params = layers.RegionHeadParams(conv_kernel=params.conv_kernel,
                                     conv_bias=np.zeros(4),
                                     fc_weight=params.fc_weight, fc_bias=np.zeros(150))
    out = layers.region_head_forward(np.zeros((2, 4, 3, 3)), params)
    npt.assert_array_equal(out, np.zeros((2, 150)))


def test_region_head_output_width_150(rng):
    params = make_head_params(2, 150, rng)
    out = layers.region_head_forward(rng.standard_normal((3, 2, 3, 3)), params)
    assert out.shape == (3, 150)


def test_region_head_shape_chain(rng):
    crop = rng.standard_normal((1, 4, 3, 3))
    up = T.nearest_upscale2x(crop)
    assert up.shape == (1, 4, 6, 6)
    z = T.conv2d(up, rng.standard_normal((4, 4, 3, 3)))
    assert z.shape == (1, 4, 4, 4)


def test_region_head_no_cross_batch_coupling(rng):
    params = make_head_params(3, 8, rng)
    crops = rng.standard_normal((4, 3, 3, 3))
    full = layers.region_head_forward(crops, params)
    # reordering other samples leaves each row bit-identical
    perm = layers.region_head_forward(crops[::-1].copy(), params)
    npt.assert_array_equal(perm[::-1], full)
    # evaluating a sample alone agrees to fp noise (BLAS blocking differs)
    solo = layers.region_head_forward(crops[1:2], params)
    npt.assert_allclose(full[1:2], solo, rtol=1e-12, atol=1e-13)


def test_concat_regions(rng):
    heads = [rng.standard_normal((2, 150)) for _ in range(20)]
    out = layers.concat_regions(heads)
    assert out.shape == (2, 3000)
    # block k occupies columns [k*150, (k+1)*150)
    for k in (0, 5, 19):
        npt.assert_array_equal(out[:, k * 150 : (k + 1) * 150], heads[k])
    permuted = layers.concat_regions(heads[::-1])
    npt.assert_array_equal(permuted[:, :150], heads[19])
    with pytest.raises(T.ShapeError):
        layers.concat_regions(heads[:-1] + [rng.standard_normal((2, 149))])


def test_concat_backward_splits(rng):
    heads = [rng.standard_normal((2, 5)) for _ in range(20)]
    gy = rng.standard_normal((2, 100))
    parts = layers.concat_regions_backward(heads, gy)
    for k, part in enumerate(parts):
        npt.assert_array_equal(part, gy[:, k * 5 : (k + 1) * 5])


# ---------------------------------------------------------------------------
# finite-difference suite
# ---------------------------------------------------------------------------

def test_layer_gradients_match_finite_differences():
    results = gradcheck.run_suite("layers")
    failures = [str(r) for r in results if not r.passed]
    assert not failures, "\n".join(failures)
