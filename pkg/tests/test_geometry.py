import importlib.resources
import json

import numpy as np
import numpy.testing as npt
import pytest

from eacnet import geometry
from eacnet.aus import AU_IDS


def landmarks_with_inner_corners(p39, p42, size=(100, 100)):
    pts = np.tile(np.array([[10.0, 10.0]]), (68, 1))
    pts[39] = p39
    pts[42] = p42
    return geometry.LandmarkSet(points=pts, image_size=size)


# ---------------------------------------------------------------------------
# landmark set validation
# ---------------------------------------------------------------------------

def test_landmark_set_rejects_wrong_count():
    with pytest.raises(ValueError, match="68"):
        geometry.LandmarkSet(points=np.zeros((67, 2)), image_size=(10, 10))


def test_landmark_set_rejects_out_of_bounds():
    pts = np.full((68, 2), 5.0)
    pts[0] = (10.0, 5.0)  # x == width is out of the half-open range
    with pytest.raises(ValueError, match="within"):
        geometry.LandmarkSet(points=pts, image_size=(10, 10))


# ---------------------------------------------------------------------------
# inner eye distance
# ---------------------------------------------------------------------------

def test_inner_eye_distance_horizontal_pair():
    lm = landmarks_with_inner_corners((40.0, 50.0), (60.0, 50.0))
    assert geometry.inner_eye_distance(lm) == 20.0


def test_inner_eye_distance_3_4_5():
    lm = landmarks_with_inner_corners((0.0, 0.0), (3.0, 4.0))
    assert geometry.inner_eye_distance(lm) == 5.0


def test_inner_eye_distance_degenerate():
    lm = landmarks_with_inner_corners((7.0, 7.0), (7.0, 7.0))
    with pytest.raises(geometry.DegenerateLandmarksError):
        geometry.inner_eye_distance(lm)


# ---------------------------------------------------------------------------
# AU centers
# ---------------------------------------------------------------------------

def test_au_centers_structure(face_landmarks):
    cs = geometry.au_centers(face_landmarks)
    assert len(cs.centers) == 20
    covered = {au for c in cs.centers for au in c.au_ids}
    assert covered == set(AU_IDS)
    for c in cs.centers:
        assert 0.0 <= c.position[0] < 100 and 0.0 <= c.position[1] < 100
    # canonical order: AU ascending, left before right
    keys = [(c.au_ids[0], c.side) for c in cs.centers]
    assert keys == sorted(keys, key=lambda k: (k[0], k[1] != "left"))
    # lip corner entries carry 12/14/15 together; 23 and 24 sit at the same spots
    corner = [c for c in cs.centers if c.au_ids == (12, 14, 15)]
    assert len(corner) == 2
    pos23 = sorted(c.position for c in cs.centers if c.au_ids == (23,))
    pos24 = sorted(c.position for c in cs.centers if c.au_ids == (24,))
    assert pos23 == pos24


def test_au7_is_eye_centroid(face_landmarks):
    cs = geometry.au_centers(face_landmarks)
    pts = face_landmarks.points * np.array([100 / 224, 100 / 224])
    left = next(c for c in cs.centers if c.au_ids == (7,) and c.side == "left")
    right = next(c for c in cs.centers if c.au_ids == (7,) and c.side == "right")
    npt.assert_allclose(left.position, pts[36:42].mean(axis=0), rtol=1e-12)
    npt.assert_allclose(right.position, pts[42:48].mean(axis=0), rtol=1e-12)


def test_au1_half_scale_above_inner_brow(face_landmarks):
    cs = geometry.au_centers(face_landmarks)
    pts = face_landmarks.points * np.array([100 / 224, 100 / 224])
    left = next(c for c in cs.centers if c.au_ids == (1,) and c.side == "left")
    npt.assert_allclose(left.position[1], pts[21, 1] - cs.scale_d / 2, rtol=1e-12)
    npt.assert_allclose(left.position[0], pts[21, 0], rtol=1e-12)


def test_centers_mirror_symmetric(face_landmarks):
    cs = geometry.au_centers(face_landmarks)
    by_key = {(c.au_ids, c.side): np.array(c.position) for c in cs.centers}
    for (ids, side), p in by_key.items():
        if side == "left":
            q = by_key[(ids, "right")]
            assert abs(p[0] + q[0] - 100.0) < 1e-9
            assert abs(p[1] - q[1]) < 1e-9


def test_centers_translation_equivariance(face_landmarks):
    cs0 = geometry.au_centers(face_landmarks)
    shifted = geometry.LandmarkSet(points=face_landmarks.points + np.array([11.2, -6.72]),
                                   image_size=face_landmarks.image_size)
    cs1 = geometry.au_centers(shifted)
    # 11.2 px -> 5 grid units, -6.72 px -> -3 grid units
    for c0, c1 in zip(cs0.centers, cs1.centers):
        dx = c1.position[0] - c0.position[0]
        dy = c1.position[1] - c0.position[1]
        assert abs(dx - 5.0) <= 1.0 and abs(dy + 3.0) <= 1.0


def test_centers_degenerate_landmarks_error():
    lm = landmarks_with_inner_corners((7.0, 7.0), (7.0, 7.0))
    with pytest.raises(geometry.DegenerateLandmarksError):
        geometry.au_centers(lm)


# ---------------------------------------------------------------------------
# attention map
# ---------------------------------------------------------------------------

def test_attention_map_values(face_landmarks):
    cs = geometry.au_centers(face_landmarks)
    amap = geometry.attention_map(cs).grid
    for c in cs.centers:
        cx = int(np.floor(c.position[0] + 0.5))
        cy = int(np.floor(c.position[1] + 0.5))
        assert amap[cy, cx] == 1.0
    vals = amap[amap > 0]
    assert vals.min() >= 0.05 - 1e-12 and vals.max() == 1.0


def test_attention_map_formula_single_center():
    c = geometry.AUCenter(position=(50.0, 40.0), au_ids=(7,), side="left")
    amap = geometry.attention_map(geometry.AUCenterSet(centers=(c,), scale_d=10.0)).grid
    assert amap[40, 50] == 1.0
    npt.assert_allclose(amap[45, 55], 1 - 0.095 * 10, rtol=1e-12)   # box corner, d_m = 10
    npt.assert_allclose(amap[41, 52], 1 - 0.095 * 3, rtol=1e-12)    # d_m = 3 -> 0.715
    assert amap[40, 56] == 0.0 and amap[46, 50] == 0.0              # just outside the box
    assert amap.sum() == amap[35:46, 45:56].sum()                   # support is the 11x11 box


def test_attention_map_overlap_is_pointwise_max():
    c1 = geometry.AUCenter(position=(50.0, 50.0), au_ids=(7,), side="left")
    c2 = geometry.AUCenter(position=(53.0, 50.0), au_ids=(7,), side="right")
    m1 = geometry.attention_map(geometry.AUCenterSet(centers=(c1,), scale_d=1.0)).grid
    m2 = geometry.attention_map(geometry.AUCenterSet(centers=(c2,), scale_d=1.0)).grid
    both = geometry.attention_map(geometry.AUCenterSet(centers=(c1, c2), scale_d=1.0)).grid
    npt.assert_array_equal(both, np.maximum(m1, m2))


def test_attention_map_center_order_irrelevant(face_landmarks):
    cs = geometry.au_centers(face_landmarks)
    fwd = geometry.attention_map(cs).grid
    rev = geometry.attention_map(geometry.AUCenterSet(centers=cs.centers[::-1],
                                                      scale_d=cs.scale_d)).grid
    npt.assert_array_equal(fwd, rev)


def test_attention_map_clips_at_border():
    c = geometry.AUCenter(position=(0.0, 0.0), au_ids=(1,), side="left")
    amap = geometry.attention_map(geometry.AUCenterSet(centers=(c,), scale_d=1.0)).grid
    assert amap[0, 0] == 1.0
    assert amap[:6, :6].min() > 0
    assert amap[6:, :].max() == 0.0 and amap[:, 6:].max() == 0.0


# ---------------------------------------------------------------------------
# crop-coordinate mapping
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("pos,expected", [
    ((50.0, 50.0), (14, 14)),
    ((99.0, 99.0), (26, 26)),
    ((0.0, 0.0), (1, 1)),
])
def test_map_center_to_grid_examples(pos, expected):
    assert geometry.map_center_to_grid(pos, 28, 3) == expected


def test_map_center_to_grid_window_always_fits(face_landmarks):
    cs = geometry.au_centers(face_landmarks)
    for c in cs.centers:
        r, col = geometry.map_center_to_grid(c.position, 28, 3)
        assert 1 <= r <= 26 and 1 <= col <= 26


def test_map_center_to_grid_validation():
    with pytest.raises(ValueError):
        geometry.map_center_to_grid((0, 0), 2, 3)
    with pytest.raises(ValueError):
        geometry.map_center_to_grid((0, 0), 28, 4)


# ---------------------------------------------------------------------------
# file interfaces
# ---------------------------------------------------------------------------

def test_landmarks_json_roundtrip(face_landmarks, tmp_path):
    p = tmp_path / "lm.json"
    geometry.write_landmarks_json(face_landmarks, p, image="x.pgm")
    back = geometry.read_landmarks_json(p)
    npt.assert_allclose(back.points, face_landmarks.points, rtol=1e-15)
    assert back.image_size == face_landmarks.image_size
    doc = json.loads(p.read_text())
    assert set(doc) == {"image", "width", "height", "points"}


def test_bundled_example_landmarks_parse():
    res = importlib.resources.files("eacnet").joinpath("assets/example_landmarks.json")
    with importlib.resources.as_file(res) as p:
        lm = geometry.read_landmarks_json(p)
    assert lm.image_size == (224, 224)
    geometry.au_centers(lm)  # must not raise


def test_attention_pgm_and_raw_outputs(face_landmarks, tmp_path):
    cs = geometry.au_centers(face_landmarks)
    amap = geometry.attention_map(cs)
    pgm = tmp_path / "a.pgm"
    raw = tmp_path / "a.raw"
    geometry.write_attention_pgm(amap, pgm)
    geometry.write_attention_raw(amap, raw)
    blob = pgm.read_bytes()
    assert blob.startswith(b"P5\n100 100\n65535\n")
    pixels = np.frombuffer(blob.split(b"65535\n", 1)[1], dtype=">u2").reshape(100, 100)
    assert pixels.max() == 65535
    npt.assert_array_equal(pixels, np.floor(amap.grid * 65535 + 0.5).astype(np.uint16))
    back = geometry.read_attention_raw(raw)
    npt.assert_allclose(back.grid, amap.grid, atol=1e-7)
    assert raw.read_bytes()[:8] == b"EACATT01"
