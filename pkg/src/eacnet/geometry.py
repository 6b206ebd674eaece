"""Facial-landmark geometry: AU centers, the attention map, and crop coordinates.

Landmarks follow the iBUG 68-point convention (0-based indices):

    0-16   jaw            17-21  image-left brow    22-26  image-right brow
    27-35  nose           36-41  image-left eye     42-47  image-right eye
    48-59  outer lip ring (48/54 = left/right corner, 51/57 = top/bottom center)
    60-67  inner lip ring (60/64 = corners, 62/66 = top/bottom center)

"left"/"right" throughout mean image-frame sides. The landmark scheme is a
project choice; anatomical anchor points for the center rules are listed in
``_CENTER_RULES``.

All center positions live on a 100x100 grid obtained by scaling the full
image frame independently per axis. The unit for vertical offsets is the
inner-eye-corner distance d measured on that grid ("up" decreases y).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

GRID_SIZE = 100
BOX_HALF = 5                # each AU area is (2*5+1)^2 = 11x11
ATTENTION_SLOPE = 0.095     # weight = 1 - 0.095 * manhattan distance

INNER_EYE_CORNERS = (39, 42)


class DegenerateLandmarksError(ValueError):
    """Raised when landmarks give a zero eye-corner distance."""


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class LandmarkSet:
    """68 facial key points in image pixel coordinates."""

    points: np.ndarray          # (68, 2) float, columns x, y
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (68, 2):
            raise ValueError(f"LandmarkSet needs exactly 68 (x,y) points, got shape {pts.shape}")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if (pts[:, 0] < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= h).any():
            raise ValueError(f"landmark coordinates must lie within [0,{w})x[0,{h})")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "image_size", (int(w), int(h)))


@dataclass(frozen=True)
class AUCenter:
    position: tuple[float, float]   # (x, y) on the 100x100 grid
    au_ids: tuple[int, ...]
    side: str                       # "left" | "right"


@dataclass(frozen=True)
class AUCenterSet:
    centers: tuple[AUCenter, ...]   # 20 entries, AU-ascending, left before right
    scale_d: float                  # inner-eye-corner distance in grid units


@dataclass(frozen=True)
class AttentionMap:
    grid: np.ndarray                # (100, 100), values in {0} U [0.05, 1]


def inner_eye_distance(landmarks: LandmarkSet) -> float:
    """Euclidean distance between the two inner eye corners, in pixels."""
    a, b = landmarks.points[INNER_EYE_CORNERS[0]], landmarks.points[INNER_EYE_CORNERS[1]]
    d = float(np.hypot(*(a - b)))
    if d == 0.0:
        raise DegenerateLandmarksError("inner eye corners coincide")
    return d


def _grid_points(landmarks: LandmarkSet) -> np.ndarray:
    w, h = landmarks.image_size
    return landmarks.points * np.array([GRID_SIZE / w, GRID_SIZE / h])


# Each rule: primary AU ids sharing the pair, then per side the anchor
# landmark indices (averaged) and the vertical offset in units of d
# (positive = down). Rules are ordered by ascending primary AU.
_CENTER_RULES = (
    ((1,), {"left": (21,), "right": (22,)}, -0.5),        # above inner brow
    ((2,), {"left": (17,), "right": (26,)}, -1 / 3),      # above outer brow
    ((4,), {"left": (19,), "right": (24,)}, 1 / 3),       # below brow center
    ((6,), {"left": (40, 41), "right": (46, 47)}, 1.0),   # below eye bottom
    ((7,), {"left": tuple(range(36, 42)), "right": tuple(range(42, 48))}, 0.0),  # eye center
    ((10,), {"left": (50,), "right": (52,)}, 0.0),        # upper lip
    ((12, 14, 15), {"left": (48,), "right": (54,)}, 0.0),  # lip corner
    ((17,), {"left": (58,), "right": (56,)}, 0.5),        # below lip
    ((23,), {"left": (61, 67), "right": (63, 65)}, 0.0),  # lip center
    ((24,), {"left": (61, 67), "right": (63, 65)}, 0.0),  # lip center (same spot)
)


def au_centers(landmarks: LandmarkSet) -> AUCenterSet:
    """Compute the 20 AU centers on the 100x100 grid from landmarks.

    Raises DegenerateLandmarksError when the eye-corner distance is zero.
    """
    pts = _grid_points(landmarks)
    d = float(np.hypot(*(pts[INNER_EYE_CORNERS[0]] - pts[INNER_EYE_CORNERS[1]])))
    if d == 0.0:
        raise DegenerateLandmarksError("inner eye corners coincide")
    centers = []
    for au_ids, anchors, dy in _CENTER_RULES:
        for side in ("left", "right"):
            x, y = pts[list(anchors[side])].mean(axis=0)
            y += dy * d
            x = min(max(x, 0.0), GRID_SIZE - 1.0)
            y = min(max(y, 0.0), GRID_SIZE - 1.0)
            centers.append(AUCenter(position=(float(x), float(y)), au_ids=au_ids, side=side))
    return AUCenterSet(centers=tuple(centers), scale_d=d)


def attention_map(center_set: AUCenterSet) -> AttentionMap:
    """Build the 100x100 attention map from AU centers.

    Each center contributes an 11x11 box (clipped at the border) of weights
    1 - 0.095 * manhattan-distance-to-center; overlapping boxes combine by
    per-pixel maximum, everything else stays 0.
    """
    grid = np.zeros((GRID_SIZE, GRID_SIZE))
    span = np.arange(-BOX_HALF, BOX_HALF + 1)
    box = 1.0 - ATTENTION_SLOPE * (np.abs(span)[:, None] + np.abs(span)[None, :])
    for c in center_set.centers:
        cx, cy = (_round_half_up(v) for v in c.position)
        y0, y1 = max(cy - BOX_HALF, 0), min(cy + BOX_HALF, GRID_SIZE - 1)
        x0, x1 = max(cx - BOX_HALF, 0), min(cx + BOX_HALF, GRID_SIZE - 1)
        sub = box[y0 - cy + BOX_HALF : y1 - cy + BOX_HALF + 1,
                  x0 - cx + BOX_HALF : x1 - cx + BOX_HALF + 1]
        np.maximum(grid[y0 : y1 + 1, x0 : x1 + 1], sub, out=grid[y0 : y1 + 1, x0 : x1 + 1])
    return AttentionMap(grid=grid)


def map_center_to_grid(position: tuple[float, float], grid: int, window: int) -> tuple[int, int]:
    """Map a 100-grid (x,y) position to feature-grid (row, col).

    Coordinates are rescaled by grid/100, rounded half-up, then clamped so a
    window x window box centered there fits entirely inside the grid.
    """
    if not (grid >= window >= 1):
        raise ValueError(f"need grid >= window >= 1, got grid={grid} window={window}")
    if window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    x, y = position
    half = window // 2
    row = min(max(_round_half_up(y * grid / GRID_SIZE), half), grid - 1 - half)
    col = min(max(_round_half_up(x * grid / GRID_SIZE), half), grid - 1 - half)
    return row, col


# ---------------------------------------------------------------------------
# external interfaces: landmarks JSON, attention PGM and raw grid
# ---------------------------------------------------------------------------

ATTENTION_RAW_MAGIC = b"EACATT01"


def read_landmarks_json(path) -> LandmarkSet:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return LandmarkSet(points=np.array(doc["points"], dtype=np.float64),
                       image_size=(int(doc["width"]), int(doc["height"])))


def write_landmarks_json(landmarks: LandmarkSet, path, image: str = "") -> None:
    doc = {
        "image": image,
        "width": landmarks.image_size[0],
        "height": landmarks.image_size[1],
        "points": [[float(x), float(y)] for x, y in landmarks.points],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def write_attention_pgm(amap: AttentionMap, path) -> None:
    """16-bit binary PGM, pixel = round(weight * 65535), big-endian samples."""
    pixels = np.clip(np.floor(amap.grid * 65535.0 + 0.5), 0, 65535).astype(">u2")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(pixels.tobytes())


def write_attention_raw(amap: AttentionMap, path) -> None:
    """Raw little-endian float32 grid prefixed by the 8-byte magic."""
    with open(path, "wb") as f:
        f.write(ATTENTION_RAW_MAGIC)
        f.write(amap.grid.astype("<f4").tobytes())


def read_attention_raw(path) -> AttentionMap:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != ATTENTION_RAW_MAGIC:
            raise ValueError(f"bad attention raw magic: {magic!r}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != GRID_SIZE * GRID_SIZE:
        raise ValueError(f"attention raw payload has {data.size} values, expected {GRID_SIZE * GRID_SIZE}")
    return AttentionMap(grid=data.reshape(GRID_SIZE, GRID_SIZE).astype(np.float64))
