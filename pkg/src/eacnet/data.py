"""Dataset ingestion and the procedural synthetic-face generator.

The generator draws a schematic face (ellipse head, brows, eyes, nose,
mouth) with known 68-point landmarks, then plants a localized brightness
bump plus a small content warp at the center region of every active AU, so
the appearance signal sits exactly where the attention map and the crop
windows look.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry, pnm
from .aus import AU_IDS, NUM_AUS
from .tensor import bilinear_resize

log = logging.getLogger(__name__)

INPUT_SIZE = 224

MANIFEST_HEADER = ["image", "subject"] + [f"au{a}" for a in AU_IDS] + ["landmarks"]


class ManifestError(ValueError):
    """Manifest-level validation failure, addressed by row and column."""


class ImageFormatError(ValueError):
    """Unsupported or malformed image input."""


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    subject_id: str
    labels: np.ndarray          # (12,) int, values 0/1
    landmarks_path: Path


@dataclass(frozen=True)
class LoadedSample:
    image: np.ndarray           # (3, 224, 224) float32 in [0,1]
    landmarks: geometry.LandmarkSet
    labels: np.ndarray          # (12,) int8
    subject_id: str


@dataclass(frozen=True)
class SynthSpec:
    count: int
    seed: int
    au_probabilities: tuple[float, ...]   # 12 per-AU activation probabilities
    deformation_magnitude: float = 0.35
    image_size: int = INPUT_SIZE

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        probs = tuple(float(p) for p in self.au_probabilities)
        if len(probs) != NUM_AUS or any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("au_probabilities must be 12 values in [0,1]")
        object.__setattr__(self, "au_probabilities", probs)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def load_manifest(path) -> list[SampleRecord]:
    """Read and validate a dataset manifest CSV.

    Relative image/landmark paths are resolved against the manifest's
    directory. Rejects duplicate image paths, non-binary labels and rows
    referencing missing files, naming the offending row and column.
    """
    path = Path(path)
    base = path.parent
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        log.warning("manifest %s is empty", path)
        return []
    header = rows[0]
    if header != MANIFEST_HEADER:
        missing = [c for c in MANIFEST_HEADER if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {missing}")
        raise ManifestError(f"{path}: header {header} != expected {MANIFEST_HEADER}")
    if len(rows) == 1:
        log.warning("manifest %s has no data rows", path)
        return []
    records: list[SampleRecord] = []
    seen: set[str] = set()
    for rownum, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{path} row {rownum}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        image, subject = row[0], row[1]
        if image in seen:
            raise ManifestError(f"{path} row {rownum}: duplicate image path {image!r}")
        seen.add(image)
        labels = np.zeros(NUM_AUS, dtype=np.int8)
        for i, au in enumerate(AU_IDS):
            value = row[2 + i]
            if value not in ("0", "1"):
                raise ManifestError(f"{path} row {rownum}, column au{au}: non-binary label {value!r}")
            labels[i] = int(value)
        image_path = base / image
        landmarks_path = base / row[-1]
        if not image_path.is_file():
            raise ManifestError(f"{path} row {rownum}, column image: file not found: {image_path}")
        if not landmarks_path.is_file():
            raise ManifestError(f"{path} row {rownum}, column landmarks: file not found: {landmarks_path}")
        records.append(SampleRecord(image_path=image_path, subject_id=subject,
                                    labels=labels, landmarks_path=landmarks_path))
    return records


def write_manifest(records: list[SampleRecord], path) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.image_path.relative_to(base).as_posix(), r.subject_id,
                             *(str(int(v)) for v in r.labels),
                             r.landmarks_path.relative_to(base).as_posix()])


# ---------------------------------------------------------------------------
# image loading
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Load a binary PGM/PPM (maxval 255) as a (3,224,224) float32 in [0,1].

    Grayscale is replicated to 3 channels; other sizes are bilinearly
    resized (corner-aligned).
    """
    try:
        arr = pnm.read_pnm(path)
    except pnm.PnmError as e:
        raise ImageFormatError(f"{path}: {e}") from e
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: only maxval 255 images are supported")
    img = arr.astype(np.float64) / 255.0
    if img.ndim == 2:
        img = np.stack([img] * 3)
    else:
        img = img.transpose(2, 0, 1)
    if img.shape[1:] != (INPUT_SIZE, INPUT_SIZE):
        img = np.stack([bilinear_resize(c, (INPUT_SIZE, INPUT_SIZE)) for c in img])
    return img.astype(np.float32)


def write_image(img: np.ndarray, path) -> None:
    """Write a (3,H,W) or (H,W) float image in [0,1] as PPM/PGM, maxval 255."""
    quantized = np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if quantized.ndim == 3:
        pnm.write_pnm(quantized.transpose(1, 2, 0), path)
    else:
        pnm.write_pnm(quantized, path)


def load_samples(records: list[SampleRecord]) -> list[LoadedSample]:
    return [
        LoadedSample(image=load_image(r.image_path),
                     landmarks=geometry.read_landmarks_json(r.landmarks_path),
                     labels=r.labels.astype(np.int8),
                     subject_id=r.subject_id)
        for r in records
    ]


# ---------------------------------------------------------------------------
# schematic face
# ---------------------------------------------------------------------------

def schematic_landmarks(cx: float, cy: float, a: float, b: float,
                        image_size: int = INPUT_SIZE) -> geometry.LandmarkSet:
    """68-point landmark layout for an ellipse face centered at (cx,cy).

    a/b are the horizontal/vertical semi-axes. The layout is exactly
    mirror-symmetric about the vertical line x = cx.
    """
    pts = np.zeros((68, 2))
    # jaw: lower half of the head ellipse, left ear -> chin -> right ear
    t = -np.pi / 2 + np.arange(17) * (np.pi / 16)
    pts[0:17, 0] = cx + a * np.sin(t)
    pts[0:17, 1] = cy + b * np.cos(t)

    ey = cy - 0.25 * b
    ew, eh = 0.18 * a, 0.06 * b
    for side, ex in (("left", cx - 0.42 * a), ("right", cx + 0.42 * a)):
        eye = np.array([
            [ex - ew, ey], [ex - ew / 3, ey - eh], [ex + ew / 3, ey - eh],
            [ex + ew, ey], [ex + ew / 3, ey + eh], [ex - ew / 3, ey + eh],
        ])
        if side == "left":
            pts[36:42] = eye
        else:
            # mirror so 42 is the inner corner and 45 the outer one
            pts[42:48] = np.array([[2 * ex - x, y] for x, y in eye])[[3, 2, 1, 0, 5, 4]]

    by = ey - 0.14 * b
    arch = np.array([0.0, -1.5, -2.5, -1.5, 0.0])
    bx = np.linspace(-1.4 * ew, 1.4 * ew, 5)
    pts[17:22, 0] = (cx - 0.42 * a) + bx          # outer -> inner
    pts[17:22, 1] = by + arch
    pts[22:27, 0] = (cx + 0.42 * a) - bx[::-1]    # inner -> outer
    pts[22:27, 1] = by + arch[::-1]

    # nose bridge and base
    pts[27:31, 0] = cx
    pts[27:31, 1] = np.linspace(ey, cy + 0.10 * b, 4)
    pts[31:36, 0] = cx + np.linspace(-0.08 * a, 0.08 * a, 5)
    pts[31:36, 1] = cy + 0.16 * b

    my = cy + 0.45 * b
    mw, mh = 0.26 * a, 0.06 * b
    outer = np.array([
        [-1.0, 0.0], [-0.6, -0.7], [-0.25, -1.0], [0.0, -1.0], [0.25, -1.0],
        [0.6, -0.7], [1.0, 0.0], [0.6, 0.7], [0.25, 1.0], [0.0, 1.0],
        [-0.25, 1.0], [-0.6, 0.7],
    ])
    pts[48:60, 0] = cx + outer[:, 0] * mw
    pts[48:60, 1] = my + outer[:, 1] * mh
    inner = np.array([
        [-0.7, 0.0], [-0.25, -0.5], [0.0, -0.5], [0.25, -0.5],
        [0.7, 0.0], [0.25, 0.5], [0.0, 0.5], [-0.25, 0.5],
    ])
    pts[60:68, 0] = cx + inner[:, 0] * mw
    pts[60:68, 1] = my + inner[:, 1] * mh
    return geometry.LandmarkSet(points=pts, image_size=(image_size, image_size))


def _fill_ellipse(img, cx, cy, rx, ry, value):
    h, w = img.shape
    y0, y1 = max(int(cy - ry) - 1, 0), min(int(cy + ry) + 2, h)
    x0, x1 = max(int(cx - rx) - 1, 0), min(int(cx + rx) + 2, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[y0:y1, x0:x1][mask] = value


def _draw_polyline(img, xs, ys, value, thickness=1.5):
    h, w = img.shape
    x0, x1 = max(int(xs.min()) - 2, 0), min(int(xs.max()) + 3, w)
    y0, y1 = max(int(ys.min() - thickness) - 2, 0), min(int(ys.max() + thickness) + 3, h)
    cols = np.arange(x0, x1)
    centers = np.interp(cols, xs, ys)
    yy = np.arange(y0, y1)[:, None]
    mask = np.abs(yy - centers[None, :]) <= thickness
    img[y0:y1, x0:x1][mask] = value


def render_face(landmarks: geometry.LandmarkSet) -> np.ndarray:
    """Rasterize a neutral schematic face for the given landmark layout."""
    size = landmarks.image_size[0]
    img = np.full((size, size), 0.12)
    pts = landmarks.points
    cx = pts[27, 0]
    chin, ear_l, ear_r = pts[8], pts[0], pts[16]
    b = chin[1] - ear_l[1]
    a = (ear_r[0] - ear_l[0]) / 2
    cy = ear_l[1]
    # head: full ellipse, mildly shaded toward the rim
    yy, xx = np.mgrid[0:size, 0:size]
    r2 = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2
    head = r2 <= 1.0
    img[head] = 0.60 - 0.08 * r2[head]
    # brows
    _draw_polyline(img, pts[17:22, 0], pts[17:22, 1], 0.25, thickness=1.8)
    _draw_polyline(img, pts[22:27, 0], pts[22:27, 1], 0.25, thickness=1.8)
    # eyes: sclera + pupil
    for sl in (slice(36, 42), slice(42, 48)):
        ecx, ecy = pts[sl].mean(axis=0)
        ew = (pts[sl, 0].max() - pts[sl, 0].min()) / 2
        eh = max((pts[sl, 1].max() - pts[sl, 1].min()) / 2, 2.0)
        _fill_ellipse(img, ecx, ecy, ew, eh, 0.82)
        _fill_ellipse(img, ecx, ecy, eh * 0.7, eh * 0.7, 0.18)
    # nose
    _draw_polyline(img, np.array([pts[27, 0] - 1, pts[27, 0] + 1]),
                   np.array([(pts[27, 1] + pts[30, 1]) / 2] * 2), 0.48,
                   thickness=(pts[30, 1] - pts[27, 1]) / 2)
    _draw_polyline(img, pts[31:36, 0], pts[31:36, 1], 0.42, thickness=1.2)
    # mouth: lips ellipse with darker opening line
    mcx, mcy = pts[48:60].mean(axis=0)
    mw = (pts[54, 0] - pts[48, 0]) / 2
    mh = max((pts[57, 1] - pts[51, 1]) / 2, 2.0)
    _fill_ellipse(img, mcx, mcy, mw, mh, 0.30)
    _draw_polyline(img, np.array([pts[48, 0], pts[54, 0]]), np.array([mcy, mcy]), 0.18, thickness=1.0)
    return img


# The warp shifts content up for raising AUs, down otherwise. AUs whose
# center regions coincide or heavily overlap (7 with 4; 12/14/15; 23/24 and
# 10) get distinct bump shapes (blob / horizontal bar / vertical bar) so
# co-located labels stay separable in appearance.
_AU_WARP_UP = {1, 2, 6, 10, 12}
_AU_SHAPE = {7: "hbar", 14: "hbar", 15: "vbar", 23: "hbar", 24: "vbar"}

SIGNAL_HALF = 11   # image-pixel half-width of the planted signal box (~5 grid px)


def _paint_au_signal(img: np.ndarray, center_xy_grid: tuple[float, float],
                     au: int, magnitude: float) -> None:
    size = img.shape[0]
    gx, gy = center_xy_grid
    cx = int(np.floor(gx * size / geometry.GRID_SIZE + 0.5))
    cy = int(np.floor(gy * size / geometry.GRID_SIZE + 0.5))
    y0, y1 = max(cy - SIGNAL_HALF, 0), min(cy + SIGNAL_HALF, size - 1)
    x0, x1 = max(cx - SIGNAL_HALF, 0), min(cx + SIGNAL_HALF, size - 1)
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    dy = np.abs(yy - cy) / (SIGNAL_HALF + 1)
    dx = np.abs(xx - cx) / (SIGNAL_HALF + 1)
    shape = _AU_SHAPE.get(au, "blob")
    if shape == "hbar":
        tent = np.clip(1.0 - 2.2 * dy, 0.0, 1.0) * (1.0 - dx)
    elif shape == "vbar":
        tent = np.clip(1.0 - 2.2 * dx, 0.0, 1.0) * (1.0 - dy)
    else:
        tent = 1.0 - np.maximum(dy, dx)
    sub = img[y0 : y1 + 1, x0 : x1 + 1]
    shift = -2 if au in _AU_WARP_UP else 2
    warped = np.roll(sub, shift, axis=0)
    blend = np.clip(tent * 0.8, 0, 1)
    sub[:] = sub * (1 - blend) + warped * blend
    sub += magnitude * tent
    np.clip(sub, 0.0, 1.0, out=sub)


def generate_synthetic(spec: SynthSpec, out_dir) -> list[SampleRecord]:
    """Generate spec.count labeled face images with ground-truth landmarks.

    Writes images/, landmarks/ and manifest.csv under out_dir; byte-identical
    output for identical specs. Subjects are assigned round-robin.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "landmarks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    rng = np.random.default_rng([spec.seed])
    size = spec.image_size
    n_subjects = min(spec.count, max(3, min(27, spec.count // 10)))
    jitter = rng.uniform(-1.0, 1.0, size=(spec.count, 4))
    labels = (rng.random((spec.count, NUM_AUS)) < np.array(spec.au_probabilities)).astype(np.int8)
    records: list[SampleRecord] = []
    for i in range(spec.count):
        cx = size / 2 + 6.0 * jitter[i, 0]
        cy = size / 2 + 6.0 * jitter[i, 1]
        a = 0.34 * size * (1 + 0.08 * jitter[i, 2])
        b = 0.40 * size * (1 + 0.08 * jitter[i, 3])
        landmarks = schematic_landmarks(cx, cy, a, b, image_size=size)
        img = render_face(landmarks)
        img += rng.normal(0.0, 0.015, size=img.shape)
        np.clip(img, 0.0, 1.0, out=img)
        centers = geometry.au_centers(landmarks)
        for j, au in enumerate(AU_IDS):
            if labels[i, j]:
                for c in centers.centers:
                    if au in c.au_ids:
                        _paint_au_signal(img, c.position, au, spec.deformation_magnitude)
        subject = f"s{i % n_subjects:02d}"
        stem = f"{subject}_{i:05d}"
        image_path = out / "images" / f"{stem}.pgm"
        landmarks_path = out / "landmarks" / f"{stem}.json"
        write_image(img, image_path)
        geometry.write_landmarks_json(landmarks, landmarks_path, image=f"{stem}.pgm")
        records.append(SampleRecord(image_path=image_path, subject_id=subject,
                                    labels=labels[i].copy(), landmarks_path=landmarks_path))
    write_manifest(records, out / "manifest.csv")
    return records
