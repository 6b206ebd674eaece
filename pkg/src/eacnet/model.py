"""Network assembly: the finetuned-VGG baseline, the enhanced variant, and
the enhanced+cropped variant, at a configurable width scale.

All variants share the conv backbone layout (2,2,4,4,4 convs per group,
3x3 same-padded, 2x2 max pool between groups) and draw each parameter from
a name-keyed seeded RNG, so models built from the same seed share values
for identically named, identically shaped parameters across variants.

Input size is fixed at 224x224 so the feature-grid geometry (56/28 working
resolutions, 28x28 crop grid) stays exact at every width scale.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .geometry import AttentionMap, LandmarkSet, attention_map, au_centers
from .pnm import write_pnm

INPUT_SIZE = 224
BASE_CHANNELS = (64, 128, 256, 512, 512)
GROUP_CONVS = (2, 2, 4, 4, 4)
BASE_FC1_WIDTH = 2048
BASE_HEAD_WIDTH = 150
NUM_REGIONS = 20
ENHANCE_GROUPS = (3, 4)
CROP_GRID = 28          # group-4 working resolution
GROUP3_RES = 56

VARIANTS = ("fvgg", "enet", "eac")
DEFAULT_FREEZE = {"fvgg": (1, 2, 3), "enet": (1, 2), "eac": (1, 2)}

CHECKPOINT_MAGIC = b"EACN"
CHECKPOINT_VERSION = 1


def _scaled(base: int, scale: float, floor: int) -> int:
    return max(floor, int(np.floor(base * scale + 0.5)))


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    width_scale: float = 1.0
    num_outputs: int = 12
    freeze_groups: tuple[int, ...] | None = None   # None -> per-variant default
    dropout_rate: float = 0.5

    def __post_init__(self):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.width_scale <= 1.0:
            problems.append(f"width_scale must be in (0,1], got {self.width_scale}")
        if self.num_outputs != 12:
            problems.append(f"num_outputs is fixed at 12, got {self.num_outputs}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        freeze = self.freeze_groups
        if freeze is None and self.variant in DEFAULT_FREEZE:
            freeze = DEFAULT_FREEZE[self.variant]
        if freeze is not None and not set(freeze) <= {1, 2, 3, 4, 5}:
            problems.append(f"freeze_groups must be a subset of 1..5, got {freeze}")
        if problems:
            raise ValueError("invalid NetworkSpec: " + "; ".join(problems))
        object.__setattr__(self, "freeze_groups", tuple(sorted(freeze)))

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(_scaled(c, self.width_scale, 1) for c in BASE_CHANNELS)

    @property
    def fc1_width(self) -> int:
        return _scaled(BASE_FC1_WIDTH, self.width_scale, 8)

    @property
    def head_width(self) -> int:
        return _scaled(BASE_HEAD_WIDTH, self.width_scale, 8)

    @property
    def num_groups(self) -> int:
        return 4 if self.variant == "eac" else 5

    @property
    def fc1_in(self) -> int:
        if self.variant == "eac":
            return NUM_REGIONS * self.head_width
        return self.channels[4] * 7 * 7

    def has_enhance(self) -> bool:
        return self.variant in ("enet", "eac")


def _conv_plan(spec: NetworkSpec) -> list[tuple[str, int, int]]:
    """(name, cin, cout) for every conv in backbone order."""
    plan = []
    prev = 3
    for gi in range(1, spec.num_groups + 1):
        cout = spec.channels[gi - 1]
        for ci in range(1, GROUP_CONVS[gi - 1] + 1):
            plan.append((f"g{gi}.conv{ci}", prev, cout))
            prev = cout
    return plan


def _param_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic (name, shape) list for every parameter of the model."""
    ch = spec.channels
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for name, cin, cout in _conv_plan(spec):
        shapes.append((f"{name}.weight", (cout, cin, 3, 3)))
        shapes.append((f"{name}.bias", (cout,)))
    if spec.has_enhance():
        shapes.append(("enh3.proj.weight", (ch[2], ch[1], 1, 1)))
        shapes.append(("enh4.proj.weight", (ch[3], ch[2], 1, 1)))
    if spec.variant == "eac":
        c4, w = ch[3], spec.head_width
        for k in range(NUM_REGIONS):
            shapes.append((f"head{k:02d}.conv.weight", (c4, c4, 3, 3)))
            shapes.append((f"head{k:02d}.conv.bias", (c4,)))
            shapes.append((f"head{k:02d}.fc.weight", (c4 * 16, w)))
            shapes.append((f"head{k:02d}.fc.bias", (w,)))
    shapes.append(("fc1.weight", (spec.fc1_in, spec.fc1_width)))
    shapes.append(("fc1.bias", (spec.fc1_width,)))
    shapes.append(("fc2.weight", (spec.fc1_width, spec.num_outputs)))
    shapes.append(("fc2.bias", (spec.num_outputs,)))
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    """Closed-form parameter count.

    convs: sum over the backbone of (cin*9 + 1)*cout; enhance projections:
    c2*c3 + c3*c4; region heads: 20*((c4*9+1)*c4 + (16*c4+1)*head_width);
    final stack: (fc1_in+1)*fc1_width + (fc1_width+1)*num_outputs.
    """
    ch = spec.channels
    total = 0
    prev = 3
    for gi in range(1, spec.num_groups + 1):
        cout = ch[gi - 1]
        for _ in range(GROUP_CONVS[gi - 1]):
            total += (prev * 9 + 1) * cout
            prev = cout
    if spec.has_enhance():
        total += ch[1] * ch[2] + ch[2] * ch[3]
    if spec.variant == "eac":
        c4, w = ch[3], spec.head_width
        total += NUM_REGIONS * ((c4 * 9 + 1) * c4 + (16 * c4 + 1) * w)
    total += (spec.fc1_in + 1) * spec.fc1_width
    total += (spec.fc1_width + 1) * spec.num_outputs
    return total


@dataclass
class Model:
    spec: NetworkSpec
    dtype: np.dtype
    params: dict[str, np.ndarray]
    param_names: tuple[str, ...]

    def frozen_param_names(self) -> set[str]:
        return {n for n in self.param_names
                if n.startswith("g") and int(n[1]) in self.spec.freeze_groups}


def build(spec: NetworkSpec, seed: int, dtype=np.float32) -> Model:
    """He-uniform weights (limit sqrt(6/fan_in)), zero biases.

    Every parameter is drawn from an RNG keyed by (seed, crc32(name)), so
    identically named parameters match bit-exactly across variants built
    from the same seed.
    """
    params: dict[str, np.ndarray] = {}
    names = []
    for name, shape in _param_shapes(spec):
        names.append(name)
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in = shape[0]
        limit = np.sqrt(6.0 / fan_in)
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Model(spec=spec, dtype=np.dtype(dtype), params=params, param_names=tuple(names))


# ---------------------------------------------------------------------------
# per-sample conditioning (attention + crop coordinates)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conditioning:
    att_g3: np.ndarray    # (56, 56)
    att_g4: np.ndarray    # (28, 28)
    crop_rows: np.ndarray  # (20,) int
    crop_cols: np.ndarray  # (20,) int


def prepare_conditioning(landmarks: LandmarkSet) -> Conditioning:
    centers = au_centers(landmarks)
    amap = attention_map(centers)
    coords = layers.crop_coordinates(centers, CROP_GRID)
    return Conditioning(
        att_g3=T.bilinear_resize(amap.grid, (GROUP3_RES, GROUP3_RES)),
        att_g4=T.bilinear_resize(amap.grid, (CROP_GRID, CROP_GRID)),
        crop_rows=np.array([r for r, _ in coords], dtype=np.intp),
        crop_cols=np.array([c for _, c in coords], dtype=np.intp),
    )


def zero_attention_conditioning() -> Conditioning:
    """Conditioning with the attention map forced to zero (center crops)."""
    mid = CROP_GRID // 2
    return Conditioning(att_g3=np.zeros((GROUP3_RES, GROUP3_RES)),
                        att_g4=np.zeros((CROP_GRID, CROP_GRID)),
                        crop_rows=np.full(NUM_REGIONS, mid, dtype=np.intp),
                        crop_cols=np.full(NUM_REGIONS, mid, dtype=np.intp))


def _batch_conditioning(model: Model, n: int, landmarks, conditioning):
    if conditioning is None:
        if landmarks is None:
            raise ValueError(f"variant {model.spec.variant!r} requires landmarks"
                             " (or precomputed conditioning)")
        if isinstance(landmarks, LandmarkSet):
            landmarks = [landmarks] * n
        if len(landmarks) != n:
            raise ValueError(f"need {n} landmark sets, got {len(landmarks)}")
        conditioning = [prepare_conditioning(lm) for lm in landmarks]
    if isinstance(conditioning, Conditioning):
        conditioning = [conditioning] * n
    if len(conditioning) != n:
        raise ValueError(f"need {n} conditioning entries, got {len(conditioning)}")
    dt = model.dtype
    return {
        "a3": np.stack([c.att_g3 for c in conditioning]).astype(dt),
        "a4": np.stack([c.att_g4 for c in conditioning]).astype(dt),
        "rows": np.stack([c.crop_rows for c in conditioning]),
        "cols": np.stack([c.crop_cols for c in conditioning]),
    }


def _gather_crops(z: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> list[np.ndarray]:
    n = z.shape[0]
    crops = []
    for k in range(NUM_REGIONS):
        crops.append(np.stack([
            z[i, :, rows[i, k] - 1 : rows[i, k] + 2, cols[i, k] - 1 : cols[i, k] + 2]
            for i in range(n)]))
    return crops


def _scatter_crops(shape, rows, cols, gys) -> np.ndarray:
    gz = np.zeros(shape, dtype=gys[0].dtype)
    for k, gy in enumerate(gys):
        for i in range(shape[0]):
            gz[i, :, rows[i, k] - 1 : rows[i, k] + 2, cols[i, k] - 1 : cols[i, k] + 2] += gy[i]
    return gz


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _forward(model: Model, images: np.ndarray, cond: dict | None, mode: str,
             rng: np.random.Generator | None, keep_cache: bool, want_taps: bool):
    spec = model.spec
    p = model.params
    x = np.ascontiguousarray(images, dtype=model.dtype)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
        raise T.ShapeError(f"images must be [N,3,{INPUT_SIZE},{INPUT_SIZE}], got {tuple(x.shape)}")
    n = x.shape[0]
    train = mode == "train"
    if train and spec.dropout_rate > 0 and rng is None:
        raise ValueError("train-mode forward needs an explicit rng for dropout")
    cache: dict = {"convs": {}, "pools": {}, "cols": {}}
    taps: dict = {}
    unfrozen_from = 1
    while unfrozen_from in spec.freeze_groups:
        unfrozen_from += 1

    for gi in range(1, spec.num_groups + 1):
        gx = x
        for ci in range(1, GROUP_CONVS[gi - 1] + 1):
            name = f"g{gi}.conv{ci}"
            if keep_cache and gi >= unfrozen_from:
                z, cols = T.conv2d_with_patches(x, p[f"{name}.weight"],
                                                p[f"{name}.bias"], padding=1)
                cache["cols"][name] = cols
            else:
                z = T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=1)
            if keep_cache:
                cache["convs"][name] = (x, z)
            x = T.relu(z)
        if spec.has_enhance() and gi in ENHANCE_GROUPS:
            a = cond["a3"] if gi == 3 else cond["a4"]
            kname = f"enh{gi}.proj.weight"
            modulated = gx * a[:, None]
            skip = T.conv2d(modulated, p[kname])
            if keep_cache:
                cache[f"enh{gi}"] = (gx, a, modulated)
            x = x + skip
        if want_taps:
            taps[f"group{gi}"] = x
        if gi < 5 and not (spec.variant == "eac" and gi == 4):
            x, idx = T.maxpool2(x)
            if keep_cache:
                cache["pools"][gi] = idx
        elif gi == 5:
            x, idx = T.maxpool2(x)
            if keep_cache:
                cache["pools"][gi] = idx

    if spec.variant == "eac":
        t = x                                   # enhanced group-4 output, [N,C4,28,28]
        z = layers.lrn(t)
        rows, cols = cond["rows"], cond["cols"]
        crops = _gather_crops(z, rows, cols)
        heads = []
        for k in range(NUM_REGIONS):
            hp = layers.RegionHeadParams(
                conv_kernel=p[f"head{k:02d}.conv.weight"],
                conv_bias=p[f"head{k:02d}.conv.bias"],
                fc_weight=p[f"head{k:02d}.fc.weight"],
                fc_bias=p[f"head{k:02d}.fc.bias"])
            heads.append(layers.region_head_forward(crops[k], hp))
        flat = layers.concat_regions(heads)
        if keep_cache:
            cache["eac"] = (t, z, rows, cols, crops, heads)
        if want_taps:
            taps["lrn"] = z
            taps["crops"] = crops
            taps["head_upscaled_shape"] = (n, spec.channels[3], 6, 6)
            taps["concat"] = flat
    else:
        flat = x.reshape(n, -1)

    z1 = T.matmul(flat, p["fc1.weight"]) + p["fc1.bias"]
    if train and spec.dropout_rate > 0:
        mask = (rng.random(z1.shape) >= spec.dropout_rate).astype(model.dtype)
        mask /= model.dtype.type(1 - spec.dropout_rate)
    else:
        mask = None
    d1 = z1 if mask is None else z1 * mask
    h1 = T.relu(d1)
    z2 = T.matmul(h1, p["fc2.weight"]) + p["fc2.bias"]
    probs = T.sigmoid(z2)
    if want_taps:
        taps["features"] = h1
    if keep_cache:
        cache["fc"] = (flat, z1, mask, d1, h1, z2)
        cache["n"] = n
    return probs, taps, cache


def forward(model: Model, images: np.ndarray, landmarks=None, mode: str = "eval",
            rng: np.random.Generator | None = None, conditioning=None,
            want_taps: bool = False):
    """Run the network; returns (probs [N,12], taps dict).

    landmarks: a LandmarkSet, or one per sample; ignored by the baseline
    variant. conditioning: precomputed Conditioning (or list), overriding
    landmarks. taps expose group outputs and the penultimate features.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cond = None
    if model.spec.has_enhance():
        cond = _batch_conditioning(model, images.shape[0], landmarks, conditioning)
    probs, taps, _ = _forward(model, images, cond, mode, rng, keep_cache=False,
                              want_taps=want_taps)
    return probs, taps


def forward_train(model: Model, images: np.ndarray, landmarks=None,
                  rng: np.random.Generator | None = None, conditioning=None):
    """Train-mode forward keeping the caches needed by backward."""
    cond = None
    if model.spec.has_enhance():
        cond = _batch_conditioning(model, images.shape[0], landmarks, conditioning)
    probs, _, cache = _forward(model, images, cond, "train", rng, keep_cache=True,
                               want_taps=False)
    cache["cond"] = cond
    return probs, cache


def backward(model: Model, cache: dict, gprobs: np.ndarray,
             stop_before_group: int = 0) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(probs) through the cached forward pass.

    Returns gradients keyed like params. Groups below stop_before_group are
    skipped (their parameters are frozen and nothing beneath needs dx).
    """
    spec = model.spec
    p = model.params
    grads: dict[str, np.ndarray] = {}
    flat, z1, mask, d1, h1, z2 = cache["fc"]
    gz2 = T.sigmoid_backward(z2, gprobs)
    gh1, grads["fc2.weight"] = T.matmul_backward(h1, p["fc2.weight"], gz2)
    grads["fc2.bias"] = gz2.sum(axis=0)
    gd1 = T.relu_backward(d1, gh1)
    gz1 = gd1 if mask is None else gd1 * mask
    gflat, grads["fc1.weight"] = T.matmul_backward(flat, p["fc1.weight"], gz1)
    grads["fc1.bias"] = gz1.sum(axis=0)

    if spec.variant == "eac":
        t, z, rows, cols, crops, heads = cache["eac"]
        gheads = layers.concat_regions_backward(heads, gflat)
        gcrops = []
        for k in range(NUM_REGIONS):
            hp = layers.RegionHeadParams(
                conv_kernel=p[f"head{k:02d}.conv.weight"],
                conv_bias=p[f"head{k:02d}.conv.bias"],
                fc_weight=p[f"head{k:02d}.fc.weight"],
                fc_bias=p[f"head{k:02d}.fc.bias"])
            gcrop, gparams = layers.region_head_backward(crops[k], hp, gheads[k])
            gcrops.append(gcrop)
            grads[f"head{k:02d}.conv.weight"] = gparams.conv_kernel
            grads[f"head{k:02d}.conv.bias"] = gparams.conv_bias
            grads[f"head{k:02d}.fc.weight"] = gparams.fc_weight
            grads[f"head{k:02d}.fc.bias"] = gparams.fc_bias
        gz = _scatter_crops(z.shape, rows, cols, gcrops)
        gx = layers.lrn_backward(t, gz)
    else:
        c5 = spec.channels[4]
        gx = gflat.reshape(cache["n"], c5, 7, 7)

    for gi in range(spec.num_groups, 0, -1):
        if gi < 5 and not (spec.variant == "eac" and gi == 4):
            gx = T.maxpool2_backward(cache["pools"][gi], gx)
        elif gi == 5:
            gx = T.maxpool2_backward(cache["pools"][gi], gx)
        genh = None
        if spec.has_enhance() and gi in ENHANCE_GROUPS:
            gx_in, a, modulated = cache[f"enh{gi}"]
            kname = f"enh{gi}.proj.weight"
            gmod, gk, _ = T.conv2d_backward(modulated, p[kname], gx)
            grads[kname] = gk
            genh = gmod * a[:, None]
        if gi < stop_before_group:
            break
        for ci in range(GROUP_CONVS[gi - 1], 0, -1):
            name = f"g{gi}.conv{ci}"
            x_in, z = cache["convs"][name]
            gz = T.relu_backward(z, gx)
            gx, gw, gb = T.conv2d_backward(x_in, p[f"{name}.weight"], gz,
                                           p[f"{name}.bias"], padding=1,
                                           cols=cache["cols"].get(name))
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
        if genh is not None:
            gx = gx + genh
    return grads


def extract_features(model: Model, images: np.ndarray, landmarks=None,
                     conditioning=None) -> np.ndarray:
    """Penultimate fully-connected activations (post-relu), eval mode."""
    _, taps = forward(model, images, landmarks=landmarks, conditioning=conditioning,
                      mode="eval", want_taps=True)
    return taps["features"]


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _spec_to_json(spec: NetworkSpec) -> bytes:
    doc = {"variant": spec.variant, "width_scale": spec.width_scale,
           "num_outputs": spec.num_outputs, "freeze_groups": list(spec.freeze_groups),
           "dropout_rate": spec.dropout_rate}
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def _spec_from_json(blob: bytes) -> NetworkSpec:
    doc = json.loads(blob.decode("utf-8"))
    return NetworkSpec(variant=doc["variant"], width_scale=doc["width_scale"],
                       num_outputs=doc["num_outputs"],
                       freeze_groups=tuple(doc["freeze_groups"]),
                       dropout_rate=doc["dropout_rate"])


def save(model: Model, path) -> None:
    """Write the versioned little-endian checkpoint (arrays as float32)."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    spec_json = _spec_to_json(model.spec)
    blob += struct.pack("<I", len(spec_json))
    blob += spec_json
    blob += struct.pack("<I", len(model.param_names))
    for name in model.param_names:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load(path, dtype=np.float32) -> Model:
    """Load a checkpoint, validating magic, version and tensor shapes."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
    (version,) = struct.unpack("<I", r.take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (spec_len,) = struct.unpack("<I", r.take(4))
    spec = _spec_from_json(r.take(spec_len))
    (count,) = struct.unpack("<I", r.take(4))
    expected = dict(_param_shapes(spec))
    if count != len(expected):
        raise CheckpointShapeError(f"checkpoint has {count} tensors, spec needs {len(expected)}")
    params: dict[str, np.ndarray] = {}
    names = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", r.take(1))
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        if name not in expected or tuple(shape) != tuple(expected[name]):
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {shape}, spec expects "
                f"{expected.get(name, 'no such tensor')}")
        size = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        params[name] = arr.astype(dtype)
        names.append(name)
    return Model(spec=spec, dtype=np.dtype(dtype), params=params, param_names=tuple(names))


def seed_from_checkpoint(model: Model, source: Model) -> list[str]:
    """Copy every shape-matching parameter from source; returns copied names."""
    copied = []
    for name in model.param_names:
        if name in source.params and source.params[name].shape == model.params[name].shape:
            model.params[name] = source.params[name].astype(model.dtype)
            copied.append(name)
    return copied


def load_pretrained_npz(model: Model, path) -> list[str]:
    """Optional externally-supplied weights, mapped by parameter name (npz)."""
    with np.load(path) as archive:
        copied = []
        for name in model.param_names:
            if name in archive and archive[name].shape == model.params[name].shape:
                model.params[name] = archive[name].astype(model.dtype)
                copied.append(name)
    return copied


# ---------------------------------------------------------------------------
# feature-map visualization
# ---------------------------------------------------------------------------

def _tiling(c: int) -> tuple[int, int]:
    """Pick rows x cols for c maps: r*c == c with r == 2*cols preferred."""
    pairs = [(r, c // r) for r in range(1, c + 1) if c % r == 0]
    usable = [(r, cc) for r, cc in pairs if r >= cc]
    best = min(usable, key=lambda rc: (abs(rc[0] - 2 * rc[1]), rc[0]))
    if best[1] == 1 and c > 4:
        cols = int(np.ceil(np.sqrt(c / 2)))
        return int(np.ceil(c / cols)), cols
    return best


def dump_feature_map(tap: np.ndarray, path) -> tuple[int, int]:
    """Tile tap[C,H,W] row-major into a grayscale PGM; returns (height, width).

    Each map is min-max normalized independently; constant maps render
    mid-gray; padding tiles (when C does not factor) stay black.
    """
    if tap.ndim != 4 and tap.ndim != 3:
        raise T.ShapeError(f"tap must be [C,H,W], got {tuple(tap.shape)}")
    if tap.ndim == 4:
        tap = tap[0]
    c, h, w = tap.shape
    rows, cols = _tiling(c)
    sheet = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(c):
        m = tap[i].astype(np.float64)
        lo, hi = m.min(), m.max()
        if hi - lo < 1e-30:
            tile = np.full((h, w), 128, dtype=np.uint8)
        else:
            tile = np.floor((m - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)
        r, cc = divmod(i, cols)
        sheet[r * h : (r + 1) * h, cc * w : (cc + 1) * w] = tile
    write_pnm(sheet, path)
    return sheet.shape
