"""Finite-difference gradient suites for every op, layer and the full model.

Each check perturbs float64 inputs elementwise (central differences,
h = 1e-5) against a random-probe scalar S = sum(output * R) and compares
with the analytic backward pass. Tolerances follow the acceptance bar:
1e-5 relative for ops/layers, 1e-7 for the scalar loss, 1e-4 for the
whole-model parameter check.

All randomness is drawn from fixed seeds so results are reproducible.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import data, geometry, layers, model as model_mod, training
from . import tensor as T

H = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance

    def __str__(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.error:.3e} (tol {self.tolerance:.0e})"


def _fd(scalar_fn, arr: np.ndarray) -> np.ndarray:
    """Central differences of scalar_fn with respect to arr, in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + H
        fp = scalar_fn()
        flat[i] = orig - H
        fm = scalar_fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * H)
    return g


def _compare(name: str, scalar_fn, wrt: dict[str, np.ndarray],
             analytic: dict[str, np.ndarray], tol: float = 1e-5) -> CheckResult:
    worst = 0.0
    for key, arr in wrt.items():
        numeric = _fd(scalar_fn, arr)
        worst = max(worst, T.max_relative_error(analytic[key], numeric))
    return CheckResult(name=name, error=worst, tolerance=tol)


def _u(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


# ---------------------------------------------------------------------------
# tensor ops
# ---------------------------------------------------------------------------

def check_conv2d(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        kh, kw = rng.integers(1, 4), rng.integers(1, 4)
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h = int(rng.integers(max(kh, 3), 9))
        w = int(rng.integers(max(kw, 3), 9))
        x, k, b = _u(rng, (n, cin, h, w)), _u(rng, (cout, cin, kh, kw)), _u(rng, (cout,))
        probe = _u(rng, T.conv2d(x, k, b, stride, padding).shape)

        def s():
            return float((T.conv2d(x, k, b, stride, padding) * probe).sum())

        gx, gk, gb = T.conv2d_backward(x, k, probe, b, stride, padding)
        results.append(_compare(f"conv2d[{i}] s{stride}p{padding}k{kh}x{kw}", s,
                                {"x": x, "k": k, "b": b}, {"x": gx, "k": gk, "b": gb}))
    return results


def check_maxpool2(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5)))
        x = _u(rng, shape)
        probe = _u(rng, T.maxpool2(x)[0].shape)

        def s():
            return float((T.maxpool2(x)[0] * probe).sum())

        gx = T.maxpool2_backward(T.maxpool2(x)[1], probe)
        results.append(_compare(f"maxpool2[{i}] {shape[2]}x{shape[3]}", s, {"x": x}, {"x": gx}))
    return results


def check_matmul(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        m, k, p = (int(v) for v in rng.integers(1, 7, 3))
        a, b = _u(rng, (m, k)), _u(rng, (k, p))
        probe = _u(rng, (m, p))

        def s():
            return float((T.matmul(a, b) * probe).sum())

        ga, gb = T.matmul_backward(a, b, probe)
        results.append(_compare(f"matmul[{i}] {m}x{k}@{k}x{p}", s,
                                {"a": a, "b": b}, {"a": ga, "b": gb}))
    return results


def check_elementwise(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
        a, b = _u(rng, shape), _u(rng, shape)
        probe = _u(rng, shape)
        ga, gb = T.add_backward(a, b, probe)
        results.append(_compare(f"add[{i}]", lambda: float((T.add(a, b) * probe).sum()),
                                {"a": a, "b": b}, {"a": ga, "b": gb}))
        ga, gb = T.mul_backward(a, b, probe)
        results.append(_compare(f"mul[{i}]", lambda: float((T.mul(a, b) * probe).sum()),
                                {"a": a, "b": b}, {"a": ga, "b": gb}))
        factor = float(rng.uniform(0.5, 2.0))
        gx, _ = T.scale_backward(a, factor, probe)
        results.append(_compare(f"scale[{i}]", lambda: float((T.scale(a, factor) * probe).sum()),
                                {"a": a}, {"a": gx}))
    return results


def check_relu(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        x = _u(rng, shape)
        x += 0.05 * np.sign(x)  # keep clear of the kink at 0
        probe = _u(rng, shape)
        gx = T.relu_backward(x, probe)
        results.append(_compare(f"relu[{i}]", lambda: float((T.relu(x) * probe).sum()),
                                {"x": x}, {"x": gx}))
    return results


def check_sigmoid(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        x = _u(rng, shape) * 3
        probe = _u(rng, shape)
        gx = T.sigmoid_backward(x, probe)
        results.append(_compare(f"sigmoid[{i}]", lambda: float((T.sigmoid(x) * probe).sum()),
                                {"x": x}, {"x": gx}))
    return results


def check_upscale(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                 int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        x = _u(rng, shape)
        probe = _u(rng, T.nearest_upscale2x(x).shape)
        gx = T.nearest_upscale2x_backward(x, probe)
        results.append(_compare(f"nearest_upscale2x[{i}]",
                                lambda: float((T.nearest_upscale2x(x) * probe).sum()),
                                {"x": x}, {"x": gx}))
    return results


def check_bilinear(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        x = _u(rng, (int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        to = (int(rng.integers(1, 12)), int(rng.integers(1, 12)))
        probe = _u(rng, to)
        gx = T.bilinear_resize_backward(x, to, probe)
        results.append(_compare(f"bilinear_resize[{i}] {x.shape}->{to}",
                                lambda: float((T.bilinear_resize(x, to) * probe).sum()),
                                {"x": x}, {"x": gx}))
    return results


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _random_attention(rng) -> geometry.AttentionMap:
    return geometry.AttentionMap(grid=rng.uniform(0.0, 1.0, size=(100, 100)))


def check_enhance(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        n, cin, cout = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        x = _u(rng, (n, cin, h, w))
        g = _u(rng, (n, cout, h, w))
        kern = _u(rng, (cout, cin, 1, 1))
        a = _random_attention(rng)
        params = layers.EnhanceParams(projection_kernel=kern)
        probe = _u(rng, g.shape)

        def s():
            return float((layers.enhance_forward(x, g, a, params) * probe).sum())

        gx, gg, gk = layers.enhance_backward(x, g, a, params, probe)
        results.append(_compare(f"enhance[{i}]", s,
                                {"x": x, "g": g, "k": kern}, {"x": gx, "g": gg, "k": gk}))
    return results


def _canonical_centers() -> geometry.AUCenterSet:
    lm = data.schematic_landmarks(112.0, 112.0, 0.34 * 224, 0.40 * 224, 224)
    return geometry.au_centers(lm)


def check_crop(rng) -> list[CheckResult]:
    centers = _canonical_centers()
    results = []
    for i in range(5):
        f = _u(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 3)), 28, 28))
        probes = [_u(rng, (f.shape[0], f.shape[1], 3, 3)) for _ in range(20)]

        def s():
            crops = layers.crop_forward(f, centers)
            return float(sum((c * p).sum() for c, p in zip(crops, probes)))

        gf = layers.crop_backward(f.shape, centers, probes)
        results.append(_compare(f"crop[{i}]", s, {"f": f}, {"f": gf}))
    return results


def check_lrn(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 9)),
                 int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        x = _u(rng, shape) * 2
        probe = _u(rng, shape)
        gx = layers.lrn_backward(x, probe)
        results.append(_compare(f"lrn[{i}] C={shape[1]}",
                                lambda: float((layers.lrn(x) * probe).sum()),
                                {"x": x}, {"x": gx}))
    return results


def check_region_head(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        n, c, width = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 6))
        crop = _u(rng, (n, c, 3, 3))
        params = layers.RegionHeadParams(
            conv_kernel=_u(rng, (c, c, 3, 3)), conv_bias=_u(rng, (c,)),
            fc_weight=_u(rng, (c * 16, width)), fc_bias=_u(rng, (width,)))
        probe = _u(rng, (n, width))

        def s():
            return float((layers.region_head_forward(crop, params) * probe).sum())

        gcrop, gp = layers.region_head_backward(crop, params, probe)
        results.append(_compare(
            f"region_head[{i}]", s,
            {"crop": crop, "ck": params.conv_kernel, "cb": params.conv_bias,
             "fw": params.fc_weight, "fb": params.fc_bias},
            {"crop": gcrop, "ck": gp.conv_kernel, "cb": gp.conv_bias,
             "fw": gp.fc_weight, "fb": gp.fc_bias}))
    return results


def check_concat(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        n, width = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        heads = [_u(rng, (n, width)) for _ in range(20)]
        probe = _u(rng, (n, 20 * width))
        gheads = layers.concat_regions_backward(heads, probe)

        def s():
            return float((layers.concat_regions(heads) * probe).sum())

        worst = 0.0
        for k in (0, 7, 19):
            numeric = _fd(s, heads[k])
            worst = max(worst, T.max_relative_error(gheads[k], numeric))
        results.append(CheckResult(name=f"concat[{i}]", error=worst, tolerance=1e-5))
    return results


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def check_loss(rng) -> list[CheckResult]:
    results = []
    for i in range(5):
        shape = (int(rng.integers(1, 4)), 12)
        labels = (rng.random(shape) < 0.5).astype(np.float64)
        p = rng.uniform(0.02, 0.98, size=shape)
        _, gp = training.loss(p, labels)
        results.append(_compare(f"loss[{i}]", lambda: training.loss(p, labels)[0],
                                {"p": p}, {"p": gp}, tol=1e-7))
        z = _u(rng, shape) * 2
        _, gp2 = training.loss(T.sigmoid(z), labels)
        gz = T.sigmoid_backward(z, gp2)
        results.append(_compare(f"loss_sigmoid[{i}]",
                                lambda: training.loss(T.sigmoid(z), labels)[0],
                                {"z": z}, {"z": gz}))
    return results


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------

def run_model_check(width_scale: float = 1 / 16, fraction: float = 0.01,
                    cap: int | None = None, seed: int = 5150,
                    tol: float = 1e-4) -> CheckResult:
    """Central-difference check of d(probe . probs)/d(theta) on a random
    subset of parameters of a small full network (float64, 1 sample)."""
    rng = np.random.default_rng([seed])
    spec = model_mod.NetworkSpec(variant="eac", width_scale=width_scale,
                                 dropout_rate=0.0, freeze_groups=())
    m = model_mod.build(spec, seed=seed, dtype=np.float64)
    lm = data.schematic_landmarks(112.0, 112.0, 0.34 * 224, 0.40 * 224, 224)
    image = rng.random((1, 3, 224, 224))
    cond = [model_mod.prepare_conditioning(lm)]
    probe = rng.uniform(-1.0, 1.0, size=(1, spec.num_outputs))

    probs, cache = model_mod.forward_train(m, image, conditioning=cond, rng=None)
    grads = model_mod.backward(m, cache, probe)

    def scalar() -> float:
        p, _ = model_mod.forward(m, image, conditioning=cond, mode="eval")
        return float((p * probe).sum())

    total = sum(m.params[n].size for n in m.param_names)
    budget = int(np.ceil(total * fraction))
    if cap is not None:
        budget = min(budget, cap)
    # sample parameter coordinates proportionally to tensor size
    names = list(m.param_names)
    sizes = np.array([m.params[n].size for n in names], dtype=np.float64)
    picks = rng.choice(len(names), size=budget, p=sizes / sizes.sum())
    def fd_at(arr, j, h):
        orig = arr[j]
        arr[j] = orig + h
        fp = scalar()
        arr[j] = orig - h
        fm = scalar()
        arr[j] = orig
        return (fp - fm) / (2 * h)

    worst = 0.0
    for ni in picks:
        name = names[ni]
        arr = m.params[name].reshape(-1)
        j = int(rng.integers(arr.size))
        analytic = grads[name].reshape(-1)[j]
        err = T.max_relative_error(np.array(analytic), np.array(fd_at(arr, j, H)))
        if err > tol:
            # a relu/argmax kink inside [theta-h, theta+h]: shrink the step
            for h in (2e-6, 5e-7):
                err = min(err, T.max_relative_error(np.array(analytic),
                                                    np.array(fd_at(arr, j, h))))
                if err <= tol:
                    break
        worst = max(worst, err)
    return CheckResult(name=f"model.eac_s{1/width_scale:.0f} ({budget} params)",
                       error=worst, tolerance=tol)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

_TENSOR_CHECKS = (check_conv2d, check_maxpool2, check_matmul, check_elementwise,
                  check_relu, check_sigmoid, check_upscale, check_bilinear)
_LAYER_CHECKS = (check_enhance, check_crop, check_lrn, check_region_head, check_concat)


def run_suite(module: str = "all", seed: int = 977) -> list[CheckResult]:
    """Run the per-op/per-layer/loss suites; 'model' adds the slow full check."""
    results: list[CheckResult] = []
    if module in ("all", "tensor"):
        for check in _TENSOR_CHECKS:
            results.extend(check(np.random.default_rng([seed, zlib_id(check.__name__)])))
    if module in ("all", "layers"):
        for check in _LAYER_CHECKS:
            results.extend(check(np.random.default_rng([seed, zlib_id(check.__name__)])))
    if module in ("all", "loss"):
        results.extend(check_loss(np.random.default_rng([seed, zlib_id("check_loss")])))
    if module == "model":
        results.append(run_model_check())
    return results


def zlib_id(name: str) -> int:
    return zlib.crc32(name.encode())
