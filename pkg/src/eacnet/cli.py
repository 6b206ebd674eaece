"""Command-line interface: the full pipeline as subcommands.

Exit codes: 0 success, 1 flag/validation error, 2 runtime error. All file
outputs are written atomically (temp file + rename). EAC_THREADS caps the
worker pool used for parallel sample loading.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, evaluation, geometry, gradcheck, model as model_mod, training
from .aus import AU_IDS


class CliValidationError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(message)


def worker_count() -> int:
    raw = os.environ.get("EAC_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return min(4, os.cpu_count() or 1)


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliValidationError(f"{flag}: file not found: {p}")
    return p


def _atomic_write(path: Path, payload: str | bytes) -> None:
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(payload)
    os.replace(tmp, path)


def _load_samples_parallel(records):
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(lambda r: data.load_samples([r])[0], records))


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {"learning_rate", "momentum", "epochs", "batch_size", "seed",
                "width_scale", "dropout_rate"}
_CONFIG_KEYS |= {f"multiplier_au{a}" for a in AU_IDS}


def parse_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliValidationError(f"--config: line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise CliValidationError(f"--config: line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _atomic_file_op(path: Path, write_fn) -> None:
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    write_fn(tmp)
    os.replace(tmp, path)


def cmd_attention(args) -> int:
    lm = geometry.read_landmarks_json(_require_file(args.landmarks, "--landmarks"))
    amap = geometry.attention_map(geometry.au_centers(lm))
    base = args.out[:-4] if args.out.endswith(".pgm") else args.out
    _atomic_file_op(Path(base + ".pgm"), lambda p: geometry.write_attention_pgm(amap, p))
    _atomic_file_op(Path(base + ".raw"), lambda p: geometry.write_attention_raw(amap, p))
    print(f"wrote {base}.pgm and {base}.raw (max weight {amap.grid.max():.3f})")
    return 0


def cmd_centers(args) -> int:
    lm = geometry.read_landmarks_json(_require_file(args.landmarks, "--landmarks"))
    centers = geometry.au_centers(lm)
    doc = {
        "scale_d": centers.scale_d,
        "centers": [
            {"au_ids": list(c.au_ids), "side": c.side,
             "x": round(c.position[0], 4), "y": round(c.position[1], 4)}
            for c in centers.centers
        ],
    }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_synth(args) -> int:
    doc = json.loads(_require_file(args.spec, "--spec").read_text(encoding="utf-8"))
    if args.count is not None:
        doc["count"] = args.count
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = data.SynthSpec(
            count=int(doc["count"]), seed=int(doc["seed"]),
            au_probabilities=tuple(doc["au_probabilities"]),
            deformation_magnitude=float(doc.get("deformation_magnitude", 0.35)),
            image_size=int(doc.get("image_size", data.INPUT_SIZE)))
    except (KeyError, TypeError, ValueError) as e:
        raise CliValidationError(f"--spec: invalid synthesis spec: {e}") from e
    records = data.generate_synthetic(spec, args.out)
    print(f"wrote {len(records)} samples and manifest.csv under {args.out}")
    return 0


def _config_value(cfg: dict, flags, key: str, cast, default=None, required=False):
    flag_val = getattr(flags, key, None)
    if flag_val is not None:
        return flag_val
    if key in cfg:
        try:
            return cast(cfg[key])
        except ValueError as e:
            raise CliValidationError(f"--config: bad value for {key}: {e}") from e
    if required:
        raise CliValidationError(f"{key} must be set via --config or flag")
    return default


def cmd_train(args) -> int:
    cfg_file = parse_config_file(_require_file(args.config, "--config")) if args.config else {}
    records = data.load_manifest(_require_file(args.manifest, "--manifest"))
    if not records:
        raise CliValidationError("--manifest: no samples")
    multipliers = training.default_multipliers()
    for au in AU_IDS:
        key = f"multiplier_au{au}"
        if key in cfg_file:
            multipliers[au] = float(cfg_file[key])
    cfg = training.TrainConfig(
        epochs=_config_value(cfg_file, args, "epochs", int, required=True),
        batch_size=_config_value(cfg_file, args, "batch_size", int, required=True),
        seed=_config_value(cfg_file, args, "seed", int, default=0),
        learning_rate=_config_value(cfg_file, args, "learning_rate", float, default=0.0001),
        momentum=_config_value(cfg_file, args, "momentum", float, default=0.9),
        minority_multipliers=multipliers)
    spec = model_mod.NetworkSpec(
        variant=args.variant,
        width_scale=_config_value(cfg_file, args, "width_scale", float, default=1.0),
        dropout_rate=_config_value(cfg_file, args, "dropout_rate", float, default=0.5))
    dtype = np.float64 if args.float64 else np.float32
    m = model_mod.build(spec, seed=cfg.seed, dtype=dtype)
    if args.init:
        source = model_mod.load(_require_file(args.init, "--init"), dtype=dtype)
        copied = model_mod.seed_from_checkpoint(m, source)
        print(f"seeded {len(copied)} tensors from {args.init}")
    samples = _load_samples_parallel(records)
    stats = training.train(m, samples, cfg)
    model_mod.save(m, args.out)
    if args.log:
        _atomic_write(Path(args.log), training.stats_to_csv(stats))
    last = stats[-1]
    print(f"trained {cfg.epochs} epoch(s); final loss {last.loss:.5f} "
          f"mean_f1 {last.mean_f1:.3f}; checkpoint -> {args.out}")
    return 0


def _predictions(m, samples, batch_size=16):
    probs = training.predict(m, samples, batch_size=batch_size)
    return (probs >= 0.5).astype(np.int8)


def cmd_eval(args) -> int:
    m = model_mod.load(_require_file(args.ckpt, "--ckpt"))
    records = data.load_manifest(_require_file(args.manifest, "--manifest"))
    if not records:
        raise CliValidationError("--manifest: no samples")
    samples = _load_samples_parallel(records)
    labels = np.stack([s.labels for s in samples])
    preds = _predictions(m, samples)
    tables: dict[str, evaluation.MetricsTable] = {}
    if args.folds:
        folds = evaluation.subject_folds([s.subject_id for s in samples],
                                         k=args.folds, seed=args.seed)
        per_fold = []
        for f in range(args.folds):
            mask = folds == f
            table = evaluation.f1_accuracy(evaluation.confusion(preds[mask], labels[mask]))
            tables[f"fold{f}"] = table
            per_fold.append(table)
        tables["avg"] = evaluation.MetricsTable(
            f1=np.mean([t.f1 for t in per_fold], axis=0),
            accuracy=np.mean([t.accuracy for t in per_fold], axis=0),
            mean_f1=float(np.mean([t.mean_f1 for t in per_fold])),
            mean_accuracy=float(np.mean([t.mean_accuracy for t in per_fold])))
    else:
        tables["all"] = evaluation.f1_accuracy(evaluation.confusion(preds, labels))
    print("F1")
    print(evaluation.metrics_to_text(tables, "f1"))
    print("Accuracy")
    print(evaluation.metrics_to_text(tables, "accuracy"))
    if args.out:
        csv = ("metric=f1\n" + evaluation.metrics_to_csv(tables, "f1")
               + "metric=accuracy\n" + evaluation.metrics_to_csv(tables, "accuracy"))
        _atomic_write(Path(args.out), csv)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.module, seed=args.seed)
    for r in results:
        print(r)
    failures = [r for r in results if not r.passed]
    if failures:
        raise RuntimeError(f"{len(failures)} gradient check(s) failed")
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_featmap(args) -> int:
    m = model_mod.load(_require_file(args.ckpt, "--ckpt"))
    image = data.load_image(_require_file(args.image, "--image"))
    lm = geometry.read_landmarks_json(_require_file(args.landmarks, "--landmarks"))
    _, taps = model_mod.forward(m, image[None], landmarks=lm, want_taps=True)
    if args.tap not in taps:
        raise CliValidationError(
            f"--tap: unknown tap {args.tap!r}; available: {sorted(t for t in taps if isinstance(taps[t], np.ndarray))}")
    shape = []
    _atomic_file_op(Path(args.out),
                    lambda p: shape.extend(model_mod.dump_feature_map(np.asarray(taps[args.tap])[0], p)))
    print(f"wrote {args.out} ({shape[0]}x{shape[1]})")
    return 0


def cmd_transfer(args) -> int:
    m = model_mod.load(_require_file(args.ckpt, "--ckpt"))
    records = data.load_manifest(_require_file(args.manifest, "--manifest"))
    if not records:
        raise CliValidationError("--manifest: no samples")
    if not 1 <= args.labels <= len(AU_IDS):
        raise CliValidationError(f"--labels: must be in 1..{len(AU_IDS)}, got {args.labels}")
    samples = _load_samples_parallel(records)
    labels = np.stack([s.labels for s in samples])[:, : args.labels]
    features = np.concatenate([
        model_mod.extract_features(
            m, np.stack([s.image for s in samples[i : i + 16]]),
            landmarks=[s.landmarks for s in samples[i : i + 16]])
        for i in range(0, len(samples), 16)])
    folds = evaluation.subject_folds([s.subject_id for s in samples],
                                     k=args.folds, seed=args.seed)
    preds = np.zeros_like(labels)
    for f in range(args.folds):
        test = folds == f
        w = training.fit_linear_head(features[~test], labels[~test], ridge=args.ridge)
        _, preds[test] = training.predict_linear_head(w, features[test])
    table = evaluation.f1_accuracy(
        evaluation.confusion(preds, labels, au_ids=AU_IDS[: args.labels]))
    print(evaluation.metrics_to_text({"transfer": table}, "f1"))
    print(evaluation.metrics_to_text({"transfer": table}, "accuracy"))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="eacnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attention", help="render the attention map for a landmark file")
    p.add_argument("--landmarks", required=True, help="landmarks JSON file")
    p.add_argument("--out", required=True,
                   help="output path; writes <out>.pgm (16-bit) and <out>.raw")
    p.set_defaults(fn=cmd_attention)

    p = sub.add_parser("centers", help="print the 20 AU centers as JSON")
    p.add_argument("--landmarks", required=True, help="landmarks JSON file")
    p.set_defaults(fn=cmd_centers)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--spec", required=True, help="synthesis spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="override spec count")
    p.add_argument("--seed", type=int, help="override spec seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model variant on a manifest")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", required=True, choices=model_mod.VARIANTS)
    p.add_argument("--init", help="checkpoint used to seed shape-matching tensors")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="write the per-epoch CSV log here")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--width-scale", dest="width_scale", type=float)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    p.add_argument("--float64", action="store_true", help="train in float64")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=0,
                   help="subject folds (0 = single table over all samples)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the CSV tables here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--module", default="all",
                   choices=("all", "tensor", "layers", "loss", "model"))
    p.add_argument("--seed", type=int, default=977)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("featmap", help="dump a tiled feature-map image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PGM/PPM input image")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--tap", default="group4")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(fn=cmd_featmap)

    p = sub.add_parser("transfer", help="linear-regression transfer protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", type=int, required=True,
                   help="number of leading AU columns to predict")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_transfer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (data.ManifestError, data.ImageFormatError, geometry.DegenerateLandmarksError,
            ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
