"""Training: multi-label loss with stabilizing offsets, momentum SGD, the
minority-AU rebalancing sampler, the epoch loop, and the linear-regression
transfer head.

The loss per (sample, AU) is -[l*log((p+0.5)/1.05) + (1-l)*log((1.05-p)/1.05)]
with p the sigmoid output; the offsets keep every term (and its gradient)
finite over the whole closed interval p in [0,1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation, model as model_mod
from .aus import AU_IDS, AU_INDEX, MINORITY_AU_IDS, NUM_AUS
from .data import LoadedSample
from .tensor import ShapeError, sigmoid

log = logging.getLogger(__name__)

# slack so central finite differences at p=0 and p=1 stay inside the domain
_DOMAIN_TOL = 1e-4


class TrainingDivergedError(RuntimeError):
    pass


def default_multipliers() -> dict[int, float]:
    return {au: (5.0 if au in MINORITY_AU_IDS else 1.0) for au in AU_IDS}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    seed: int
    learning_rate: float = 0.0001
    momentum: float = 0.9
    minority_multipliers: dict[int, float] = field(default_factory=default_multipliers)

    def __post_init__(self):
        # 0 is allowed as an explicit dry-run (no-op updates)
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for au, m in self.minority_multipliers.items():
            if au not in AU_IDS or not 1.0 <= m <= 7.0:
                raise ValueError(f"multiplier for AU {au} must be in [1,7], got {m}")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss(p: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Offset cross entropy summed over all (sample, AU) terms.

    Returns (total, dtotal/dp with dtotal/dp = -l/(p+0.5) + (1-l)/(1.05-p)).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.min() < -_DOMAIN_TOL or p.max() > 1.0 + _DOMAIN_TOL:
        raise ValueError(f"probabilities outside [0,1]: range [{p.min()}, {p.max()}]")
    l = np.asarray(labels, dtype=np.float64)
    if l.shape != p.shape:
        raise ShapeError(f"labels shape {l.shape} != probs shape {p.shape}")
    total = -(l * np.log((p + 0.5) / 1.05) + (1 - l) * np.log((1.05 - p) / 1.05)).sum()
    grad = -l / (p + 0.5) + (1 - l) / (1.05 - p)
    return float(total), grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], cfg: TrainConfig,
             skip: set[str] = frozenset()) -> None:
    """Classical momentum: v <- mu*v - lr*g; theta <- theta + v. In place."""
    for name, g in grads.items():
        if name in skip:
            continue
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {theta.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
            velocity[name] = v
        v *= cfg.momentum
        v -= (cfg.learning_rate * g).astype(theta.dtype)
        theta += v


# ---------------------------------------------------------------------------
# rebalancing sampler
# ---------------------------------------------------------------------------

def sample_weights(labels: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Per-sample pick weight: max over active AUs of that AU's multiplier."""
    labels = np.asarray(labels)
    mult = np.array([cfg.minority_multipliers.get(au, 1.0) for au in AU_IDS])
    per_au = np.where(labels > 0, mult, 1.0)
    return per_au.max(axis=1) if labels.ndim == 2 else float(per_au.max())


def expected_balanced_rates(labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Exact per-AU marginals under weighted with-replacement sampling."""
    w = weights / weights.sum()
    return w @ labels


def calibrate_multipliers(labels: np.ndarray, targets: dict[int, float],
                          bounds: tuple[float, float] = (4.0, 7.0),
                          sweeps: int = 12, step: float = 0.05) -> dict[int, float]:
    """Fit minority multipliers within bounds by coordinate search.

    Minimizes the max absolute deviation of the expected post-balancing
    marginals from the targets (over the targeted AUs). Non-targeted AUs
    keep multiplier 1.
    """
    lo, hi = bounds
    mult = {au: (lo if au in targets else 1.0) for au in AU_IDS}
    grid = np.arange(lo, hi + step / 2, step)

    def objective(m: dict[int, float]) -> float:
        cfg_mult = np.array([m[au] for au in AU_IDS])
        per_au = np.where(labels > 0, cfg_mult, 1.0)
        rates = expected_balanced_rates(labels, per_au.max(axis=1))
        return max(abs(rates[AU_INDEX[au]] - t) for au, t in targets.items())

    best = objective(mult)
    for _ in range(sweeps):
        improved = False
        for au in targets:
            current = mult[au]
            for candidate in grid:
                mult[au] = float(candidate)
                val = objective(mult)
                if val < best - 1e-12:
                    best = val
                    current = float(candidate)
                    improved = True
            mult[au] = current
        if not improved:
            break
    return mult


def draw_balanced(labels: np.ndarray, cfg: TrainConfig, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Indices of `count` with-replacement draws, proportional to weights."""
    w = sample_weights(labels, cfg)
    return rng.choice(len(w), size=count, replace=True, p=w / w.sum())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss: float                 # mean per-sample loss over the epoch's steps
    mean_f1: float
    mean_accuracy: float
    f1: np.ndarray              # (12,)
    accuracy: np.ndarray        # (12,)


def stats_to_csv(stats: list[EpochStats]) -> str:
    header = ["epoch", "loss", "mean_f1", "mean_acc"]
    header += [f"f1_au{a}" for a in AU_IDS] + [f"acc_au{a}" for a in AU_IDS]
    lines = [",".join(header)]
    for s in stats:
        row = [str(s.epoch), f"{s.loss:.6f}", f"{s.mean_f1:.4f}", f"{s.mean_accuracy:.4f}"]
        row += [f"{v:.4f}" for v in s.f1] + [f"{v:.4f}" for v in s.accuracy]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _first_nonfinite_layer(m: model_mod.Model, cache: dict) -> str:
    for name in m.param_names:
        if not np.all(np.isfinite(m.params[name])):
            return f"parameter {name}"
    for name, (x_in, z) in cache.get("convs", {}).items():
        if not np.all(np.isfinite(z)):
            return name
    fc = cache.get("fc")
    if fc is not None:
        for label, t in zip(("fc1", "fc2"), (fc[1], fc[5])):
            if not np.all(np.isfinite(t)):
                return label
    return "output"


def predict(m: model_mod.Model, samples: list[LoadedSample],
            batch_size: int = 16, conditioning=None) -> np.ndarray:
    """Eval-mode probabilities for a sample list, in order."""
    probs = np.zeros((len(samples), NUM_AUS))
    cond = conditioning
    if cond is None and m.spec.has_enhance():
        cond = [model_mod.prepare_conditioning(s.landmarks) for s in samples]
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        ck = cond[start : start + len(chunk)] if cond is not None else None
        p, _ = model_mod.forward(m, images, conditioning=ck, mode="eval")
        probs[start : start + len(chunk)] = p
    return probs


def _metrics(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float, np.ndarray, np.ndarray]:
    preds = (probs >= 0.5).astype(np.int8)
    table = evaluation.f1_accuracy(evaluation.confusion(preds, labels))
    return table.mean_f1, table.mean_accuracy, table.f1, table.accuracy


def train(m: model_mod.Model, dataset: list[LoadedSample], cfg: TrainConfig,
          eval_set: list[LoadedSample] | None = None,
          callback=None) -> list[EpochStats]:
    """Run the training loop; returns per-epoch stats.

    Deterministic given cfg.seed. Metrics are computed on eval_set when
    given, else on the training set. callback(stats) may return True to
    stop early. Frozen groups are never updated.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    labels = np.stack([s.labels for s in dataset])
    cond = None
    if m.spec.has_enhance():
        cond = [model_mod.prepare_conditioning(s.landmarks) for s in dataset]
    eval_samples = eval_set if eval_set is not None else dataset
    eval_labels = np.stack([s.labels for s in eval_samples])
    eval_cond = None
    if m.spec.has_enhance():
        eval_cond = (cond if eval_set is None
                     else [model_mod.prepare_conditioning(s.landmarks) for s in eval_samples])

    frozen = m.frozen_param_names()
    stop_group = 1
    while stop_group in m.spec.freeze_groups:
        stop_group += 1
    sampler_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    velocity: dict[str, np.ndarray] = {}
    steps = max(1, int(np.ceil(len(dataset) / cfg.batch_size)))
    stats: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        picked = draw_balanced(labels, cfg, steps * cfg.batch_size, sampler_rng)
        epoch_loss = 0.0
        for step in range(steps):
            idx = picked[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            images = np.stack([dataset[i].image for i in idx])
            batch_cond = [cond[i] for i in idx] if cond is not None else None
            batch_labels = labels[idx]
            probs, cache = model_mod.forward_train(m, images, conditioning=batch_cond,
                                                   rng=dropout_rng)
            total, gp = loss(probs, batch_labels)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}; first offending "
                    f"layer: {_first_nonfinite_layer(m, cache)}")
            n = len(idx)
            epoch_loss += total / n
            grads = model_mod.backward(m, cache, (gp / n).astype(m.dtype),
                                       stop_before_group=stop_group)
            sgd_step(m.params, grads, velocity, cfg, skip=frozen)
        probs = predict(m, eval_samples, batch_size=cfg.batch_size, conditioning=eval_cond)
        mean_f1, mean_acc, f1, acc = _metrics(probs, eval_labels)
        entry = EpochStats(epoch=epoch, loss=epoch_loss / steps, mean_f1=mean_f1,
                           mean_accuracy=mean_acc, f1=f1, accuracy=acc)
        stats.append(entry)
        log.info("epoch %d: loss %.5f mean_f1 %.3f mean_acc %.3f",
                 epoch, entry.loss, mean_f1, mean_acc)
        if callback is not None and callback(entry):
            break
    return stats


# ---------------------------------------------------------------------------
# linear transfer head
# ---------------------------------------------------------------------------

def fit_linear_head(features: np.ndarray, labels: np.ndarray,
                    ridge: float = 0.0) -> np.ndarray:
    """Least-squares weights [F+1, K] (last row is the unpenalized intercept).

    Solved via lstsq on the (optionally ridge-augmented) design matrix;
    raises on singular systems when ridge == 0, advising a ridge penalty.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    m, f = x.shape
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    design = np.hstack([x, np.ones((m, 1))])
    target = y
    if ridge > 0:
        penalty = np.hstack([np.sqrt(ridge) * np.eye(f), np.zeros((f, 1))])
        design = np.vstack([design, penalty])
        target = np.vstack([y, np.zeros((f, y.shape[1]))])
    weights, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if ridge == 0.0 and rank < f + 1:
        raise np.linalg.LinAlgError(
            f"normal equations are singular (rank {rank} < {f + 1}); pass ridge > 0")
    return weights


def predict_linear_head(weights: np.ndarray, features: np.ndarray,
                        threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """(continuous predictions, binary predictions at the threshold)."""
    x = np.asarray(features, dtype=np.float64)
    raw = x @ weights[:-1] + weights[-1]
    return raw, (raw >= threshold).astype(np.int8)
