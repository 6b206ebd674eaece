import math

import numpy as np
import numpy.testing as npt
import pytest

from eacnet import data, model as M, training
from eacnet.aus import AU_IDS, AU_INDEX, MINORITY_AU_IDS

TABLE_ORIGINAL = dict(zip(AU_IDS, [0.24, 0.18, 0.23, 0.44, 0.52, 0.58,
                                   0.57, 0.43, 0.15, 0.36, 0.19, 0.16]))
TABLE_BALANCED = dict(zip(AU_IDS, [0.39, 0.32, 0.33, 0.45, 0.54, 0.60,
                                   0.56, 0.49, 0.30, 0.50, 0.33, 0.30]))


def correlated_population(m: int, seed: int, p_cluster: float = 0.5) -> np.ndarray:
    """Binary labels with the reference occurrence rates and minority
    co-occurrence concentrated in an 'expressive' cluster of samples."""
    rng = np.random.default_rng([seed])
    active = rng.random(m) < p_cluster
    labels = np.zeros((m, 12), dtype=np.int8)
    for j, au in enumerate(AU_IDS):
        p = TABLE_ORIGINAL[au]
        if au in MINORITY_AU_IDS:
            labels[active, j] = rng.random(int(active.sum())) < p / p_cluster
        else:
            labels[:, j] = rng.random(m) < p
    return labels


def tiny_config(**kw):
    defaults = dict(epochs=1, batch_size=4, seed=0)
    defaults.update(kw)
    return training.TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_spot_values():
    total, _ = training.loss(np.array([[0.5]]), np.array([[1.0]]))
    assert total == pytest.approx(math.log(1.05), abs=1e-12)
    total, _ = training.loss(np.array([[0.5]]), np.array([[0.0]]))
    assert total == pytest.approx(math.log(1.05 / 0.55), abs=1e-12)
    total, _ = training.loss(np.array([[1.0]]), np.array([[1.0]]))
    assert total == pytest.approx(math.log(1.05 / 1.5), abs=1e-12)
    assert total < 0  # the offsets bound the loss below zero at p=1


def test_loss_finite_on_whole_interval():
    p = np.array([[0.0, 0.25, 0.5, 0.75, 1.0]])
    for label in (0.0, 1.0):
        total, grad = training.loss(p, np.full_like(p, label))
        assert np.isfinite(total) and np.all(np.isfinite(grad))


def test_loss_gradient_matches_central_differences_1e7():
    h = 1e-5
    for p0 in (0.0, 0.25, 0.5, 0.75, 1.0):
        for label in (0.0, 1.0):
            p = np.array([[p0]])
            l = np.array([[label]])
            _, grad = training.loss(p, l)
            fp, _ = training.loss(p + h, l)
            fm, _ = training.loss(p - h, l)
            numeric = (fp - fm) / (2 * h)
            denom = max(abs(grad[0, 0]), abs(numeric), 1e-8)
            assert abs(grad[0, 0] - numeric) / denom <= 1e-7, (p0, label)


def test_loss_monotone_in_p():
    p = np.linspace(0, 1, 101)[None]
    _, g1 = training.loss(p, np.ones_like(p))
    assert np.all(g1 < 0)      # loss strictly decreasing for positive labels
    _, g0 = training.loss(p, np.zeros_like(p))
    assert np.all(g0 > 0)      # strictly increasing for negative labels


def test_loss_domain_error():
    with pytest.raises(ValueError, match="outside"):
        training.loss(np.array([[1.2]]), np.array([[1.0]]))
    with pytest.raises(ValueError, match="outside"):
        training.loss(np.array([[-0.1]]), np.array([[0.0]]))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_sgd_plain_step():
    params = {"w": np.array([1.0])}
    vel = {}
    cfg = tiny_config(learning_rate=0.1, momentum=0.0)
    training.sgd_step(params, {"w": np.array([2.0])}, vel, cfg)
    npt.assert_allclose(params["w"], [0.8], rtol=1e-15)


def test_sgd_velocity_decays_geometrically():
    params = {"w": np.array([0.0])}
    vel = {}
    cfg = tiny_config(learning_rate=1.0, momentum=0.5)
    training.sgd_step(params, {"w": np.array([1.0])}, vel, cfg)
    v0 = vel["w"].copy()
    for _ in range(3):
        training.sgd_step(params, {"w": np.array([0.0])}, vel, cfg)
    npt.assert_allclose(vel["w"], v0 * 0.5**3, rtol=1e-15)


def test_sgd_two_steps_unrolled():
    params = {"w": np.array([10.0])}
    vel = {}
    cfg = tiny_config(learning_rate=0.0001, momentum=0.9)
    for _ in range(2):
        training.sgd_step(params, {"w": np.array([1.0])}, vel, cfg)
    npt.assert_allclose(params["w"], [10.0 - 0.0001 * (1 + 1.9)], rtol=1e-12)


def test_sgd_skips_frozen():
    params = {"a": np.array([1.0]), "b": np.array([1.0])}
    cfg = tiny_config(learning_rate=0.1, momentum=0.0)
    training.sgd_step(params, {"a": np.array([1.0]), "b": np.array([1.0])}, {}, cfg,
                      skip={"a"})
    npt.assert_allclose(params["a"], [1.0])
    npt.assert_allclose(params["b"], [0.9])


# ---------------------------------------------------------------------------
# rebalancing sampler
# ---------------------------------------------------------------------------

def test_sample_weights_basic():
    cfg = tiny_config(minority_multipliers={1: 5.0, 6: 1.0})
    labels = np.zeros((3, 12), dtype=int)
    labels[0, AU_INDEX[6]] = 1                 # majority-only positive
    labels[1, AU_INDEX[1]] = 1                 # minority AU1, multiplier 5
    w = training.sample_weights(labels, cfg)
    npt.assert_allclose(w, [1.0, 5.0, 1.0])


def test_sample_weights_takes_max_over_aus():
    cfg = tiny_config(minority_multipliers={1: 5.0, 2: 7.0})
    labels = np.zeros((1, 12), dtype=int)
    labels[0, AU_INDEX[1]] = 1
    labels[0, AU_INDEX[2]] = 1
    assert training.sample_weights(labels, cfg)[0] == 7.0


def test_multiplier_validation():
    with pytest.raises(ValueError):
        tiny_config(minority_multipliers={1: 9.0})
    with pytest.raises(ValueError):
        tiny_config(minority_multipliers={99: 2.0})


def test_weighted_draws_raise_minority_occurrence():
    labels = correlated_population(20000, seed=3)
    cfg = tiny_config()
    baseline = labels.mean(axis=0)
    idx = training.draw_balanced(labels, cfg, 100000, np.random.default_rng([11]))
    boosted = labels[idx].mean(axis=0)
    for au in MINORITY_AU_IDS:
        assert boosted[AU_INDEX[au]] > baseline[AU_INDEX[au]]


def test_calibrated_multipliers_stay_in_band_and_move_rates_toward_targets():
    labels = correlated_population(20000, seed=5)
    targets = {au: TABLE_BALANCED[au] for au in MINORITY_AU_IDS}
    mult = training.calibrate_multipliers(labels, targets, sweeps=4, step=0.25)
    for au in MINORITY_AU_IDS:
        assert 4.0 <= mult[au] <= 7.0
    cfg = tiny_config(minority_multipliers=mult)
    rates = training.expected_balanced_rates(labels, training.sample_weights(labels, cfg))
    for au in MINORITY_AU_IDS:
        before = abs(labels.mean(axis=0)[AU_INDEX[au]] - targets[au])
        after = abs(rates[AU_INDEX[au]] - targets[au])
        assert after < before


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyds")
    records = data.generate_synthetic(
        data.SynthSpec(count=6, seed=13, au_probabilities=(0.5,) * 12), out)
    return data.load_samples(records)


def test_train_lr_zero_keeps_parameters(tiny_dataset):
    m = M.build(M.NetworkSpec(variant="fvgg", width_scale=1 / 16), seed=21)
    before = {n: v.copy() for n, v in m.params.items()}
    stats = training.train(m, tiny_dataset, tiny_config(learning_rate=0.0, epochs=1))
    assert len(stats) == 1
    for n, v in m.params.items():
        npt.assert_array_equal(v, before[n])


def test_train_updates_unfrozen_and_respects_freeze(tiny_dataset):
    m = M.build(M.NetworkSpec(variant="fvgg", width_scale=1 / 16), seed=22)
    before = {n: v.copy() for n, v in m.params.items()}
    training.train(m, tiny_dataset, tiny_config(learning_rate=0.01, epochs=1))
    # default fvgg freeze: groups 1-3 unchanged
    for n in m.param_names:
        if n.startswith(("g1.", "g2.", "g3.")):
            npt.assert_array_equal(m.params[n], before[n])
    assert not np.array_equal(m.params["g4.conv1.weight"], before["g4.conv1.weight"])
    assert not np.array_equal(m.params["fc1.weight"], before["fc1.weight"])


def test_train_deterministic_bit_identical_checkpoints_float64(tiny_dataset, tmp_path):
    paths = []
    for run in ("a", "b"):
        m = M.build(M.NetworkSpec(variant="enet", width_scale=1 / 16, dropout_rate=0.3),
                    seed=30, dtype=np.float64)
        training.train(m, tiny_dataset, tiny_config(learning_rate=0.005, epochs=2))
        p = tmp_path / f"{run}.ckpt"
        M.save(m, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_seeding_eac_from_enet_checkpoint(tiny_dataset, tmp_path):
    enet = M.build(M.NetworkSpec(variant="enet", width_scale=1 / 16), seed=31)
    eac = M.build(M.NetworkSpec(variant="eac", width_scale=1 / 16), seed=32)
    fresh = {n: v.copy() for n, v in eac.params.items()}
    copied = M.seed_from_checkpoint(eac, enet)
    for n in copied:
        npt.assert_array_equal(eac.params[n], enet.params[n])
    changed = [n for n in eac.param_names if not np.array_equal(eac.params[n], fresh[n])]
    assert set(changed) <= set(copied) and "g3.conv1.weight" in changed


def test_train_aborts_on_nonfinite_loss(tiny_dataset):
    m = M.build(M.NetworkSpec(variant="fvgg", width_scale=1 / 16), seed=33)
    m.params["g4.conv1.weight"][:] = np.nan
    with pytest.raises(training.TrainingDivergedError, match="g4.conv1"):
        training.train(m, tiny_dataset, tiny_config(epochs=1))


def test_train_callback_early_stop(tiny_dataset):
    m = M.build(M.NetworkSpec(variant="fvgg", width_scale=1 / 16), seed=34)
    stats = training.train(m, tiny_dataset, tiny_config(epochs=5),
                           callback=lambda s: s.epoch >= 2)
    assert len(stats) == 2


def test_stats_csv_layout(tiny_dataset):
    m = M.build(M.NetworkSpec(variant="fvgg", width_scale=1 / 16), seed=35)
    stats = training.train(m, tiny_dataset, tiny_config(epochs=1))
    csv = training.stats_to_csv(stats)
    header = csv.splitlines()[0].split(",")
    assert header[:4] == ["epoch", "loss", "mean_f1", "mean_acc"]
    assert "f1_au12" in header and "acc_au24" in header
    assert len(csv.splitlines()) == 2


# ---------------------------------------------------------------------------
# linear transfer head
# ---------------------------------------------------------------------------

def test_linear_head_exact_recovery(rng):
    x = rng.standard_normal((50, 6))
    w_true = rng.standard_normal((6, 3))
    b_true = rng.standard_normal(3)
    y = x @ w_true + b_true
    w = training.fit_linear_head(x, y, ridge=0.0)
    raw, _ = training.predict_linear_head(w, x)
    assert np.abs(raw - y).max() <= 1e-8


def test_linear_head_ridge_limit_is_label_mean(rng):
    x = rng.standard_normal((40, 5))
    y = rng.random((40, 2))
    w = training.fit_linear_head(x, y, ridge=1e12)
    assert np.abs(w[:-1]).max() < 1e-6
    npt.assert_allclose(w[-1], y.mean(axis=0), atol=1e-5)


def test_linear_head_matches_normal_equations_oracle(rng):
    x = rng.standard_normal((100, 8))
    y = (rng.random((100, 8)) < 0.4).astype(float)
    for ridge in (0.0, 0.5):
        w = training.fit_linear_head(x, y, ridge=ridge)
        design = np.hstack([x, np.ones((100, 1))])
        reg = ridge * np.eye(9)
        reg[8, 8] = 0.0
        w_oracle = np.linalg.solve(design.T @ design + reg, design.T @ y)
        assert np.abs(w - w_oracle).max() <= 1e-6


def test_linear_head_singular_advises_ridge(rng):
    x = np.zeros((10, 4))
    x[:, 0] = rng.standard_normal(10)
    x[:, 1] = x[:, 0]  # exact collinearity
    with pytest.raises(np.linalg.LinAlgError, match="ridge"):
        training.fit_linear_head(x, rng.random((10, 2)), ridge=0.0)
    training.fit_linear_head(x, rng.random((10, 2)), ridge=1e-3)  # works


def test_linear_head_threshold():
    w = np.array([[1.0], [0.0]])  # y = x
    raw, binary = training.predict_linear_head(w, np.array([[0.4], [0.6]]))
    npt.assert_array_equal(binary, [[0], [1]])
