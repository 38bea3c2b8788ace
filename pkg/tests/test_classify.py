import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from buildage import classify, imaging
from buildage.errors import (
    DecodeError,
    DegenerateDatasetError,
    EmptyInputError,
    IoError,
    LengthMismatchError,
    ParseError,
    ShapeMismatchError,
    WrongClassCountError,
)


def _flat_patch(r, g, b, side=8):
    patch = np.zeros((side, side, 3), dtype=np.uint8)
    patch[..., 0], patch[..., 1], patch[..., 2] = r, g, b
    return patch


# --- features ---------------------------------------------------------------------


def test_color_histogram_bins_by_high_nibble():
    black = classify.color_histograms(_flat_patch(0, 0, 0)[None])[0]
    assert black.shape == (48,)
    assert black[0] == 1.0 and black[16] == 1.0 and black[32] == 1.0
    assert black.sum() == pytest.approx(3.0)

    gray = classify.color_histograms(_flat_patch(128, 128, 128)[None])[0]
    assert gray[8] == 1.0 and gray[16 + 8] == 1.0 and gray[32 + 8] == 1.0

    white = classify.color_histograms(_flat_patch(255, 255, 255)[None])[0]
    assert white[15] == 1.0 and white[31] == 1.0 and white[47] == 1.0


def test_color_histogram_is_l1_normalized_per_channel(rng):
    patch = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    hist = classify.color_histograms(patch[None])[0]
    for c in range(3):
        assert hist[16 * c:16 * (c + 1)].sum() == pytest.approx(1.0)


def test_featurize_layout_sift_then_color():
    feats = classify.featurize(_flat_patch(200, 40, 90, side=16))
    assert feats.shape == (176,)
    assert np.all(feats[:128] == 0.0)        # constant patch: no gradients
    assert feats[128 + 12] == 1.0            # 200 >> 4 = 12
    assert feats[144 + 2] == 1.0             # 40 >> 4 = 2
    assert feats[160 + 5] == 1.0             # 90 >> 4 = 5


def test_featurize_batch_matches_single(rng):
    pix = rng.integers(0, 256, (6, 24, 24, 3), dtype=np.uint8)
    batch = classify.featurize_batch(pix)
    for i in range(6):
        assert np.array_equal(batch[i], classify.featurize(pix[i]))


def test_featurize_handles_mixed_patch_sizes(rng):
    small = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    big = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
    batch = classify.featurize_batch([small, big])
    assert batch.shape == (2, 176)
    assert np.array_equal(batch[0], classify.featurize(small))
    assert np.array_equal(batch[1], classify.featurize(big))


# --- model mechanics -----------------------------------------------------------------


@given(st.integers(0, 1000))
def test_softmax_sums_to_one(seed):
    logits = np.random.default_rng(seed).normal(0, 5, (3, 7))
    probs = classify.softmax(logits)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(probs >= 0.0)


def test_softmax_survives_huge_logits():
    probs = classify.softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert probs[0, 0] == pytest.approx(1.0)
    assert np.isfinite(probs).all()


def test_init_model_glorot_bounds_and_zero_biases():
    model = classify.init_model(classify.ARCH_MLP, 176, 6, 64, seed=3)
    w1, w2 = model.params["w1"], model.params["w2"]
    assert w1.shape == (64, 176) and w2.shape == (6, 64)
    assert np.all(model.params["b1"] == 0.0)
    assert np.all(model.params["b2"] == 0.0)
    assert np.abs(w1).max() <= np.sqrt(6.0 / (176 + 64))
    assert np.abs(w2).max() <= np.sqrt(6.0 / (64 + 6))
    again = classify.init_model(classify.ARCH_MLP, 176, 6, 64, seed=3)
    assert np.array_equal(w1, again.params["w1"])

    linear = classify.init_model(classify.ARCH_LINEAR, 10, 4, 64, seed=0)
    assert linear.params["w"].shape == (4, 10)
    assert np.abs(linear.params["w"]).max() <= np.sqrt(6.0 / 14)


def test_predict_matches_batch_and_validates_shape(rng):
    model = classify.init_model(classify.ARCH_LINEAR, 12, 5, 64, seed=1)
    x = rng.normal(0, 1, (4, 12))
    batch = classify.predict_batch(model, x)
    assert batch.shape == (4, 5)
    assert np.allclose(batch.sum(axis=1), 1.0)
    assert np.array_equal(classify.predict(model, x[2]), batch[2])
    with pytest.raises(ShapeMismatchError):
        classify.predict(model, np.zeros(11))


def test_ensemble_is_the_mean_distribution(rng):
    a = classify.init_model(classify.ARCH_LINEAR, 8, 3, 64, seed=1)
    b = classify.init_model(classify.ARCH_MLP, 8, 3, 5, seed=2)
    x = rng.normal(0, 1, (6, 8))
    expected = (classify.predict_batch(a, x) + classify.predict_batch(b, x)) / 2
    assert np.allclose(classify.ensemble_predict_batch([a, b], x), expected)
    assert np.allclose(classify.ensemble_predict([a, b], x[0]), expected[0])


def test_ensemble_validation():
    with pytest.raises(EmptyInputError):
        classify.ensemble_predict([], np.zeros(8))
    a = classify.init_model(classify.ARCH_LINEAR, 8, 3, 64, seed=1)
    b = classify.init_model(classify.ARCH_LINEAR, 8, 4, 64, seed=1)
    with pytest.raises(ShapeMismatchError):
        classify.ensemble_predict([a, b], np.zeros(8))


# --- gradients and the SGD update -----------------------------------------------------


def _finite_difference_check(arch, seed, n=6, feature_dim=7, n_classes=4,
                             hidden=5, decay=0.02, step=1e-5):
    rng = np.random.default_rng(seed)
    model = classify.init_model(arch, feature_dim, n_classes, hidden, seed=seed)
    x = rng.normal(0, 1.5, (n, feature_dim))
    y = rng.integers(0, n_classes, n)
    if arch == classify.ARCH_MLP:
        # keep ReLU preactivations away from the kink where the analytic
        # derivative is one-sided
        pre = x @ model.params["w1"].T + model.params["b1"]
        if np.abs(pre).min() < 1e-3:
            return None
    obj, _, grads = classify.objective_and_grads(model, x, y, decay)
    worst = 0.0
    for name, grad in grads.items():
        flat = model.params[name].ravel()
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up, _, _ = classify.objective_and_grads(model, x, y, decay)
            flat[j] = keep - step
            down, _, _ = classify.objective_and_grads(model, x, y, decay)
            flat[j] = keep
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(grad.ravel()[j]), 1e-8)
            worst = max(worst, abs(numeric - grad.ravel()[j]) / denom)
    return worst


@pytest.mark.parametrize("arch", [classify.ARCH_LINEAR, classify.ARCH_MLP])
def test_analytic_gradients_match_finite_differences(arch):
    checked = 0
    for seed in range(40):
        worst = _finite_difference_check(arch, seed)
        if worst is None:
            continue
        assert worst < 1e-4, f"seed {seed}: relative error {worst}"
        checked += 1
        if checked == 10:
            break
    assert checked == 10


def test_one_sgd_step_matches_hand_computation(rng):
    x = rng.normal(0, 1, (8, 5))
    y = rng.integers(0, 3, 8)
    cfg = classify.TrainConfig(learning_rate=0.1, weight_decay=0.01,
                               momentum=0.9, batch_size=8, epochs=1,
                               seed=21, augment=False)
    result = classify.train(x, y, classify.ARCH_LINEAR, cfg, n_classes=3)

    # replay: same init, same permutation stream, one full-batch step
    model = classify.init_model(classify.ARCH_LINEAR, 5, 3, 64, seed=21)
    order = np.random.default_rng(21).permutation(8)
    _, ce, grads = classify.objective_and_grads(
        model, x[order], y[order], cfg.weight_decay)
    expected_w = model.params["w"] - 0.1 * grads["w"]
    expected_b = model.params["b"] - 0.1 * grads["b"]
    assert np.allclose(result.model.params["w"], expected_w, atol=1e-12)
    assert np.allclose(result.model.params["b"], expected_b, atol=1e-12)
    assert result.epoch_losses == [pytest.approx(ce)]


def test_momentum_carries_velocity_across_steps(rng):
    x = rng.normal(0, 1, (4, 3))
    y = np.array([0, 1, 0, 1])
    cfg = classify.TrainConfig(learning_rate=0.05, weight_decay=0.0,
                               momentum=0.5, batch_size=4, epochs=2,
                               seed=5, augment=False)
    result = classify.train(x, y, classify.ARCH_LINEAR, cfg, n_classes=2)

    model = classify.init_model(classify.ARCH_LINEAR, 3, 2, 64, seed=5)
    stream = np.random.default_rng(5)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    for _ in range(2):
        order = stream.permutation(4)
        _, _, grads = classify.objective_and_grads(model, x[order], y[order], 0.0)
        for name in grads:
            velocity[name] = 0.5 * velocity[name] - 0.05 * grads[name]
            model.params[name] += velocity[name]
    for name in model.params:
        assert np.allclose(result.model.params[name], model.params[name],
                           atol=1e-12)


def test_zero_learning_rate_leaves_weights_at_init(rng):
    x = rng.normal(0, 1, (10, 4))
    y = rng.integers(0, 2, 10)
    cfg = classify.TrainConfig(learning_rate=0.0, epochs=3, seed=7, augment=False)
    result = classify.train(x, y, classify.ARCH_LINEAR, cfg, n_classes=2)
    init = classify.init_model(classify.ARCH_LINEAR, 4, 2, 64, seed=7)
    assert np.array_equal(result.model.params["w"], init.params["w"])
    assert np.array_equal(result.model.params["b"], init.params["b"])


def test_separable_blobs_reach_full_training_accuracy():
    rng = np.random.default_rng(13)
    a = rng.normal(0, 1.0, (128, 6)) + 60.0
    b = rng.normal(0, 1.0, (128, 6)) - 60.0
    x = np.vstack([a, b])
    y = np.array([0] * 128 + [1] * 128)
    result = classify.train(x, y, classify.ARCH_LINEAR,
                            classify.TrainConfig(seed=13, augment=False),
                            n_classes=2)
    pred = classify.predict_batch(result.model, x).argmax(axis=1)
    assert (pred == y).mean() == 1.0
    assert len(result.epoch_losses) == classify.TrainConfig().epochs


def test_training_is_deterministic_for_a_seed(rng):
    x = rng.normal(0, 1, (30, 9))
    y = rng.integers(0, 3, 30)
    cfg = classify.TrainConfig(epochs=2, seed=3, augment=False)
    one = classify.train(x, y, classify.ARCH_MLP, cfg, n_classes=3, hidden_units=8)
    two = classify.train(x, y, classify.ARCH_MLP, cfg, n_classes=3, hidden_units=8)
    for name in one.model.params:
        assert np.array_equal(one.model.params[name], two.model.params[name])
    assert one.epoch_losses == two.epoch_losses


def test_training_with_pixel_patches_and_augmentation_runs(rng):
    pix = rng.integers(0, 256, (12, 20, 20, 3), dtype=np.uint8)
    y = rng.integers(0, 2, 12)
    y[:2] = [0, 1]
    cfg = classify.TrainConfig(epochs=1, batch_size=6, seed=1, augment=True)
    result = classify.train(pix, y, classify.ARCH_LINEAR, cfg, n_classes=2)
    assert result.model.feature_dim == 176
    assert len(result.epoch_losses) == 1


def test_train_input_validation(rng):
    x = rng.normal(0, 1, (6, 4))
    cfg = classify.TrainConfig(epochs=1, augment=False)
    with pytest.raises(EmptyInputError):
        classify.train(np.zeros((0, 4)), np.zeros(0, dtype=int),
                       classify.ARCH_LINEAR, cfg)
    with pytest.raises(LengthMismatchError):
        classify.train(x, np.zeros(5, dtype=int), classify.ARCH_LINEAR, cfg)
    with pytest.raises(DegenerateDatasetError):
        classify.train(x, np.ones(6, dtype=int), classify.ARCH_LINEAR, cfg)
    with pytest.raises(ShapeMismatchError):
        classify.train(x, np.array([0, 1, 2, 0, 1, 5]), classify.ARCH_LINEAR,
                       cfg, n_classes=3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        classify.TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        classify.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        classify.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        classify.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        classify.TrainConfig(weight_decay=-0.1)


# --- relevance filtering ----------------------------------------------------------------


def _constant_class_model(n_classes, winner, feature_dim=176):
    """Linear model whose bias forces a fixed argmax."""
    model = classify.init_model(classify.ARCH_LINEAR, feature_dim, n_classes,
                                64, seed=0)
    model.params["w"][:] = 0.0
    model.params["b"][:] = 0.0
    model.params["b"][winner] = 5.0
    return model


def test_relevance_keep_mask_keeps_building_argmax(rng):
    keep_all = _constant_class_model(13, classify.BUILDING_CLASS)
    drop_all = _constant_class_model(13, 4)
    feats = rng.normal(0, 1, (5, 176))
    assert classify.relevance_keep_mask(keep_all, feats).all()
    assert not classify.relevance_keep_mask(drop_all, feats).any()
    with pytest.raises(WrongClassCountError):
        classify.relevance_keep_mask(_constant_class_model(6, 0), feats)


def test_relevance_filter_preserves_order(tiny_corpus):
    from buildage import patches

    corpus, records = tiny_corpus
    image = corpus.images[0]
    geoms = patches.sample_grid(64, 64, (16,), 0.5)[:6]
    plist = [patches.extract(image, g) for g in geoms]
    model = _constant_class_model(13, classify.BUILDING_CLASS)
    kept = classify.relevance_filter(plist, model)
    assert [p.geometry for p in kept] == [p.geometry for p in plist]
    with pytest.raises(LengthMismatchError):
        classify.relevance_filter(plist, model, features=np.zeros((2, 176)))


def test_patch_labels_from_mask_majority_rule():
    from buildage.patches import PatchGeometry

    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[:, :9] = 7          # category 7 covers 9/16 > half of the left patch
    geoms = [PatchGeometry(0, 0, 16), PatchGeometry(0, 0, 8)]
    labels = classify.patch_labels_from_mask(mask, geoms)
    assert labels[0] == 7    # 144/256 of full patch
    assert labels[1] == 7    # left half fully covered
    half = np.zeros((8, 8), dtype=np.uint8)
    half[:, :4] = 3          # exactly 50%: not strictly dominant -> building
    assert classify.patch_labels_from_mask(half, [PatchGeometry(0, 0, 8)])[0] == 0


# --- model files ---------------------------------------------------------------------


def test_model_file_roundtrip_preserves_float32_weights(tmp_path, rng):
    cfg = classify.TrainConfig(epochs=1, seed=2, augment=False)
    x = rng.normal(0, 1, (12, 6))
    y = rng.integers(0, 3, 12)
    result = classify.train(x, y, classify.ARCH_MLP, cfg, n_classes=3,
                            hidden_units=4)
    path = tmp_path / "m.model"
    classify.save_model(path, result.model)
    back = classify.load_model(path)
    assert back.architecture == classify.ARCH_MLP
    assert back.n_classes == 3 and back.feature_dim == 6
    assert back.hidden_units == 4
    assert back.rng_seed == result.model.rng_seed
    for name, value in result.model.params.items():
        assert back.params[name].dtype == np.float64
        assert np.array_equal(back.params[name],
                              value.astype(np.float32).astype(np.float64))
    # a second save produces identical bytes
    path2 = tmp_path / "m2.model"
    classify.save_model(path2, back)
    classify.save_model(path, result.model)
    # (config dict of the reloaded model round-trips too)
    assert classify.load_model(path2).train_config == back.train_config


def test_model_file_error_taxonomy(tmp_path):
    with pytest.raises(IoError):
        classify.load_model(tmp_path / "missing.model")
    bad = tmp_path / "bad.model"
    bad.write_bytes(b"XXXX" + b"\0" * 64)
    with pytest.raises(DecodeError):
        classify.load_model(bad)
    model = classify.init_model(classify.ARCH_LINEAR, 4, 2, 64, seed=0)
    good = tmp_path / "good.model"
    classify.save_model(good, model)
    truncated = tmp_path / "short.model"
    truncated.write_bytes(good.read_bytes()[:-9])
    with pytest.raises(DecodeError):
        classify.load_model(truncated)


# --- external likelihood adapter ----------------------------------------------------------


def test_external_likelihood_roundtrip(tmp_path):
    rows = [
        ("img_a.png", 0, 0, 16, [0.5, 0.25, 0.25]),
        ("img_a.png", 8, 0, 16, [0.0, 1.0, 0.0]),
        ("img_b.png", 4, 4, 24, [0.2, 0.3, 0.5]),
    ]
    path = tmp_path / "ext.csv"
    classify.write_external_likelihoods(path, rows)
    table = classify.read_external_likelihoods(path)

    from buildage.patches import PatchGeometry

    dists = classify.distributions_for_patches(
        table, "img_a.png", [PatchGeometry(8, 0, 16), PatchGeometry(0, 0, 16)])
    assert np.allclose(dists, [[0.0, 1.0, 0.0], [0.5, 0.25, 0.25]])


def test_external_likelihood_validation(tmp_path):
    path = tmp_path / "ext.csv"
    path.write_text("image_id,x,y,side,p_0,p_1\nimg,0,0,16,0.9,0.3\n")
    with pytest.raises(ParseError):
        classify.read_external_likelihoods(path)
    path.write_text("image_id,x,y,side,p_0,p_1\nimg,0,0,16,-0.1,1.1\n")
    with pytest.raises(ParseError):
        classify.read_external_likelihoods(path)
