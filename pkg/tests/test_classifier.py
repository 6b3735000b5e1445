import json

import numpy as np
import pytest
from sklearn.base import clone

from geodiffnet.classifier import (GeoDiffNetFClassifier, TrainConfig,
                                   logits_to_labels, predict_pixels, stratified_split,
                                   train_geodiffnet, train_geodiffnet_f)
from geodiffnet.exceptions import (AlignmentError, ConfigError, DegenerateLabelError,
                                   DimensionError)
from geodiffnet.nn import GradTape, softmax_cross_entropy

from conftest import central_difference, relative_error


def _separable(n=200, d=8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    w /= np.linalg.norm(w)
    side = np.where(X @ w > 0, 1.0, -1.0)
    # push each half away from the hyperplane to leave a clear margin
    X += 0.5 * side[:, None] * w
    return X, np.where(side > 0, 2, 1)


def _perceptron_separates(X, y, epochs=1000):
    # independent oracle: the classic perceptron converges iff the data are linearly separable
    Xb = np.hstack([X, np.ones((len(X), 1))])
    s = np.where(y == 2, 1.0, -1.0)
    w = np.zeros(Xb.shape[1])
    for _ in range(epochs):
        errors = 0
        for xi, si in zip(Xb, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                errors += 1
        if errors == 0:
            return True
    return False


def test_separable_data_is_learned():
    X, y = _separable()
    assert _perceptron_separates(X, y)
    assert len(X) == 200
    model, report = train_geodiffnet(X, y, TrainConfig())
    assert np.mean(model.predict(X) == y) >= 0.99
    assert report.final_loss < report.initial_loss


def test_initial_loss_is_log_c():
    X, y = _separable()
    _, report = train_geodiffnet(X, y, TrainConfig(max_epochs=1))
    assert report.initial_loss == pytest.approx(np.log(2), rel=1e-5)


def test_sgd_optimizer_also_learns():
    X, y = _separable()
    model, report = train_geodiffnet(X, y, TrainConfig(optimizer="sgd", learning_rate=0.1, max_epochs=30))
    assert report.final_loss < report.initial_loss
    assert np.mean(model.predict(X) == y) >= 0.95


def test_early_stopping_restores_best_weights():
    X, y = _separable()
    cfg = TrainConfig(max_epochs=200, patience=5, batch_size=8)
    model, report = train_geodiffnet(X, y, cfg)
    assert report.stop_reason == "early-stopped"
    assert report.iterations == report.best_iteration + 5
    assert report.iterations < 200 * int(np.ceil(len(X) * 0.9 / 8))


def test_epochs_exhausted():
    X, y = _separable()
    _, report = train_geodiffnet(X, y, TrainConfig(max_epochs=2))
    assert report.stop_reason == "epochs exhausted"
    n_train = stratified_split(np.searchsorted([1, 2], y), 0.1, np.random.default_rng(0))[0].size
    assert report.iterations == 2 * int(np.ceil(n_train / 64))


def test_zero_epochs_keeps_initial_model():
    X, y = _separable()
    _, report = train_geodiffnet(X, y, TrainConfig(max_epochs=0))
    assert report.iterations == 0


def test_training_log(tmp_path):
    X, y = _separable()
    log = tmp_path / "log.jsonl"
    _, report = train_geodiffnet(X, y, TrainConfig(max_epochs=2, log_path=str(log)))
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["iteration"] for r in rows] == list(range(1, report.iterations + 1))
    assert all({"loss", "val_oa"} <= set(r) for r in rows)


def test_training_is_deterministic():
    X, y = _separable()
    a, _ = train_geodiffnet(X, y, TrainConfig(seed=4))
    b, _ = train_geodiffnet(X, y, TrainConfig(seed=4))
    for (_, p), (_, q) in zip(a._parameters(), b._parameters()):
        assert p.tobytes() == q.tobytes()


def test_single_class_rejected():
    with pytest.raises(DegenerateLabelError):
        train_geodiffnet(np.ones((5, 3)), np.ones(5, int))


def test_label_count_mismatch():
    with pytest.raises(AlignmentError):
        train_geodiffnet(np.ones((5, 3)), np.array([1, 2]))
    with pytest.raises(AlignmentError):
        train_geodiffnet_f(np.ones((5, 3)), np.ones((4, 2)), np.array([1, 2, 1, 2, 1]))


def test_bad_config():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")


def test_stratified_split_keeps_every_class():
    t = np.array([0] * 10 + [1] * 1 + [2] * 3)
    tr, va = stratified_split(t, 0.5, np.random.default_rng(0))
    assert set(t[tr]) == {0, 1, 2}
    assert not set(tr) & set(va)
    assert len(tr) + len(va) == len(t)


def test_logits_to_labels():
    assert logits_to_labels(np.array([[0.1, 2.0, -1.0]]))[0] == 2
    # ties go to the lowest index
    assert logits_to_labels(np.array([[1.0, 1.0, 0.0]]))[0] == 1
    assert logits_to_labels(np.array([[0.0, 3.0]]), classes=[4, 7])[0] == 7


def test_batch_prediction_matches_rowwise():
    X, y = _separable()
    model, _ = train_geodiffnet(X, y)
    batch = model.decision_function(X)
    rows = np.vstack([model.decision_function(x[None]) for x in X])
    np.testing.assert_allclose(batch, rows, rtol=1e-5, atol=1e-6)


def test_predict_proba_rows_sum_to_one():
    X, y = _separable()
    model, _ = train_geodiffnet(X, y)
    np.testing.assert_allclose(model.predict_proba(X).sum(1), 1, atol=1e-9)


def test_estimator_protocol():
    est = GeoDiffNetFClassifier(spatial_dim=4, hidden=16)
    c = clone(est)
    assert c.get_params()["spatial_dim"] == 4
    assert c.get_params()["hidden"] == 16


def test_spatial_dim_split_equals_spectra_kwarg():
    rng = np.random.default_rng(0)
    f, s = rng.normal(size=(60, 5)), rng.normal(size=(60, 3))
    y = rng.integers(1, 3, size=60)
    a = GeoDiffNetFClassifier(spatial_dim=5, hidden=8).fit(np.hstack([f, s]), y)
    b = GeoDiffNetFClassifier(hidden=8).fit(f, y, spectra=s)
    # the split path reads spectra through the float32 feature array
    np.testing.assert_allclose(a.decision_function(np.hstack([f, s])), b.decision_function(f, spectra=s),
                               rtol=1e-5, atol=1e-6)


def test_missing_spectra():
    with pytest.raises(ConfigError):
        GeoDiffNetFClassifier().fit(np.ones((4, 2)), [1, 2, 1, 2])


def test_wrong_width_at_predict():
    X, y = _separable()
    model, _ = train_geodiffnet(X, y)
    with pytest.raises(DimensionError):
        model.predict(X[:, :3])


def _identity_setup(seed=0):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(40, 6))
    s = rng.normal(size=(40, 5))
    y = np.repeat([1, 2], 20)
    cfg = TrainConfig(max_epochs=0, seed=seed, hidden=12)
    plain, _ = train_geodiffnet(f, y, cfg)
    film, _ = train_geodiffnet_f(f, s, y, cfg)
    return plain, film, f, s


def test_film_variant_starts_as_identity():
    plain, film, f, s = _identity_setup()
    inputs = film._prepare(f, spectra=s)
    assert film.modulated_features(inputs).tobytes() == inputs[0].tobytes()
    # with a shared non-zero classifier both variants give identical logits
    rng = np.random.default_rng(9)
    for (_, p), (_, q) in zip(plain.classifier_.parameters(), film.classifier_.parameters()):
        p[...] = q[...] = rng.normal(size=p.shape)
    np.testing.assert_array_equal(plain.decision_function(f), film.decision_function(f, spectra=s))


def test_joint_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(12, 5))
    s = rng.normal(size=(12, 4))
    y = np.tile([1, 2, 3], 4)
    model = GeoDiffNetFClassifier(hidden=7, encoder_hidden=6, embed_dim=3, film_hidden=6,
                                  dtype="float64", max_epochs=0).fit(f, y, spectra=s)
    for _, p in model._parameters():
        p[...] = rng.normal(scale=0.5, size=p.shape)
    inputs = model._prepare(f, spectra=s)
    targets = np.searchsorted(model.classes_, y)

    def loss():
        return softmax_cross_entropy(model._forward(inputs), targets)[0]

    logits = model._forward(inputs, cache=True)
    _, g = softmax_cross_entropy(logits, targets)
    tape = GradTape()
    model._backward(g, tape)
    for name, p in model._parameters():
        assert relative_error(tape[name], central_difference(loss, p)) < 1e-5, name


def test_predict_pixels():
    X, y = _separable()
    model, _ = train_geodiffnet(X, y)
    ids, logits = predict_pixels(model, X)
    assert logits.shape == (len(X), 2)
    np.testing.assert_array_equal(ids, model.predict(X))


def test_tensor_roundtrip():
    rng = np.random.default_rng(2)
    f, s = rng.normal(size=(50, 6)), rng.normal(size=(50, 4))
    y = rng.integers(1, 4, size=50)
    model, _ = train_geodiffnet_f(f, s, y, TrainConfig(max_epochs=3))
    back = GeoDiffNetFClassifier.from_tensors(model.header(), model.export_tensors())
    assert back.decision_function(f, spectra=s).tobytes() == model.decision_function(f, spectra=s).tobytes()


def test_constant_validation_accuracy_triggers_early_stop():
    # all-zero features: validation accuracy can never rise above the majority share
    X = np.zeros((200, 4))
    y = np.repeat([1, 2], 100)
    _, report = train_geodiffnet(X, y, TrainConfig(batch_size=1, patience=1000))
    assert report.stop_reason == "early-stopped"
    assert report.iterations == report.best_iteration + 1000
