import threading

import numpy as np
import pytest
from scipy.special import expit

from conformal_ids.neural import (CE_MLP_LAYERS, FNN_LAYERS, TEMPERATURE_GRID, LayerSpec,
                                  MLPModel, TrainConfig, TrainingError, bce_with_logits,
                                  build_ce_mlp, build_fnn_classifier, build_mlp, fit_temperature,
                                  layer_norm, load_model, predict_proba, save_model, train)


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 2)) + np.where(y[:, None] == 1, 3.0, -3.0)
    return X, y


def test_fnn_architecture_and_parameter_count():
    model = build_fnn_classifier(4, seed=0)
    assert model.widths == (64, 32)
    assert [s.activation for s in model.layers] == ["relu", "relu"]
    assert [s.dropout_p for s in model.layers] == [0.3, 0.3]
    # 4*64+64 + 64*32+32 + 32*1+1
    assert model.n_parameters() == 2433


def test_ce_mlp_architecture():
    model = build_ce_mlp(10, seed=0)
    assert model.widths == (256, 128, 64)
    assert all(s.activation == "gelu" and s.layer_norm and s.dropout_p == 0.2
               for s in model.layers)
    assert np.isfinite(model.logits(np.zeros(10))).all()


def test_degenerate_input_dim():
    model = build_fnn_classifier(1, seed=0)
    assert model.logits(np.zeros((3, 1))).shape == (3,)
    with pytest.raises(ValueError):
        build_fnn_classifier(0, seed=0)


@pytest.mark.parametrize("builder", [build_fnn_classifier, build_ce_mlp])
def test_same_seed_identical_init(builder):
    a, b = builder(5, seed=7), builder(5, seed=7)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    c = builder(5, seed=8)
    assert not np.array_equal(a.params["W0"], c.params["W0"])


def test_train_separable_blobs():
    X, y = blobs()
    model = train(build_fnn_classifier(2, seed=1), X, y, TrainConfig(epochs=50, batch_size=32))
    acc = np.mean(np.argmax(model.predict_proba(X), axis=1) == y)
    assert acc >= 0.99
    assert all(np.isfinite(p).all() for p in model.params.values())


def test_zero_epochs_is_noop():
    X, y = blobs(20)
    model = build_ce_mlp(2, seed=3)
    before = model.copy()
    train(model, X, y, TrainConfig(epochs=0))
    for name in model.params:
        assert np.array_equal(model.params[name], before.params[name])


def test_training_is_deterministic():
    X, y = blobs(100)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=5)
    a = train(build_ce_mlp(2, seed=2), X, y, cfg)
    b = train(build_ce_mlp(2, seed=2), X, y, cfg)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


def test_train_errors():
    model = build_fnn_classifier(2, seed=0)
    with pytest.raises(TrainingError):
        train(model, np.zeros((0, 2)), np.zeros(0), TrainConfig(epochs=1))
    X, y = blobs(10)
    model.params["W_out"][:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, X, y, TrainConfig(epochs=1))


def test_predict_proba_basic():
    model = build_fnn_classifier(3, seed=0)
    for name in model.params:
        model.params[name][:] = 0.0
    np.testing.assert_array_equal(predict_proba(model, np.ones(3)), [[0.5, 0.5]])
    rng = np.random.default_rng(0)
    model = build_ce_mlp(3, seed=0)
    X = rng.normal(size=(37, 3))
    probs = model.predict_proba(X, batch_size=1)
    assert probs.shape == (37, 2)
    np.testing.assert_allclose(model.predict_proba(X, batch_size=37), probs, rtol=1e-12, atol=0)
    np.testing.assert_allclose(model.predict_proba(X, batch_size=10), probs, rtol=1e-12, atol=0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=np.finfo(float).eps)
    with pytest.raises(ValueError):
        model.predict_proba(np.zeros((2, 4)))


def test_temperature_flattens_monotonically_and_keeps_argmax():
    rng = np.random.default_rng(1)
    model = build_fnn_classifier(4, seed=0)
    X = rng.normal(size=(50, 4)) * 3
    base = model.predict_proba(X)
    previous = np.abs(base[:, 1] - 0.5)
    for t in (2.0, 5.0, 50.0, 1e6):
        model.temperature = t
        probs = model.predict_proba(X)
        gap = np.abs(probs[:, 1] - 0.5)
        assert np.all(gap <= previous + 1e-15)
        assert np.array_equal(np.argmax(probs, axis=1)[gap > 0], np.argmax(base, axis=1)[gap > 0])
        previous = gap
    np.testing.assert_allclose(previous, 0.0, atol=1e-5)


def test_predict_proba_thread_safe():
    rng = np.random.default_rng(2)
    model = build_ce_mlp(6, seed=0)
    X = rng.normal(size=(300, 6))
    expected = model.predict_proba(X, batch_size=64)
    results = [None] * 8

    def work(i):
        results[i] = model.predict_proba(X, batch_size=64)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in results:
        assert np.array_equal(r, expected)


class FixedLogits(MLPModel):
    """Model whose logits are looked up from a table keyed by the first feature."""

    def __init__(self, z):
        super().__init__(1, (LayerSpec(1),))
        self._z = np.asarray(z, dtype=np.float64)

    def logits(self, X, batch_size=1024):
        return self._z[np.asarray(X, dtype=int)[:, 0]]


def calibrated_logits(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3.0, size=n)
    y = (rng.random(n) < expit(z)).astype(float)
    return z, y


def nearest_grid_index(value):
    return int(np.argmin(np.abs(np.log(TEMPERATURE_GRID) - np.log(value))))


def test_fit_temperature_calibrated_logits():
    z, y = calibrated_logits(40000, seed=3)
    model = FixedLogits(z)
    t = fit_temperature(model, np.arange(len(z))[:, None], y)
    assert abs(nearest_grid_index(t) - nearest_grid_index(1.0)) <= 1
    assert model.temperature == t


def test_fit_temperature_overconfident_logits():
    z, y = calibrated_logits(40000, seed=4)
    model = FixedLogits(5.0 * z)
    t = fit_temperature(model, np.arange(len(z))[:, None], y)
    assert abs(nearest_grid_index(t) - nearest_grid_index(5.0)) <= 1


def test_fit_temperature_degenerate():
    model = build_fnn_classifier(2, seed=0)
    model.temperature = 3.0
    assert fit_temperature(model, np.zeros((5, 2)), np.ones(5)) == 1.0
    assert model.temperature == 1.0


def test_bce_stable_form_matches_naive():
    z = np.linspace(-20, 20, 41)
    for y in (0.0, 1.0):
        naive = -np.mean(y * np.log(expit(z)) + (1 - y) * np.log(1 - expit(z)))
        assert bce_with_logits(z, np.full_like(z, y)) == pytest.approx(naive, rel=1e-9)
    assert np.isfinite(bce_with_logits(np.array([1e4, -1e4]), np.array([0.0, 1.0])))


def test_layer_norm_rows_standardized():
    rng = np.random.default_rng(5)
    a = rng.normal(loc=rng.normal(size=(20, 1)) * 10, scale=rng.uniform(1, 10, size=(20, 1)),
                   size=(20, 128))
    n = layer_norm(a)
    np.testing.assert_allclose(n.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(n.var(axis=1), 1.0, atol=1e-5)


def numeric_gradient(model, X, y, name, flat_index, seed, h=1e-5):
    param = model.params[name].reshape(-1)
    original = param[flat_index]

    def loss():
        z = model.forward(X, rng=np.random.default_rng(seed))
        return bce_with_logits(z, y)

    param[flat_index] = original + h
    plus = loss()
    param[flat_index] = original - h
    minus = loss()
    param[flat_index] = original
    return (plus - minus) / (2 * h)


@pytest.mark.parametrize("layers", [FNN_LAYERS, CE_MLP_LAYERS], ids=["relu_dropout", "gelu_ln"])
def test_gradient_check(layers):
    rng = np.random.default_rng(11)
    X = rng.normal(size=(8, 3))
    y = rng.integers(0, 2, 8).astype(float)
    model = build_mlp(3, layers, seed=4)
    for name in model.params:
        if name.startswith(("b", "beta")):
            model.params[name] += rng.normal(scale=0.1, size=model.params[name].shape)
        if name.startswith("gamma"):
            model.params[name] += rng.normal(scale=0.1, size=model.params[name].shape)
    _, grads = model.loss_and_grads(X, y, rng=np.random.default_rng(99))
    for name, analytic in grads.items():
        flat = analytic.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, 40), replace=False)
        numeric = np.array([numeric_gradient(model, X, y, name, i, seed=99) for i in picks])
        err = np.linalg.norm(flat[picks] - numeric) / max(
            np.linalg.norm(flat[picks]) + np.linalg.norm(numeric), 1e-12)
        assert err < 1e-4, f"{name}: relative error {err:.2e}"


def test_save_load_roundtrip(tmp_path):
    model = build_ce_mlp(4, seed=9)
    model.temperature = 1.7
    save_model(model, tmp_path / "m.npz")
    loaded = load_model(tmp_path / "m.npz")
    assert loaded.layers == model.layers
    assert loaded.temperature == 1.7 and loaded.seed == 9
    for name in model.params:
        assert loaded.params[name].dtype == np.float64
        assert np.array_equal(loaded.params[name], model.params[name])
