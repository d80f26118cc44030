import numpy as np
import pytest

from octhybrid import nn
from octhybrid.errors import ConfigError, InputValidationError
from octhybrid.hybrid import (
    HybridDataset,
    HybridModel,
    ModelConfig,
    TrainConfig,
    forward_logits,
    gradient_check,
    train,
    validation_subjects,
)

SMALL = dict(conv_channels=(3, 4), grid_shape=(8, 8), cnn_embed_dim=6, fcn_hidden=(5,), fusion_hidden=4)


def small_cfg(channels=2, **kw):
    return ModelConfig(cnn_channels_in=channels, **{**SMALL, **kw})


def toy_data(rng, n=80, channels=2, shape=(8, 8), sep=3.0):
    labels = np.arange(n) % 2
    maps = rng.normal(size=(n, channels) + shape)
    maps[labels == 1, 0, :3, 2:5] -= sep  # a notch in the positive class
    scalars = rng.normal(size=(n, 10))
    subjects = np.array([f"s{i // 2:03d}" for i in range(n)])
    return HybridDataset(maps, scalars, labels, subjects)


def test_zero_parameters_give_half():
    cfg = small_cfg()
    model = HybridModel.initialize(cfg)
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(0)
    p = model.predict(rng.normal(size=(3, 2, 8, 8)), rng.normal(size=(3, 10)))
    assert np.array_equal(p, [0.5, 0.5, 0.5])


def test_channel_mismatch_rejected():
    model = HybridModel.initialize(small_cfg(channels=1))
    with pytest.raises(ConfigError, match="1-channel"):
        model.predict(np.zeros((1, 2, 8, 8)), np.zeros((1, 10)))
    with pytest.raises(ConfigError):
        ModelConfig(cnn_channels_in=3)


def test_nonfinite_input_rejected():
    model = HybridModel.initialize(small_cfg())
    maps = np.zeros((1, 2, 8, 8))
    maps[0, 1, 2, 2] = np.nan
    with pytest.raises(InputValidationError):
        model.predict(maps, np.zeros((1, 10)))


def test_default_config_shapes():
    cfg = ModelConfig()
    shapes = cfg.param_shapes()
    assert shapes["conv0.w"] == (8, 2, 2, 2)
    assert shapes["conv1.w"] == (16, 8, 2, 2)
    assert shapes["embed.w"] == (16 * 8 * 8, 64)
    assert shapes["fuse.w"] == (64 + 16, 32)
    z, _ = forward_logits(HybridModel.initialize(cfg).params, cfg,
                          np.zeros((2, 2, 32, 32)), np.zeros((2, 10)))
    assert z.shape == (2,)
    with pytest.raises(ConfigError):
        ModelConfig(grid_shape=(30, 32))


def test_gradient_check_identity_model():
    rng = np.random.default_rng(1)
    model = HybridModel.initialize(small_cfg(activation="identity"), seed=3)
    err, _ = gradient_check(model, rng.normal(size=(2, 8, 8)), rng.normal(size=10), 1.0)
    assert err < 1e-9


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_check_relu_model(seed):
    rng = np.random.default_rng(seed)
    model = HybridModel.initialize(small_cfg(), seed=seed)
    err, per_tensor = gradient_check(model, rng.normal(size=(2, 8, 8)), rng.normal(size=10), seed % 2)
    assert err < 1e-5, per_tensor


def test_first_conv_layer_is_rotation_equivariant():
    cfg = small_cfg()
    model = HybridModel.initialize(cfg, seed=4)
    rng = np.random.default_rng(4)
    maps = rng.normal(size=(1, 2, 8, 8))
    h = np.moveaxis(maps, 1, -1)
    a, _ = nn.conv2d_forward(h, model.params["conv0.w"], model.params["conv0.b"])
    b, _ = nn.conv2d_forward(np.roll(h, 3, axis=2), model.params["conv0.w"], model.params["conv0.b"])
    assert np.allclose(np.roll(a, 3, axis=2), b, atol=1e-12)


def test_train_separable_reaches_full_accuracy():
    rng = np.random.default_rng(5)
    data = toy_data(rng)
    model, hist = train(small_cfg(), TrainConfig(batch_size=16, epochs=200, learning_rate=1e-2, seed=0), data)
    assert max(hist.train_acc) == 1.0
    p = model.predict(data.maps, data.scalars)
    assert np.mean((p >= 0.5) == (data.labels == 1)) == 1.0


def test_train_is_deterministic():
    rng = np.random.default_rng(6)
    data = toy_data(rng, n=40)
    tc = TrainConfig(batch_size=8, epochs=5, learning_rate=1e-3, seed=11)
    m1, h1 = train(small_cfg(), tc, data)
    m2, h2 = train(small_cfg(), tc, data)
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_standardizer_ignores_validation_subjects():
    rng = np.random.default_rng(7)
    data = toy_data(rng, n=40)
    tc = TrainConfig(batch_size=8, epochs=1, seed=2)
    is_val = validation_subjects(data.subjects, data.labels, tc.validation_split,
                                 np.random.default_rng(tc.seed))
    assert 0 < is_val.sum() < len(is_val)
    # validation subjects are whole subjects
    assert not set(data.subjects[is_val]) & set(data.subjects[~is_val])
    m1, _ = train(small_cfg(), tc, data)
    altered = HybridDataset(data.maps.copy(), data.scalars.copy(), data.labels, data.subjects)
    altered.maps[is_val] *= 100.0
    altered.scalars[is_val] += 50.0
    m2, _ = train(small_cfg(), tc, altered)
    for a, b in zip(vars(m1.standardizer).values(), vars(m2.standardizer).values()):
        assert np.array_equal(a, b)


def test_train_needs_both_classes():
    rng = np.random.default_rng(8)
    data = toy_data(rng, n=20)
    data.labels[:] = 0
    with pytest.raises(ConfigError):
        train(small_cfg(), TrainConfig(epochs=1), data)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    data = toy_data(rng, n=20)
    model, _ = train(small_cfg(), TrainConfig(batch_size=8, epochs=2, seed=1), data)
    model.save(tmp_path / "ck")
    again = HybridModel.load(tmp_path / "ck")
    assert np.array_equal(model.predict(data.maps, data.scalars), again.predict(data.maps, data.scalars))
    first = (tmp_path / "ck" / "params.bin").read_bytes()
    again.save(tmp_path / "ck2")
    assert (tmp_path / "ck2" / "params.bin").read_bytes() == first
