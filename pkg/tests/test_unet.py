import numpy as np
import pytest

from layoutfm.nn import tensor as T
from layoutfm.nn.tensor import ConfigError, DimensionError, Tensor
from layoutfm.unet import (IncompatibleWeightsError, ModelConfig, UNet, WeightFormatError,
                           load_pretrained_for_task, load_weights, read_weights, save_weights)

SMALL = ModelConfig(stem_channels=8, levels=2, res_blocks_per_level=1, patch_px=16)


@pytest.fixture(scope="module")
def model():
    return UNet(SMALL, seed=0)


def test_default_shape_and_range():
    m = UNet(ModelConfig(res_blocks_per_level=1), seed=0)
    y = m.predict(np.random.default_rng(0).random((1, 21, 64, 64)).astype(np.float32))
    assert y.shape == (1, 21, 64, 64)
    assert (y > 0).all() and (y < 1).all()


def test_command_channels_widen_stem_only():
    m = UNet(ModelConfig(command_channels=2, patch_px=16, levels=2, res_blocks_per_level=1), seed=0)
    assert m.stem.weight.shape[1] == 23
    assert m.predict(np.zeros((1, 23, 16, 16), np.float32)).shape == (1, 21, 16, 16)
    with pytest.raises(DimensionError):
        m.predict(np.zeros((1, 21, 16, 16), np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        UNet(ModelConfig(patch_px=20, levels=3))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_seed_determinism():
    a, b, c = UNet(SMALL, seed=3), UNet(SMALL, seed=3), UNet(SMALL, seed=4)
    sa, sb, sc = a.state(), b.state(), c.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_batch_slices_independent(model):
    x = np.random.default_rng(1).random((1, 21, 16, 16)).astype(np.float32)
    one = model.predict(x)
    many = model.predict(np.concatenate([x, x, x]))
    assert np.allclose(many, one, atol=1e-6)


def test_gradient_reaches_stem(model):
    model.zero_grad()
    x = Tensor(np.random.default_rng(2).random((2, 21, 16, 16)).astype(np.float32))
    y = (np.random.default_rng(3).random((2, 21, 16, 16)) < 0.2).astype(np.float32)
    T.soft_dice_loss(model.forward(x), y).backward()
    g = model.stem.weight.grad
    assert g is not None and np.isfinite(g).all() and np.abs(g).sum() > 0


def test_save_load_save_identical(tmp_path, model):
    p1, p2 = tmp_path / "a.alfw", tmp_path / "b.alfw"
    save_weights(model, p1)
    save_weights(load_weights(p1, SMALL), p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = np.random.default_rng(4).random((1, 21, 16, 16)).astype(np.float32)
    assert np.array_equal(load_weights(p1, SMALL).predict(x), model.predict(x))


def test_wrong_architecture_rejected(tmp_path, model):
    p = tmp_path / "w.alfw"
    save_weights(model, p)
    with pytest.raises(IncompatibleWeightsError):
        load_weights(p, ModelConfig(stem_channels=8, levels=1, res_blocks_per_level=1, patch_px=16))


def test_truncated_file_names_offset(tmp_path, model):
    p = tmp_path / "w.alfw"
    save_weights(model, p)
    data = p.read_bytes()
    p.write_bytes(data[:len(data) // 2])
    with pytest.raises(WeightFormatError, match="offset"):
        read_weights(p)
    p.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(WeightFormatError, match="magic"):
        read_weights(p)


def test_pretrained_same_channels_copies_all(model):
    m, rep = load_pretrained_for_task(model, SMALL, SMALL, seed=9)
    assert rep.fresh == 0 and rep.copied == len(model.parameters())
    sa, sb = model.state(), m.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_pretrained_extra_channels_fresh_stem_slices(model):
    from dataclasses import replace
    task = replace(SMALL, command_channels=2)
    m, rep = load_pretrained_for_task(model, SMALL, task, seed=9)
    assert rep.fresh == 2 and rep.fresh_slices == ["stem.weight[:, 21]", "stem.weight[:, 22]"]
    assert np.array_equal(m.stem.weight.data[:, :21], model.stem.weight.data)
    fresh = UNet(task, seed=9).stem.weight.data[:, 21:]
    assert np.array_equal(m.stem.weight.data[:, 21:], fresh)
    with pytest.raises(IncompatibleWeightsError):
        load_pretrained_for_task(model, SMALL, replace(task, stem_channels=16))
