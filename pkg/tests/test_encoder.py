import numpy as np
import pytest

from mmnet import encoder
from mmnet.autodiff import Tensor
from mmnet.config import EncoderConfig, GroupSpec


def test_default_widths():
    cfg = EncoderConfig()
    assert [g.channels for g in cfg.groups] == [16, 32, 64, 96, 128]
    assert all(g.blocks == 2 and g.stride == 2 for g in cfg.groups)


def test_exactly_five_groups():
    with pytest.raises(ValueError):
        EncoderConfig(groups=(GroupSpec(1, 4),) * 4)


def test_pyramid_extents_and_blocks():
    cfg = EncoderConfig.uniform((2, 3, 4, 5, 6), blocks=2, input_size=(64, 96))
    params = encoder.init_parameters(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).random((2, 64, 96, 3)))
    pyr = encoder.encode(x, params, cfg)
    assert sorted(pyr) == [2, 3, 4, 5]
    for s, blocks in pyr.items():
        assert len(blocks) == 2
        for b in blocks:
            assert b.shape == (2, 64 >> s, 96 >> s, cfg.groups[s - 1].channels)


def test_group1_hidden_unless_requested():
    cfg = EncoderConfig.uniform((2, 2, 2, 2, 2), blocks=1, input_size=(32, 32))
    params = encoder.init_parameters(cfg)
    x = Tensor(np.zeros((1, 32, 32, 3)))
    assert 1 not in encoder.encode(x, params, cfg)
    assert encoder.encode(x, params, cfg, keep_group1=True)[1][0].shape == (1, 16, 16, 2)


def test_unbatched_input_accepted():
    cfg = EncoderConfig.uniform((2, 2, 2, 2, 2), blocks=1, input_size=(32, 32))
    pyr = encoder.encode(Tensor(np.zeros((32, 32, 3))), encoder.init_parameters(cfg), cfg)
    assert pyr[5][0].shape == (1, 1, 1, 2)


def test_residual_block_semantics():
    # block b>0 is x + relu(conv(x)); zero weights and biases make it the identity
    cfg = EncoderConfig.uniform((2, 2, 2, 2, 2), blocks=2, input_size=(32, 32))
    params = encoder.init_parameters(cfg, seed=3)
    for g in range(1, 6):
        params[f"enc.g{g}.b1.w"].data[:] = 0
    x = Tensor(np.random.default_rng(1).random((1, 32, 32, 3)))
    pyr = encoder.encode(x, params, cfg)
    for blocks in pyr.values():
        np.testing.assert_array_equal(blocks[0].data, blocks[1].data)


def test_input_size_must_divide_by_32():
    cfg = EncoderConfig.uniform((2, 2, 2, 2, 2), input_size=(32, 32))
    with pytest.raises(ValueError, match="divisible by 32"):
        encoder.encode(Tensor(np.zeros((1, 48, 32, 3))), encoder.init_parameters(cfg), cfg)


def test_rejects_non_rgb():
    cfg = EncoderConfig.uniform((2, 2, 2, 2, 2), input_size=(32, 32))
    with pytest.raises(ValueError, match="3-channel"):
        encoder.encode(Tensor(np.zeros((1, 32, 32, 1))), encoder.init_parameters(cfg), cfg)


def test_init_is_seeded_and_bounded():
    cfg = EncoderConfig()
    a = encoder.init_parameters(cfg, seed=7)
    b = encoder.init_parameters(cfg, seed=7)
    c = encoder.init_parameters(cfg, seed=8)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["enc.g1.b0.w"].data, c["enc.g1.b0.w"].data)
    w = a["enc.g3.b0.w"].data
    assert np.abs(w).max() <= np.sqrt(6.0 / (32 * 9))
    assert not a["enc.g3.b0.b"].data.any()


def test_parameter_names_cover_every_block():
    cfg = EncoderConfig.uniform((2, 2, 2, 2, 2), blocks=3)
    names = set(encoder.init_parameters(cfg))
    assert names == {f"enc.g{g}.b{b}.{p}" for g in range(1, 6) for b in range(3) for p in "wb"}
