import numpy as np
import pytest

from protolab import tensor as T
from protolab.nn import (Conv2d, ConvBnRelu, FactorizedConv, Module, Parameter, ResidualBlock,
                         init_params, load_params, param_count, save_params)
from protolab.tensor import Tensor, grad_check


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def weighted(out, rng):
    w = Tensor(rng.standard_normal(out.shape) / np.sqrt(out.size))
    return w


def test_conv_bn_relu_same_padding_and_nonnegative(rng):
    blk = ConvBnRelu(4, 6, T.make_rng(0))
    out = blk(Tensor(rng.standard_normal((1, 4, 16, 16))))
    assert out.shape == (1, 6, 16, 16)
    assert out.data.min() >= 0


@pytest.mark.parametrize("size", [8, 13, 32, 64])
def test_blocks_preserve_spatial_size(rng, size):
    x = Tensor(rng.standard_normal((1, 3, size, size)))
    r = T.make_rng(1)
    assert ConvBnRelu(3, 4, r, kernel=3, dilation=2)(x).shape[-2:] == (size, size)
    assert FactorizedConv(3, 4, 7, r)(x).shape[-2:] == (size, size)
    assert ResidualBlock(3, 4, r)(x).shape[-2:] == (size, size)


def test_conv_bn_relu_grad(rng):
    blk = ConvBnRelu(2, 3, T.make_rng(0))
    x = Tensor(rng.standard_normal((2, 2, 5, 5)))
    w = Tensor(rng.standard_normal((2, 3, 5, 5)) / 10)
    assert grad_check(lambda: (blk(x) * w).sum(), [x] + blk.parameters()) < 1e-3


def test_factorized_shape():
    blk = FactorizedConv(8, 5, 7, T.make_rng(0))
    assert blk(Tensor(np.zeros((1, 8, 32, 32)))).shape == (1, 5, 32, 32)
    with pytest.raises(ValueError):
        FactorizedConv(2, 2, 4, T.make_rng(0))


def test_factorized_param_count():
    blk = FactorizedConv(16, 16, 13, T.make_rng(0))
    weights = blk.vertical.weight.size + blk.horizontal.weight.size
    assert weights == 2 * 13 * 16 * 16 == 6656
    assert weights < 13 * 13 * 16 * 16 == 43264
    assert param_count(blk) == 6656 + 32


@pytest.mark.parametrize("seed", range(5))
def test_factorized_equals_rank1_dense(seed):
    r = np.random.default_rng(seed)
    k = 5
    u, v = r.standard_normal(k), r.standard_normal(k)
    blk = FactorizedConv(1, 1, k, T.make_rng(seed))
    blk.vertical.weight.data = u.reshape(1, 1, k, 1).astype(np.float32)
    blk.horizontal.weight.data = v.reshape(1, 1, 1, k).astype(np.float32)
    x = Tensor(r.standard_normal((2, 1, 12, 12)))
    dense = T.conv2d(x, Tensor(np.outer(u, v)[None, None]), padding=k // 2)
    np.testing.assert_allclose(blk(x).data, dense.data, atol=1e-5)


def test_residual_zero_main_path_is_identity(rng):
    blk = ResidualBlock(4, 4, T.make_rng(0))
    for p in blk.stage1.conv.parameters() + blk.stage2.conv.parameters():
        p.data[...] = 0
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    np.testing.assert_array_equal(blk(x).data, x.data)


def test_residual_projection(rng):
    blk = ResidualBlock(67, 32, T.make_rng(0))
    assert blk.project is not None
    assert blk(Tensor(rng.standard_normal((1, 67, 8, 8)))).shape == (1, 32, 8, 8)


def test_residual_grad(rng):
    blk = ResidualBlock(3, 2, T.make_rng(0))
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    w = Tensor(rng.standard_normal((2, 2, 4, 4)) / 8)
    assert grad_check(lambda: (blk(x) * w).sum(), [x] + blk.parameters()) < 1e-3


def test_init_determinism_and_std():
    a = init_params((64, 32, 3, 3), 288, T.make_rng(5))
    b = init_params((64, 32, 3, 3), 288, T.make_rng(5))
    np.testing.assert_array_equal(a.data, b.data)
    big = init_params((10000,), 50, T.make_rng(3))
    assert abs(big.data.std() / np.sqrt(2 / 50) - 1) < 0.1
    conv = Conv2d(3, 4, 3, T.make_rng(0))
    np.testing.assert_array_equal(conv.bias.data, 0)
    with pytest.raises(ValueError):
        init_params((2,), 0, T.make_rng(0))


def test_bn_init_and_conv_param_count():
    blk = ConvBnRelu(2, 4, T.make_rng(0))
    np.testing.assert_array_equal(blk.bn.gamma.data, 1)
    np.testing.assert_array_equal(blk.bn.beta.data, 0)
    assert param_count(Conv2d(2, 4, 3, T.make_rng(0))) == 2 * 4 * 9 + 4 == 76


def test_save_load_bit_exact(tmp_path, rng):
    blk = ResidualBlock(3, 5, T.make_rng(0))
    blk(Tensor(rng.standard_normal((2, 3, 4, 4))))  # moves BN running stats
    state = blk.state_dict()
    save_params(tmp_path / "w.bin", state)
    loaded = load_params(tmp_path / "w.bin")
    assert list(loaded) == list(state)
    for k in state:
        assert loaded[k].tobytes() == np.asarray(state[k], np.float32).tobytes()
    fresh = ResidualBlock(3, 5, T.make_rng(1))
    fresh.load_state_dict(loaded)
    assert param_count(fresh) == param_count(blk)
    for (_, a), (_, b) in zip(fresh.named_parameters(), blk.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_load_rejects_wrong_shape(tmp_path):
    save_params(tmp_path / "w.bin", ConvBnRelu(2, 4, T.make_rng(0)).state_dict())
    with pytest.raises(ValueError, match="conv.weight"):
        ConvBnRelu(3, 4, T.make_rng(0)).load_state_dict(load_params(tmp_path / "w.bin"))


def test_file_header_is_json(tmp_path):
    save_params(tmp_path / "w.bin", {"a": np.arange(3, dtype=np.float32), "b": np.ones((2, 2))})
    raw = (tmp_path / "w.bin").read_bytes()
    import json
    import struct
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    assert header["tensors"][1] == {"name": "b", "shape": [2, 2], "offset": 12}
    assert np.frombuffer(raw[12 + n:12 + n + 12], "<f4").tolist() == [0, 1, 2]


def test_module_train_eval_switch():
    class Two(Module):
        def __init__(self):
            self.a = ConvBnRelu(1, 1, T.make_rng(0))
            self.bs = [ConvBnRelu(1, 1, T.make_rng(1))]
            self.p = Parameter(np.zeros(2))

    m = Two().eval()
    assert not m.a.bn.training and not m.bs[0].bn.training
    names = [n for n, _ in m.named_parameters()]
    assert names[0] == "p" and "bs.0.conv.weight" in names
