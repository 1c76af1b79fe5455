import numpy as np
import pytest

from protolab import tensor as T
from protolab.encoder import (DESK_CHANNELS, FULL_CHANNELS, ConfigError, Encoder, EncoderConfig,
                              pyramid_shapes)
from protolab.tensor import Tensor, grad_check


def test_full_scale_channels_at_256():
    enc = Encoder(EncoderConfig(FULL_CHANNELS, blocks=1), T.make_rng(0))
    with T.no_grad():
        pyr = enc(Tensor(np.zeros((1, 3, 256, 256))))
    assert [p.shape for p in pyr] == [(1, 64, 64, 64), (1, 128, 32, 32), (1, 320, 16, 16), (1, 512, 8, 8)]


@pytest.mark.parametrize("size", [64, 96, 128, 256])
def test_desk_shape_contract(size):
    enc = Encoder(EncoderConfig(), T.make_rng(0))
    with T.no_grad():
        pyr = enc(Tensor(np.random.default_rng(0).random((2, 3, size, size))))
    assert [p.shape for p in pyr] == pyramid_shapes(2, size, size, DESK_CHANNELS)
    if size == 64:
        assert pyr.x4.shape == (2, 64, 2, 2)


def test_indivisible_input_rejected():
    enc = Encoder(EncoderConfig(), T.make_rng(0))
    with pytest.raises(ConfigError):
        enc(Tensor(np.zeros((1, 3, 48, 64))))


@pytest.mark.parametrize("channels", [(8, 8, 16, 32), (8, 16, 32), (4, 8, 16, 32, 64)])
def test_bad_channel_lists(channels):
    with pytest.raises(ConfigError):
        EncoderConfig(channels)


def test_encoder_grad():
    rng = np.random.default_rng(3)
    enc = Encoder(EncoderConfig((4, 5, 6, 7), blocks=2), T.make_rng(1))
    x = Tensor(rng.random((2, 3, 32, 32)))
    ws = [Tensor(rng.standard_normal(s) / np.sqrt(np.prod(s))) for s in pyramid_shapes(2, 32, 32, (4, 5, 6, 7))]

    def f():
        pyr = enc(x)
        total = (pyr[0] * ws[0]).sum()
        for p, w in zip(pyr[1:], ws[1:]):
            total = total + (p * w).sum()
        return total

    assert grad_check(f, x, max_checks=256) < 1e-3
    assert grad_check(f, enc.parameters(), max_checks=24) < 1e-3


def test_batch_equivariance_in_eval():
    rng = np.random.default_rng(0)
    enc = Encoder(EncoderConfig(), T.make_rng(0))
    enc(Tensor(rng.random((4, 3, 64, 64))))  # populate running stats
    enc.eval()
    x = rng.random((3, 3, 64, 64))
    perm = [2, 0, 1]
    with T.no_grad():
        a = enc(Tensor(x))
        b = enc(Tensor(x[perm]))
    for pa, pb in zip(a, b):
        np.testing.assert_allclose(pa.data[perm], pb.data, rtol=1e-5, atol=1e-6)
