"""Parameterised layers built on :mod:`protolab.tensor`, plus weight files."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_MAGIC = b"PLAB"


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def init_params(shape, fan_in: int, rng: np.random.Generator) -> Parameter:
    """Kaiming-normal draw with std sqrt(2/fan_in)."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return Parameter(rng.standard_normal(shape) * std)


class Module:
    """Minimal container: walks attributes to find parameters, buffers and children."""

    training = True

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, val in getattr(self, "_buffers", {}).items():
            yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            target = params[k].data if k in params else buffers[k]
            if target.shape != tuple(v.shape):
                raise ValueError(f"{k}: expected shape {target.shape}, file has {tuple(v.shape)}")
        for k, v in state.items():
            if k in params:
                params[k].data = np.array(v, dtype=np.float32)
            else:
                buffers[k][...] = v

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_count(module: Module) -> int:
    """Number of trainable scalars."""
    return int(sum(p.size for p in module.parameters()))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator, stride=1,
                 padding=0, dilation=1, bias: bool = True):
        kh, kw = T._pair(kernel)
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = init_params((cout, cin, kh, kw), cin * kh * kw, rng)
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.momentum, self.eps = momentum, eps
        self._buffers = OrderedDict(running_mean=np.zeros(channels, np.float32),
                                    running_var=np.ones(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps)


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


class ConvBnRelu(Module):
    """conv -> batch norm -> ReLU; padded so stride 1 keeps the spatial size.

    The conv carries no bias: batch norm subtracts it straight back out.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, dilation: int = 1):
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride,
                           padding=same_padding(kernel, dilation), dilation=dilation, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class FactorizedConv(Module):
    """A k x 1 conv followed by a 1 x k conv, no nonlinearity in between."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        if k % 2 == 0:
            raise ValueError(f"factorized conv needs an odd kernel, got {k}")
        self.k = k
        self.vertical = Conv2d(cin, cout, (k, 1), rng, padding=(k // 2, 0))
        self.horizontal = Conv2d(cout, cout, (1, k), rng, padding=(0, k // 2))

    def forward(self, x: Tensor) -> Tensor:
        return self.horizontal(self.vertical(x))


class ResidualBlock(Module):
    """Two 3x3 Conv-BN-ReLU stages added to an identity (or 1x1 projected) skip."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.stage1 = ConvBnRelu(cin, cout, rng)
        self.stage2 = ConvBnRelu(cout, cout, rng)
        self.project = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        skip = x if self.project is None else self.project(x)
        return self.stage2(self.stage1(x)) + skip


# ------------------------------------------------------------ weight files


def save_params(path, state: dict) -> None:
    """Write arrays as a JSON header plus little-endian float32 payload.

    Layout: ``b"PLAB"``, u64 header length, UTF-8 JSON header
    ``{"tensors": [{"name", "shape", "offset"}, ...]}`` (offsets in bytes into
    the payload), then the payload.
    """
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"tensors": entries}, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    payload = memoryview(raw)[12 + hlen:]
    out = OrderedDict()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out
