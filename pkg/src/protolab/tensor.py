"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the operators needed by the segmentation network are provided. Every op
records a :class:`Node` (when gradients are enabled) holding its inputs and an
adjoint closure; :func:`backward` replays the reachable nodes in reverse
creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateBatchError(ValueError):
    """Raised when batch statistics cannot be computed."""


_state = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as any op produces NaN or inf."""
    prev = _get("debug", False)
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    """PCG64 generator keyed by a 64-bit seed plus optional stream ids."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), *streams])))


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    adjoint: Callable
    seq: int


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axes=None, keepdims: bool = False):
        return reduce(self, axes, "sum", keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce(self, axes, "mean", keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Wrap a forward result and record it on the tape.

    ``adjoint(g)`` receives dLoss/dOutput and must return one gradient (or
    ``None``) per input, each shaped like that input.
    """
    out = Tensor(data)
    if _get("debug", False) and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), adjoint, next(_seq))
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every reachable leaf tensor.

    Intermediate gradients are discarded and the graph below ``loss`` is
    released afterwards, so a graph can be differentiated once.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if grad is None:
        grad = np.ones_like(loss.data)

    # collect the reachable tape
    tape: list[tuple[Node, Tensor]] = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        tape.append((t.node, t))
        stack.extend(i for i in t.node.inputs if i.requires_grad)
    tape.sort(key=lambda e: e[0].seq, reverse=True)

    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node, out in tape:
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    for node, out in tape:
        out.node = None


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return make_op("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def elementwise(a, b, kind: str) -> Tensor:
    """Binary op by name: ``mul`` or ``add`` (``sub``/``div`` also accepted)."""
    ops = {"mul": mul, "add": add, "sub": sub, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return make_op("pow", out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_op("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op("relu", np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape) -> Tensor:
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def reduce(x: Tensor, axes=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (``None`` means all; an empty list is identity)."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % x.ndim for a in axes))
    if not axes:
        return x
    n = 1
    for a in axes:
        if x.shape[a] == 0:
            raise ShapeError(f"cannot reduce over zero-extent axis {a} of shape {x.shape}")
        n *= x.shape[a]
    out = x.data.sum(axis=axes, keepdims=keepdims)
    scale = 1.0 if kind == "sum" else 1.0 / n
    if kind == "mean":
        out = out * scale

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, x.shape).astype(x.data.dtype),)

    return make_op(kind, np.asarray(out, dtype=x.data.dtype), (x,), adjoint)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along channels, in argument order."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    bad = [i for i, x in enumerate(xs) if x.ndim != 4 or (x.shape[0], *x.shape[2:]) != (ref[0], *ref[2:])]
    if bad:
        shapes = ", ".join(f"#{i}={xs[i].shape}" for i in bad)
        raise ShapeError(f"concat_channels: inputs {bad} do not match N,H,W of #0={ref}: {shapes}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([x.shape[1] for x in xs])[:-1]
    return make_op("concat", np.concatenate([x.data for x in xs], axis=1), xs,
                   lambda g: tuple(np.split(g, bounds, axis=1)))


# -------------------------------------------------------------- convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, dilation=1) -> Tensor:
    """2-D cross-correlation via an explicit column buffer and one GEMM."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channels {c} do not match weight in-channels {ci} "
                         f"(x {x.shape}, weight {weight.shape})")
    if h + 2 * ph < dh * (kh - 1) + 1 or w + 2 * pw < dw * (kw - 1) + 1:
        raise ShapeError(f"conv2d: padded input {(h + 2 * ph, w + 2 * pw)} smaller than dilated kernel "
                         f"{(dh * (kh - 1) + 1, dw * (kw - 1) + 1)}")
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    dtype = np.result_type(xd, weight.data)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=dtype)
    windows = []
    for i in range(kh):
        for j in range(kw):
            win = (slice(None), slice(None),
                   slice(i * dh, i * dh + sh * (ho - 1) + 1, sh),
                   slice(j * dw, j * dw + sw * (wo - 1) + 1, sw))
            windows.append((i, j, win))
            cols[:, i, j] = xp[win].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(co, -1)
    out = (w2 @ cols2).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)

    def adjoint(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, win in windows:
                gxp[win] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op("conv2d", out, inputs, adjoint)


# ---------------------------------------------------------------- batch norm


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation. Updates running stats in place when training."""
    n, c, h, w = x.shape
    g_ = gamma.data.reshape(1, c, 1, 1)
    if training:
        count = n * h * w
        if count < 2:
            raise DegenerateBatchError(f"batch_norm2d in train mode needs N*H*W >= 2 per channel, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.reshape(1, c, 1, 1).astype(x.data.dtype)) * inv_std
    out = xhat * g_ + beta.data.reshape(1, c, 1, 1)

    def adjoint(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                m = n * h * w
                gx = inv_std / m * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return make_op("batch_norm2d", out, (x, gamma, beta), adjoint)


# ---------------------------------------------------------------- resampling


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres (align_corners=False); negative source coords clamp to 0
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` (align_corners=False)."""
    h, w = x.shape[-2:]
    oh, ow = size
    if (oh, ow) == (h, w):
        return x
    ah = _interp_matrix(h, oh, x.data.dtype)
    aw = _interp_matrix(w, ow, x.data.dtype)
    out = ah @ x.data @ aw.T
    return make_op("resize_bilinear", out, (x,), lambda g: (ah.T @ g @ aw,))


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * factor, w * factor))


# ------------------------------------------------------------------- cosine


def cosine_similarity_map(f: Tensor, p: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-pixel cosine similarity between ``f`` (N,D,H,W) and vector ``p`` (D,)."""
    n, d, h, w = f.shape
    if p.shape != (d,):
        raise ShapeError(f"cosine_similarity_map: prototype shape {p.shape} does not match feature depth {d}")
    pv = p.data.reshape(1, d, 1, 1)
    dot = (f.data * pv).sum(axis=1, keepdims=True)
    fn = np.sqrt((f.data * f.data).sum(axis=1, keepdims=True))
    pn = float(np.sqrt((p.data * p.data).sum()))
    fa = np.maximum(fn, eps)
    pa = max(pn, eps)
    out = dot / (fa * pa)

    def adjoint(g):
        gf = gp = None
        if f.requires_grad:
            dfa = np.where(fn > eps, 1.0 / np.where(fn > eps, fn, 1.0), 0.0).astype(f.data.dtype)
            gf = g * (pv / (fa * pa) - (dot / (fa * fa * pa)) * dfa * f.data)
        if p.requires_grad:
            term = (g / (fa * pa) * f.data).sum(axis=(0, 2, 3))
            if pn > eps:
                term = term - (g * dot / (fa * pa * pa)).sum() * p.data / pn
            gp = term
        return gf, gp

    return make_op("cosine", out, (f, p), adjoint)


# --------------------------------------------------------------- grad check


def grad_check(f: Callable[[], Tensor], inputs: Tensor | Iterable[Tensor], h: float = 1e-6,
               max_checks: int | None = None, seed: int = 0, total_checks: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with each checked element perturbed by +-h; the error
    per element is ``|a - n| / max(1e-8, |a| + |n|)``. The check runs in
    float64 so round-off does not swamp the comparison. ``max_checks`` caps
    the number of elements probed per input (sampled with ``seed``);
    ``total_checks`` instead samples that many elements across all inputs.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    saved = [(t.data, t.requires_grad, t.grad) for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with precision(np.float64):
            for t in inputs:
                t.data = t.data.astype(np.float64)
                t.requires_grad = True
                t.grad = None
            out = f()
            if out.size != 1:
                raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
            backward(out)
            analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
            chosen = None
            if total_checks is not None:
                sizes = np.array([t.size for t in inputs])
                ends = np.cumsum(sizes)
                picks = rng.choice(ends[-1], min(total_checks, ends[-1]), replace=False)
                owner = np.searchsorted(ends, picks, side="right")
                chosen = [np.sort(picks[owner == i] - (ends[i] - sizes[i])) for i in range(len(inputs))]
            with no_grad():
                for ti, (t, a) in enumerate(zip(inputs, analytic)):
                    flat = t.data.reshape(-1)
                    idx = np.arange(flat.size)
                    if chosen is not None:
                        idx = chosen[ti]
                    elif max_checks is not None and flat.size > max_checks:
                        idx = np.sort(rng.choice(flat.size, max_checks, replace=False))
                    af = a.reshape(-1)
                    for k in idx:
                        orig = flat[k]
                        flat[k] = orig + h
                        fp = float(f().data)
                        flat[k] = orig - h
                        fm = float(f().data)
                        flat[k] = orig
                        num = (fp - fm) / (2 * h)
                        err = abs(af[k] - num) / max(1e-8, abs(af[k]) + abs(num))
                        worst = max(worst, err)
    finally:
        for t, (d, rg, g) in zip(inputs, saved):
            t.data, t.requires_grad, t.grad = d, rg, g
    return worst
