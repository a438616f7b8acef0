"""Differentiable layers with hand-written backward passes.

Every layer caches what its backward needs during ``forward`` and consumes
that cache in ``backward``, which returns the gradient with respect to the
layer input and accumulates parameter gradients into ``Param.grad``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import debug_check, random_init


class Param:
    """A learnable array and its gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Param(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    """Minimal container: discovers Params, buffers and child modules from attributes."""

    buffers: tuple[str, ...] = ()
    training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _walk(self, prefix: str, seen: set) -> Iterator[tuple[str, "Module"]]:
        # a module reachable by several attribute paths is visited once, under its first name
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for name, child in self.named_children():
            yield from child._walk(f"{prefix}{name}.", seen)

    def modules(self) -> Iterator["Module"]:
        for _, m in self._walk("", set()):
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for path, m in self._walk(prefix, set()):
            for name, value in vars(m).items():
                if isinstance(value, Param):
                    yield path + name, value

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, m in self._walk(prefix, set()):
            for name in m.buffers:
                yield path + name, getattr(m, name)

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        owner, _, name = dotted.rpartition(".")
        target = self
        for part in owner.split(".") if owner else []:
            target = target[int(part)] if isinstance(target, (list, tuple)) else getattr(target, part)
        if name not in target.buffers:
            raise KeyError(dotted)
        setattr(target, name, value)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self.modules():
            for name in m.buffers:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Sequential(Module):
    """Runs children in order; backward replays the executed-op tape in reverse."""

    def __init__(self, *layers: Module):
        self.layers = list(layers)
        self._tape: list[Module] = []

    def forward(self, x):
        self._tape = []
        for layer in self.layers:
            x = layer.forward(x)
            self._tape.append(layer)
        return x

    def backward(self, grad):
        if not self._tape and self.layers:
            raise RuntimeError("backward called without a recorded forward pass")
        while self._tape:
            grad = self._tape.pop().backward(grad)
        return grad


# -- convolution ------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _check_conv(x: np.ndarray, weight: np.ndarray, stride: int, padding: int, groups: int):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 4, got {x.shape}")
    out_c, cg, kh, kw = weight.shape
    if out_c % groups or x.shape[1] != cg * groups:
        raise ShapeError(
            f"conv expects {cg * groups} input channels (groups={groups}), got {x.shape[1]}")
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape[2:]} smaller than kernel {(kh, kw)} with padding {padding}")
    return ho, wo


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                   stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Cross-correlation of ``x`` (n, c, h, w) with ``weight`` (o, c/groups, kh, kw)."""
    ho, wo = _check_conv(x, weight, stride, padding, groups)
    out_c, cg, kh, kw = weight.shape
    og = out_c // groups
    xp = _pad(x, padding)
    outs = []
    for g in range(groups):
        win = _windows(xp[:, g * cg:(g + 1) * cg], kh, kw, stride, ho, wo)
        # (n, cg, ho, wo, kh, kw) x (og, cg, kh, kw) -> (n, ho, wo, og)
        y = np.tensordot(win, weight[g * og:(g + 1) * og], axes=([1, 4, 5], [1, 2, 3]))
        outs.append(y.transpose(0, 3, 1, 2))
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def _conv_input_grad(grad_out: np.ndarray, weight: np.ndarray, in_shape, stride: int,
                     padding: int, groups: int) -> np.ndarray:
    n, _, h, w = in_shape
    out_c, cg, kh, kw = weight.shape
    og = out_c // groups
    ho, wo = grad_out.shape[2:]
    gxp = np.zeros((n, cg * groups, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for g in range(groups):
        go = grad_out[:, g * og:(g + 1) * og]
        # (n, og, ho, wo) x (og, cg, kh, kw) -> (n, ho, wo, cg, kh, kw)
        cols = np.tensordot(go, weight[g * og:(g + 1) * og], axes=([1], [0]))
        for i in range(kh):
            for j in range(kw):
                gxp[:, g * cg:(g + 1) * cg,
                    i:i + (ho - 1) * stride + 1:stride,
                    j:j + (wo - 1) * stride + 1:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gxp)


def _conv_weight_grad(x: np.ndarray, grad_out: np.ndarray, kshape, stride: int, padding: int,
                      groups: int) -> np.ndarray:
    out_c, cg, kh, kw = kshape
    og = out_c // groups
    ho, wo = grad_out.shape[2:]
    xp = _pad(x, padding)
    parts = []
    for g in range(groups):
        win = _windows(xp[:, g * cg:(g + 1) * cg], kh, kw, stride, ho, wo)
        parts.append(np.tensordot(grad_out[:, g * og:(g + 1) * og], win,
                                  axes=([0, 2, 3], [0, 2, 3])))
    return parts[0] if groups == 1 else np.concatenate(parts, axis=0)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, stride: int = 1,
                    padding: int = 0, groups: int = 1):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    ho, wo = _check_conv(x, weight, stride, padding, groups)
    expected = (x.shape[0], weight.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out has shape {grad_out.shape}, forward output was {expected}")
    gx = _conv_input_grad(grad_out, weight, x.shape, stride, padding, groups)
    gw = _conv_weight_grad(x, grad_out, weight.shape, stride, padding, groups)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


def conv_transpose2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                             stride: int = 2, padding: int = 1) -> np.ndarray:
    """Transposed convolution; ``weight`` is (in_c, out_c, kh, kw).

    Computed as the input-gradient of the matching convolution, so output size
    is ``(h - 1)·stride - 2·padding + k``.
    """
    in_c, out_c, kh, kw = weight.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"transposed conv expects {in_c} input channels, got {x.shape[1]}")
    n, _, h, w = x.shape
    shape = (n, out_c, (h - 1) * stride - 2 * padding + kh, (w - 1) * stride - 2 * padding + kw)
    out = _conv_input_grad(x, weight, shape, stride, padding, 1)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def conv_transpose2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                              stride: int = 2, padding: int = 1):
    gx = conv2d_forward(grad_out, weight, None, stride, padding)
    gw = _conv_weight_grad(grad_out, x, weight.shape, stride, padding, 1)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


class Conv2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = True, rng=None, dtype=np.float64):
        if in_c % groups or out_c % groups:
            raise ShapeError(f"channels ({in_c}, {out_c}) not divisible by groups={groups}")
        self.in_c, self.out_c, self.k = in_c, out_c, k
        self.stride = stride
        # 3x3 -> 1, 1x1 -> 0: shape-preserving at stride 1
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        shape = (out_c, in_c // groups, k, k)
        if rng is None:
            self.weight = Param(np.zeros(shape, dtype=dtype))
        else:
            self.weight = Param(random_init(shape, rng=rng, dtype=dtype))
        self.bias = Param(np.zeros(out_c, dtype=dtype)) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        b = self.bias.data if self.bias is not None else None
        out = conv2d_forward(x, self.weight.data, b, self.stride, self.padding, self.groups)
        return debug_check(out, "conv2d")

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.weight.data, grad, self.stride, self.padding,
                                     self.groups)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class ConvTranspose2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int = 4, stride: int = 2, padding: int = 1,
                 bias: bool = True, rng=None, dtype=np.float64):
        self.stride, self.padding = stride, padding
        shape = (in_c, out_c, k, k)
        w = random_init(shape, rng=rng, fan=in_c * k * k, dtype=dtype) if rng is not None \
            else np.zeros(shape, dtype=dtype)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_c, dtype=dtype)) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        b = self.bias.data if self.bias is not None else None
        return conv_transpose2d_forward(x, self.weight.data, b, self.stride, self.padding)

    def backward(self, grad):
        gx, gw, gb = conv_transpose2d_backward(self._x, self.weight.data, grad, self.stride,
                                               self.padding)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class Dense(Module):
    """Fully-connected layer on (n, in_features) arrays."""

    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float64):
        shape = (out_features, in_features)
        w = random_init(shape, rng=rng, dtype=dtype) if rng is not None else np.zeros(shape, dtype)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_features, dtype=dtype))
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.weight.data.shape[1]:
            raise ShapeError(f"dense expects {self.weight.data.shape[1]} features, got {x.shape[-1]}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


class BatchNorm2d(Module):
    buffers = ("running_mean", "running_var")

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.eps, self.momentum = eps, momentum
        self._cache = None

    def forward(self, x):
        if self.training:
            if x.shape[0] < 2:
                raise ShapeError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var * m / max(m - 1, 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv_std, self.training)
        return self.gamma.data.reshape(1, -1, 1, 1) * xhat + self.beta.data.reshape(1, -1, 1, 1)

    def backward(self, grad):
        xhat, inv_std, training = self._cache
        self.gamma.grad += (grad * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += grad.sum(axis=(0, 2, 3))
        g = grad * self.gamma.data.reshape(1, -1, 1, 1)
        if not training:
            return g * inv_std.reshape(1, -1, 1, 1)
        mean_g = g.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (g - mean_g - xhat * mean_gx) * inv_std.reshape(1, -1, 1, 1)


# -- parameter-free layers --------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    if np.issubdtype(out.dtype, np.floating):
        # keep the open interval (0, 1) even where exp saturates
        lo, hi = np.finfo(out.dtype).tiny, np.nextafter(out.dtype.type(1), out.dtype.type(0))
        np.clip(out, lo, hi, out=out)
    return out


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)  # keeps NaN visible

    def backward(self, grad):
        return np.where(self._mask, grad, 0)


class Sigmoid(Module):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        return grad * self._y * (1 - self._y)


def pool_forward(kind: str, x: np.ndarray, k: int = 2, stride: int | None = None) -> np.ndarray:
    if kind == "global_avg":
        return x.mean(axis=(2, 3), keepdims=True)
    if kind == "global_max":
        return x.max(axis=(2, 3), keepdims=True)
    stride = k if stride is None else stride
    h, w = x.shape[2:]
    if k > h or k > w:
        raise ShapeError(f"pool window {k} exceeds spatial extent {(h, w)}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = _windows(x, k, k, stride, ho, wo)
    if kind == "max":
        return win.max(axis=(4, 5))
    if kind == "avg":
        return win.mean(axis=(4, 5))
    raise ValueError(f"unknown pool kind {kind!r}")


class Pool(Module):
    def __init__(self, kind: str, k: int = 2, stride: int | None = None):
        if kind not in ("max", "avg", "global_max", "global_avg"):
            raise ValueError(f"unknown pool kind {kind!r}")
        self.kind, self.k = kind, k
        self.stride = k if stride is None else stride

    def forward(self, x):
        self._x = x
        return pool_forward(self.kind, x, self.k, self.stride)

    def backward(self, grad):
        x = self._x
        n, c, h, w = x.shape
        if self.kind == "global_avg":
            return np.broadcast_to(grad / (h * w), x.shape).copy()
        if self.kind == "global_max":
            flat = x.reshape(n, c, -1)
            idx = flat.argmax(axis=2)
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx[..., None], grad.reshape(n, c, 1), axis=2)
            return gx.reshape(x.shape)
        k, s = self.k, self.stride
        ho, wo = grad.shape[2:]
        gx = np.zeros_like(x)
        if self.kind == "avg":
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s] += grad / (k * k)
            return gx
        win = _windows(x, k, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
        arg = win.argmax(axis=4)
        for t in range(k * k):
            i, j = divmod(t, k)
            gx[:, :, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s] += np.where(arg == t, grad, 0)
        return gx


def spatial_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over all h·w positions of each (batch, channel) map."""
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    e = np.exp(flat - flat.max(axis=2, keepdims=True))
    return (e / e.sum(axis=2, keepdims=True)).reshape(x.shape)


class SpatialSoftmax(Module):
    def forward(self, x):
        self._y = spatial_softmax(x)
        return self._y

    def backward(self, grad):
        y = self._y
        dot = (grad * y).sum(axis=(2, 3), keepdims=True)
        return y * (grad - dot)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


class UpsampleNearest(Module):
    def __init__(self, factor: int):
        self.factor = factor

    def forward(self, x):
        return upsample_nearest(x, self.factor)

    def backward(self, grad):
        f = self.factor
        if f == 1:
            return grad
        n, c, h, w = grad.shape
        return grad.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
