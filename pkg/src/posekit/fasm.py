"""Feature aggregation and selection blocks.

``FamBlock`` is the split/hierarchical 3x3 path of a bottleneck,
``FsmBlock`` re-weights its output with a channel vector (alpha) and a
location map (beta), and ``FasmBottleneck`` wires both into a residual unit:

    F = FAM(X)
    Y = X + (F + alpha*F) + (F + beta*F)
    out = relu(X + Y)
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (BatchNorm2d, Conv2d, Dense, Module, Pool, ReLU, Sequential, Sigmoid)
from .tensor import concat_channels, split_channels

FSM_MODES = ("none", "parallel", "cs_lss", "lss_cs")


def fam_param_count(c: int, s: int) -> int:
    """Number of 3x3 weights inside a FAM with ``c`` channels and ``s`` splits."""
    if s < 1 or c % s:
        raise ShapeError(f"{c} channels cannot be split into {s} groups")
    return (s - 1) * 9 * (c // s) ** 2


class FamBlock(Module):
    """1x1 reduce, split into ``s`` groups, hierarchical 3x3 convs, concat, 1x1 expand.

    The first split passes through untouched; split ``i`` is convolved after
    adding the previous split's output.
    """

    def __init__(self, in_c: int, mid_c: int, out_c: int, s: int = 4, stride: int = 1,
                 bn: bool = True, rng=None, dtype=np.float64):
        if s < 2:
            raise ConfigError(f"FAM needs at least 2 splits, got s={s}")
        if mid_c % s:
            raise ShapeError(f"{mid_c} channels cannot be split into {s} groups")
        self.s = s
        w = mid_c // s
        self.pre_conv = Conv2d(in_c, mid_c, 1, stride=stride, rng=rng, dtype=dtype)
        self.pre_bn = BatchNorm2d(mid_c, dtype=dtype) if bn else None
        self.pre_relu = ReLU()
        self.g = [Conv2d(w, w, 3, rng=rng, dtype=dtype) for _ in range(s - 1)]
        self.post_conv = Conv2d(mid_c, out_c, 1, rng=rng, dtype=dtype)
        self.post_bn = BatchNorm2d(out_c, dtype=dtype) if bn else None

    def aggregate(self, h: np.ndarray) -> list[np.ndarray]:
        """The split recurrence alone: returns y_1..y_s for the reduced features ``h``."""
        xs = split_channels(h, self.s)
        ys = [xs[0]]
        for i in range(1, self.s):
            ys.append(self.g[i - 1].forward(xs[i] + ys[-1]))
        return ys

    def aggregate_backward(self, grads: list[np.ndarray]) -> np.ndarray:
        gx = [None] * self.s
        carry = np.zeros_like(grads[-1])
        for i in range(self.s - 1, 0, -1):
            g_in = self.g[i - 1].backward(grads[i] + carry)
            gx[i] = g_in
            carry = g_in
        gx[0] = grads[0] + carry
        return concat_channels(gx)

    def forward(self, x):
        h = self.pre_conv.forward(x)
        if self.pre_bn is not None:
            h = self.pre_bn.forward(h)
        h = self.pre_relu.forward(h)
        out = self.post_conv.forward(concat_channels(self.aggregate(h)))
        if self.post_bn is not None:
            out = self.post_bn.forward(out)
        return out

    def backward(self, grad):
        if self.post_bn is not None:
            grad = self.post_bn.backward(grad)
        grad = self.post_conv.backward(grad)
        grad = self.aggregate_backward(split_channels(grad, self.s))
        grad = self.pre_relu.backward(grad)
        if self.pre_bn is not None:
            grad = self.pre_bn.backward(grad)
        return self.pre_conv.backward(grad)


class PlainPath(Module):
    """Standard ResNet bottleneck path (1x1, 3x3, 1x1), used when FAM is switched off."""

    def __init__(self, in_c: int, mid_c: int, out_c: int, stride: int = 1, bn: bool = True,
                 rng=None, dtype=np.float64):
        layers = [Conv2d(in_c, mid_c, 1, stride=stride, rng=rng, dtype=dtype)]
        if bn:
            layers.append(BatchNorm2d(mid_c, dtype=dtype))
        layers += [ReLU(), Conv2d(mid_c, mid_c, 3, rng=rng, dtype=dtype)]
        if bn:
            layers.append(BatchNorm2d(mid_c, dtype=dtype))
        layers += [ReLU(), Conv2d(mid_c, out_c, 1, rng=rng, dtype=dtype)]
        if bn:
            layers.append(BatchNorm2d(out_c, dtype=dtype))
        self.seq = Sequential(*layers)

    def forward(self, x):
        return self.seq.forward(x)

    def backward(self, grad):
        return self.seq.backward(grad)


class LocationSelection(Module):
    """beta = sigmoid(relu(W2(relu(W1 x)))), a (n, 1, h, w) map; returns x + beta*x."""

    def __init__(self, c: int, rng=None, dtype=np.float64):
        self.conv1 = Conv2d(c, 1, 1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(1, 1, 1, rng=rng, dtype=dtype)
        self.weight_net = Sequential(self.conv1, ReLU(), self.conv2, ReLU(), Sigmoid())
        self.beta = None

    def forward(self, x):
        self._x = x
        self.beta = self.weight_net.forward(x)
        return x + self.beta * x, self.beta

    def backward(self, grad):
        x, beta = self._x, self.beta
        g_beta = (grad * x).sum(axis=1, keepdims=True)
        return grad * (1 + beta) + self.weight_net.backward(g_beta)


class ChannelSelection(Module):
    """alpha = sigmoid(W2 relu(W1 z)), z = global_avg(x) + global_max(x); returns x + alpha*x.

    ``r_fc`` sets the hidden width c // r_fc of the two dense layers.
    """

    def __init__(self, c: int, r_fc: int = 4, rng=None, dtype=np.float64):
        hidden = max(c // r_fc, 1)
        self.avg = Pool("global_avg")
        self.max = Pool("global_max")
        self.fc1 = Dense(c, hidden, rng=rng, dtype=dtype)
        self.fc2 = Dense(hidden, c, rng=rng, dtype=dtype)
        self.weight_net = Sequential(self.fc1, ReLU(), self.fc2, Sigmoid())
        self.alpha = None

    def forward(self, x):
        n, c = x.shape[:2]
        self._x = x
        z = (self.avg.forward(x) + self.max.forward(x)).reshape(n, c)
        self.z = z
        self.alpha = self.weight_net.forward(z).reshape(n, c, 1, 1)
        return x + self.alpha * x, self.alpha

    def backward(self, grad):
        x, alpha = self._x, self.alpha
        n, c = x.shape[:2]
        g_alpha = (grad * x).sum(axis=(2, 3)).reshape(n, c)
        g_z = self.weight_net.backward(g_alpha).reshape(n, c, 1, 1)
        return grad * (1 + alpha) + self.avg.backward(g_z) + self.max.backward(g_z)


class FsmBlock(Module):
    """Combines channel and location selection on the aggregated features F.

    ``parallel`` returns (F + alpha*F) + (F + beta*F); ``cs_lss`` and ``lss_cs``
    chain the two selections in the named order.
    """

    def __init__(self, c: int, mode: str = "parallel", r_fc: int = 4, rng=None, dtype=np.float64):
        if mode not in FSM_MODES[1:]:
            raise ConfigError(f"unknown FSM mode {mode!r}")
        self.mode = mode
        self.cs = ChannelSelection(c, r_fc=r_fc, rng=rng, dtype=dtype)
        self.lss = LocationSelection(c, rng=rng, dtype=dtype)

    @property
    def alpha(self):
        return self.cs.alpha

    @property
    def beta(self):
        return self.lss.beta

    def forward(self, f, order: str = "cs_first"):
        if self.mode == "parallel":
            # both branches read only F; evaluation order is irrelevant
            if order == "cs_first":
                a, _ = self.cs.forward(f)
                b, _ = self.lss.forward(f)
            else:
                b, _ = self.lss.forward(f)
                a, _ = self.cs.forward(f)
            return a + b
        first, second = (self.cs, self.lss) if self.mode == "cs_lss" else (self.lss, self.cs)
        h, _ = first.forward(f)
        out, _ = second.forward(h)
        return out

    def backward(self, grad):
        if self.mode == "parallel":
            return self.cs.backward(grad) + self.lss.backward(grad)
        first, second = (self.cs, self.lss) if self.mode == "cs_lss" else (self.lss, self.cs)
        return first.backward(second.backward(grad))


class FasmBottleneck(Module):
    """Residual bottleneck with FAM on the non-identity path and FSM at its end.

    With ``fsm="none"`` the unit is a standard ``relu(X + F)`` residual.
    ``double_identity`` keeps the literal ``relu(X + Y)`` with Y already
    containing X; turning it off gives ``relu(Y)``.
    """

    def __init__(self, in_c: int, out_c: int, stride: int = 1, s: int = 4, expansion: int = 2,
                 fam: bool = True, fsm: str = "parallel", r_fc: int = 4,
                 double_identity: bool = True, bn: bool = True, rng=None, dtype=np.float64):
        if fsm not in FSM_MODES:
            raise ConfigError(f"unknown FSM mode {fsm!r}")
        mid_c = out_c // expansion
        if fam:
            self.path = FamBlock(in_c, mid_c, out_c, s=s, stride=stride, bn=bn, rng=rng, dtype=dtype)
        else:
            self.path = PlainPath(in_c, mid_c, out_c, stride=stride, bn=bn, rng=rng, dtype=dtype)
        self.fsm = FsmBlock(out_c, fsm, r_fc=r_fc, rng=rng, dtype=dtype) if fsm != "none" else None
        if stride != 1 or in_c != out_c:
            layers = [Conv2d(in_c, out_c, 1, stride=stride, rng=rng, dtype=dtype)]
            if bn:
                layers.append(BatchNorm2d(out_c, dtype=dtype))
            self.shortcut = Sequential(*layers)
        else:
            self.shortcut = None
        self.double_identity = double_identity
        self.out_relu = ReLU()

    def forward(self, x, fsm_order: str = "cs_first"):
        ident = self.shortcut.forward(x) if self.shortcut is not None else x
        f = self.path.forward(x)
        if f.shape != ident.shape:
            raise ShapeError(f"residual path {f.shape} does not match identity path {ident.shape}")
        self.features = f
        if self.fsm is None:
            return self.out_relu.forward(ident + f)
        y = ident + self.fsm.forward(f, order=fsm_order)
        return self.out_relu.forward(ident + y if self.double_identity else y)

    def backward(self, grad):
        g = self.out_relu.backward(grad)
        if self.fsm is None:
            g_ident, g_f = g, g
        else:
            g_ident = 2 * g if self.double_identity else g
            g_f = self.fsm.backward(g)
        gx = self.path.backward(g_f)
        if self.shortcut is not None:
            return gx + self.shortcut.backward(g_ident)
        return gx + g_ident
