"""Central finite-difference checks of the hand-written backward passes."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers as L
from .codec import mse_loss, ohkm_mse_loss, render_targets, to_compare_domain, Pose
from .fasm import ChannelSelection, FamBlock, FasmBottleneck, LocationSelection
from .network import NetworkConfig, PoseNet
from .tensor import make_rng

EPS = 1e-5
THRESHOLD = 1e-4


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    checked: int
    kinks: int = 0


@dataclass
class GradReport:
    scope: str
    checks: list[TensorCheck] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def passed(self, threshold: float = THRESHOLD) -> bool:
        return self.max_rel_error < threshold

    def lines(self) -> list[str]:
        out = [f"{self.scope}: max rel error {self.max_rel_error:.3e} ({self.seconds:.1f}s)"]
        for c in self.checks:
            kink = f", {c.kinks} kink(s) skipped" if c.kinks else ""
            out.append(f"  {c.name:<40} {c.max_rel_error:.3e} over {c.checked} entries{kink}")
        return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|), floored at 1e-3 of the tensor's gradient scale."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(1e-3 * scale, 1e-12))
    return np.abs(analytic - numeric) / denom


def _sample(size: int, max_entries: int | None, rng) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def _diff(a, b) -> float:
    if np.ndim(a) == 0:
        return float(a - b)
    return math.fsum((np.asarray(a) - np.asarray(b)).ravel())


def check_gradients(loss_fn: Callable[[], float], backward_fn: Callable[[], dict],
                    tensors: dict[str, np.ndarray], eps: float = EPS, max_entries: int | None = None,
                    rng=None, kink_tol: float = 1e-3,
                    kink_floor: float = 1e-6) -> list[TensorCheck]:
    """Compare analytic gradients with central differences.

    ``tensors`` maps names to arrays that ``loss_fn`` reads (mutated in place
    while probing). ``backward_fn`` runs a fresh forward/backward and returns
    the analytic gradient for every name. An entry whose error exceeds
    ``kink_floor`` while its one-sided slopes disagree by more than
    ``kink_tol`` of the tensor's gradient scale (a ReLU or max switching
    inside the probe interval) is counted as a kink and left out of the error.

    ``loss_fn`` may return an array of loss terms instead of a scalar. The
    differences are then taken term by term before summing, so terms the
    probe does not touch cancel exactly and roundoff stays local.
    """
    rng = rng if rng is not None else make_rng(0)
    analytic = backward_fn()
    results = []
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        idx = _sample(flat.size, max_entries, rng)
        num = np.zeros(idx.size)
        jump = np.zeros(idx.size)
        base = loss_fn()
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn()
            flat[i] = old - eps
            lm = loss_fn()
            flat[i] = old
            num[j] = _diff(lp, lm) / (2 * eps)
            jump[j] = abs(_diff(lp, base) - _diff(base, lm)) / eps
        a = analytic[name].reshape(-1)[idx]
        err = rel_error(a, num)
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        kink = (err > kink_floor) & (jump > kink_tol * np.maximum(np.abs(num), 1e-3 * scale))
        err[kink] = 0.0
        results.append(TensorCheck(name, float(err.max(initial=0.0)), int(idx.size), int(kink.sum())))
    return results


def check_module(module: L.Module, x: np.ndarray, rng=None, max_entries: int | None = None,
                 check_input: bool = True, eps: float = EPS) -> list[TensorCheck]:
    """Gradient check of a single-input module under the loss sum(w * module(x))."""
    rng = rng if rng is not None else make_rng(1)
    out = module.forward(x)
    w = rng.standard_normal(out.shape)
    params = dict(module.named_parameters())

    def loss():
        return module.forward(x) * w

    def grads():
        module.zero_grad()
        module.forward(x)
        gx = module.backward(w)
        g = {n: p.grad.copy() for n, p in params.items()}
        g["input"] = gx
        return g

    tensors = {n: p.data for n, p in params.items()}
    if check_input:
        tensors["input"] = x
    return check_gradients(loss, grads, tensors, eps=eps, max_entries=max_entries, rng=rng)


# -- scopes -----------------------------------------------------------------

def _randomize_bn(module: L.Module, rng) -> None:
    for m in module.modules():
        if isinstance(m, L.BatchNorm2d):
            c = m.gamma.data.size
            m.gamma.data[...] = rng.uniform(0.5, 1.5, c)
            m.beta.data[...] = rng.uniform(-0.2, 0.2, c)
            m.running_mean = rng.uniform(-0.2, 0.2, c)
            m.running_var = rng.uniform(0.5, 1.5, c)


def _randomize_biases(module: L.Module, rng) -> None:
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.uniform(-0.2, 0.2, p.data.shape)


def layer_cases(rng) -> dict[str, tuple[L.Module, np.ndarray]]:
    x = rng.standard_normal((2, 3, 5, 5))
    bn_train = L.BatchNorm2d(3)
    _randomize_bn(bn_train, rng)
    bn_eval = L.BatchNorm2d(3)
    _randomize_bn(bn_eval, rng)
    bn_eval.eval()
    conv = L.Conv2d(3, 4, 3, rng=rng)
    conv_s2 = L.Conv2d(3, 4, 3, stride=2, rng=rng)
    conv_g = L.Conv2d(4, 6, 3, groups=2, rng=rng)
    deconv = L.ConvTranspose2d(3, 2, 4, 2, 1, rng=rng)
    for m in (conv, conv_s2, conv_g, deconv):
        _randomize_biases(m, rng)
    dense = L.Dense(6, 4, rng=rng)
    _randomize_biases(dense, rng)
    return {
        "conv2d 3x3": (conv, x),
        "conv2d 3x3 stride 2": (conv_s2, x),
        "conv2d grouped": (conv_g, rng.standard_normal((2, 4, 5, 5))),
        "conv_transpose2d 4x4 stride 2": (deconv, x),
        "dense": (dense, rng.standard_normal((3, 6))),
        "batchnorm train": (bn_train, x),
        "batchnorm eval": (bn_eval, x),
        "relu": (L.ReLU(), x),
        "sigmoid": (L.Sigmoid(), x),
        "max pool": (L.Pool("max", 2, 2), rng.standard_normal((2, 3, 6, 6))),
        "avg pool": (L.Pool("avg", 3, 2), x),
        "global max pool": (L.Pool("global_max"), x),
        "global avg pool": (L.Pool("global_avg"), x),
        "spatial softmax": (L.SpatialSoftmax(), x),
        "nearest upsample": (L.UpsampleNearest(2), x),
    }


def fasm_cases(rng) -> dict[str, tuple[L.Module, np.ndarray]]:
    x = rng.standard_normal((2, 8, 6, 5))
    cases = {
        "lss": LocationSelection(8, rng=rng),
        "cs": ChannelSelection(8, r_fc=2, rng=rng),
        "fam": FamBlock(8, 8, 8, s=4, rng=rng),
        "fasm bottleneck": FasmBottleneck(8, 8, s=4, expansion=1, rng=rng),
        "fasm bottleneck stride 2": FasmBottleneck(8, 16, stride=2, s=4, expansion=2, rng=rng),
        "fasm bottleneck cs->lss": FasmBottleneck(8, 8, s=2, expansion=2, fsm="cs_lss", rng=rng),
    }
    out = {}
    for name, m in cases.items():
        _randomize_bn(m, rng)
        _randomize_biases(m, rng)
        m.eval()
        out[name] = (_FirstOutput(m) if name in ("lss", "cs") else m, x)
    return out


class _FirstOutput(L.Module):
    """Adapter for selection blocks that return (features, weights)."""

    def __init__(self, inner):
        self.inner = inner

    def forward(self, x):
        return self.inner.forward(x)[0]

    def backward(self, grad):
        return self.inner.backward(grad)


def tiny_network_config(**overrides) -> NetworkConfig:
    base = dict(stage_widths=[8, 16], blocks=[1, 1], strides=[1, 2], stem_width=8, stem_stride=2,
                f=4, K=3, s=2, expansion=2, r_fc=2, head="duc", ffm=True, aux_weight=0.5)
    base.update(overrides)
    return NetworkConfig(**base)


def end_to_end_check(cfg: NetworkConfig | None = None, rng=None, max_entries: int | None = 12,
                     r: int = 2, eps: float = EPS) -> list[TensorCheck]:
    """Check the full training loss (compare-domain OHKM + auxiliary MSE) of a tiny network."""
    cfg = cfg or tiny_network_config()
    rng = rng if rng is not None else make_rng(7)
    net = PoseNet(cfg, rng=rng)
    _randomize_bn(net, rng)
    _randomize_biases(net, rng)
    net.eval()
    x = rng.standard_normal((2, cfg.in_channels, 32, 24))
    poses = [Pose(np.column_stack([rng.uniform(2, 21, cfg.K), rng.uniform(2, 29, cfg.K),
                                   np.full(cfg.K, 2.0)])) for _ in range(2)]
    target, mask = render_targets(poses, (32, 24))

    def loss_and_grads(want_grad):
        out = net.forward(x)
        pred, back = to_compare_domain(out.heatmaps, out.normalization, "peak")
        res = ohkm_mse_loss(pred, target.maps, mask, r=r, return_grad=want_grad)
        aux_res = mse_loss(out.aux_heatmaps, target.maps, mask, return_grad=want_grad) \
            if out.aux_heatmaps is not None else None
        if not want_grad:
            return res + (cfg.aux_weight * aux_res if aux_res is not None else 0.0)
        loss, g = res
        g_aux = cfg.aux_weight * aux_res[1] if aux_res is not None else None
        return net.backward(back(g), g_aux)

    params = dict(net.named_parameters())

    def grads():
        net.zero_grad()
        gx = loss_and_grads(True)
        g = {n: p.grad.copy() for n, p in params.items()}
        g["input"] = gx
        return g

    tensors = {n: p.data for n, p in params.items()}
    tensors["input"] = x
    return check_gradients(lambda: loss_and_grads(False), grads, tensors, eps=eps,
                           max_entries=max_entries, rng=rng)


SCOPES = ("layers", "fasm", "end-to-end")


def run_gradcheck(scope: str = "all", seed: int = 0, max_entries: int | None = None) -> list[GradReport]:
    """Run one scope ('layers', 'fasm', 'end-to-end', a single layer case name, or 'all')."""
    rng = make_rng(seed)
    reports = []
    layer_map = layer_cases(rng)
    fasm_map = fasm_cases(rng)
    if scope in ("all", "layers"):
        names = [("layers", n) for n in layer_map]
    elif scope in layer_map:
        names = [("layers", scope)]
    else:
        names = []
    if scope in ("all", "fasm"):
        names += [("fasm", n) for n in fasm_map]
    elif scope in fasm_map:
        names += [("fasm", scope)]
    for group, name in names:
        module, x = (layer_map if group == "layers" else fasm_map)[name]
        t = time.perf_counter()
        checks = check_module(module, x.copy(), rng=rng, max_entries=max_entries)
        reports.append(GradReport(name, checks, time.perf_counter() - t))
    if scope in ("all", "end-to-end"):
        t = time.perf_counter()
        checks = end_to_end_check(rng=rng)
        reports.append(GradReport("end-to-end", checks, time.perf_counter() - t))
    if not reports:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return reports
