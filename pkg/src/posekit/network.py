"""Full pose network: stem, FASM encoder stages, feature fusion and heatmap heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .fasm import FSM_MODES, FasmBottleneck
from .layers import (BatchNorm2d, Conv2d, ConvTranspose2d, Module, ReLU, Sequential,
                     SpatialSoftmax, UpsampleNearest)
from .tensor import concat_channels, depth_to_space, make_rng, space_to_depth

HEADS = ("duc", "sbn")


@dataclass
class NetworkConfig:
    stage_widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: list[int] = field(default_factory=lambda: [1, 1, 1])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2])
    stem_width: int = 16
    stem_stride: int = 2
    in_channels: int = 1
    s: int = 4
    f: int = 8
    K: int = 13
    head: str = "duc"
    ffm: bool = True
    ffm_to_head: bool = True
    aux_weight: float = 0.5
    r_fc: int = 4
    fam: bool = True
    fsm: str = "parallel"
    expansion: int = 2
    deconv_filters: int = 256
    double_identity: bool = True
    bn: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (len(self.stage_widths) == len(self.blocks) == len(self.strides)):
            raise ConfigError("stage_widths, blocks and strides must have equal length")
        if not self.stage_widths:
            raise ConfigError("need at least one encoder stage")
        stride = self.stem_stride * math.prod(self.strides)
        if stride != self.f:
            raise ConfigError(f"declared f={self.f} but the encoder's cumulative stride is {stride}")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.fsm not in FSM_MODES:
            raise ConfigError(f"fsm must be one of {FSM_MODES}, got {self.fsm!r}")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be non-negative")
        for w in self.stage_widths:
            if w % self.expansion or (self.fam and (w // self.expansion) % self.s):
                raise ConfigError(f"stage width {w} incompatible with expansion={self.expansion}, s={self.s}")

    @property
    def low_stride(self) -> int:
        return self.stem_stride * self.strides[0]

    def head_input_stride(self) -> int:
        return self.low_stride if (self.ffm and self.ffm_to_head) else self.f

    # -- flat key = value text --------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {lineno}: unrecognised entry {raw!r}")
            kwargs[key] = _parse_value(types[key], value)
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _parse_value(type_name, value: str):
    t = str(type_name)
    try:
        if "list" in t:
            return [int(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
        if t == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes", "on")
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {t}") from None
    return value


@dataclass
class ForwardArtifacts:
    heatmaps: np.ndarray
    normalization: str
    aux_heatmaps: np.ndarray | None
    low: np.ndarray
    high: np.ndarray
    taps: dict


class Encoder(Module):
    def __init__(self, cfg: NetworkConfig, rng, dtype=np.float64):
        stem = [Conv2d(cfg.in_channels, cfg.stem_width, 3, stride=cfg.stem_stride, rng=rng, dtype=dtype)]
        if cfg.bn:
            stem.append(BatchNorm2d(cfg.stem_width, dtype=dtype))
        stem.append(ReLU())
        self.stem = Sequential(*stem)
        self.stages = []
        in_c = cfg.stem_width
        for width, count, stride in zip(cfg.stage_widths, cfg.blocks, cfg.strides):
            units = []
            for b in range(count):
                units.append(FasmBottleneck(
                    in_c, width, stride=stride if b == 0 else 1, s=cfg.s, expansion=cfg.expansion,
                    fam=cfg.fam, fsm=cfg.fsm, r_fc=cfg.r_fc, double_identity=cfg.double_identity,
                    bn=cfg.bn, rng=rng, dtype=dtype))
                in_c = width
            self.stages.append(Sequential(*units))
        self.f = cfg.f

    def bottlenecks(self) -> list[FasmBottleneck]:
        return [u for stage in self.stages for u in stage.layers]

    def named_bottlenecks(self):
        return [(f"stage{i + 1}_block{j + 1}", u) for i, stage in enumerate(self.stages)
                for j, u in enumerate(stage.layers)]

    def forward(self, x, check_size: bool = True):
        if check_size and (x.shape[2] % self.f or x.shape[3] % self.f):
            raise ShapeError(f"input size {x.shape[2:]} not divisible by f={self.f}")
        h = self.stem.forward(x)
        taps = {"conv1": h}
        for i, stage in enumerate(self.stages):
            h = stage.forward(h)
            taps[f"conv{i + 2}"] = h
        return h, taps

    def backward(self, grad_deep, tap_grads: dict | None = None):
        tap_grads = tap_grads or {}
        g = grad_deep
        for i in range(len(self.stages) - 1, -1, -1):
            extra = tap_grads.get(f"conv{i + 2}")
            if extra is not None:
                g = g + extra
            g = self.stages[i].backward(g)
        return self.stem.backward(g)


def encoder_forward(cfg: NetworkConfig, x: np.ndarray, model: "PoseNet | None" = None):
    model = model if model is not None else PoseNet(cfg)
    return model.encoder.forward(x)


class FeatureFusion(Module):
    """Upsample high to low's size, project low to high's width, concat, 1x1 to ``out_c``."""

    def __init__(self, low_c: int, high_c: int, out_c: int, factor: int, rng=None, dtype=np.float64):
        self.proj = Conv2d(low_c, high_c, 1, rng=rng, dtype=dtype)
        self.up = UpsampleNearest(factor)
        self.fuse = Conv2d(2 * high_c, out_c, 1, rng=rng, dtype=dtype)
        self.high_c = high_c

    def forward(self, low, high):
        p = self.proj.forward(low)
        u = self.up.forward(high)
        if u.shape[2:] != p.shape[2:]:
            raise ShapeError(f"upsampled high {u.shape[2:]} does not match low {p.shape[2:]}")
        return self.fuse.forward(concat_channels([p, u]))

    def backward(self, grad):
        g = self.fuse.backward(grad)
        return self.proj.backward(g[:, :self.high_c]), self.up.backward(g[:, self.high_c:])


def ffm_fuse(fusion: FeatureFusion, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    return fusion.forward(low, high)


class DucHead(Module):
    """1x1 conv to f²·K channels, depth-to-space by f, spatial softmax per joint."""

    operators = ("conv2d", "depth_to_space", "spatial_softmax")

    def __init__(self, in_c: int, f: int, K: int, rng=None, dtype=np.float64):
        self.f, self.K = f, K
        self.conv = Conv2d(in_c, f * f * K, 1, rng=rng, dtype=dtype)
        self.softmax = SpatialSoftmax()
        self.pre_shuffle = None

    def forward(self, x):
        self.pre_shuffle = self.conv.forward(x)
        return self.softmax.forward(depth_to_space(self.pre_shuffle, self.f))

    def backward(self, grad):
        g = space_to_depth(self.softmax.backward(grad), self.f)
        return self.conv.backward(g)


def duc_head(x: np.ndarray, f: int, K: int, head: DucHead | None = None, rng=None) -> np.ndarray:
    head = head if head is not None else DucHead(x.shape[1], f, K, rng=rng, dtype=x.dtype)
    return head.forward(x)


class SbnDeconvHead(Module):
    """Stacked 4x4 stride-2 transposed convs (BN + ReLU after each) then a 1x1 conv to K maps."""

    operators = ("conv_transpose2d", "batchnorm", "relu", "conv2d")

    def __init__(self, in_c: int, K: int, n_deconv: int = 3, filters: int = 256, bn: bool = True,
                 rng=None, dtype=np.float64):
        layers = []
        c = in_c
        for _ in range(n_deconv):
            layers.append(ConvTranspose2d(c, filters, 4, 2, 1, bias=not bn, rng=rng, dtype=dtype))
            if bn:
                layers.append(BatchNorm2d(filters, dtype=dtype))
            layers.append(ReLU())
            c = filters
        layers.append(Conv2d(c, K, 1, rng=rng, dtype=dtype))
        self.seq = Sequential(*layers)

    def forward(self, x):
        return self.seq.forward(x)

    def backward(self, grad):
        return self.seq.backward(grad)


class PoseNet(Module):
    """Encoder, optional feature fusion, and a DUC or deconvolution head."""

    def __init__(self, cfg: NetworkConfig, rng=None, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else make_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng, dtype)
        low_c, high_c = cfg.stage_widths[0], cfg.stage_widths[-1]
        up = cfg.f // cfg.low_stride
        self.ffm = FeatureFusion(low_c, high_c, high_c, up, rng=rng, dtype=dtype) if cfg.ffm else None
        factor = cfg.head_input_stride()
        if cfg.head == "duc":
            self.head = DucHead(high_c, factor, cfg.K, rng=rng, dtype=dtype)
        else:
            n_deconv = int(round(math.log2(factor)))
            if 2 ** n_deconv != factor:
                raise ConfigError(f"deconvolution head needs a power-of-two stride, got {factor}")
            self.head = SbnDeconvHead(high_c, cfg.K, n_deconv, cfg.deconv_filters, bn=cfg.bn,
                                      rng=rng, dtype=dtype)
        # with the fusion kept off the head, the auxiliary head reads the fused map instead
        self.aux_on_fused = cfg.ffm and not cfg.ffm_to_head
        if cfg.aux_weight > 0:
            self.aux = Conv2d(high_c if self.aux_on_fused else low_c, cfg.K, 1, rng=rng, dtype=dtype)
            self.aux_up = UpsampleNearest(cfg.low_stride)
        else:
            self.aux = None
            self.aux_up = None

    @property
    def normalization(self) -> str:
        return "sum" if self.cfg.head == "duc" else "peak"

    def forward(self, x, check_size: bool = True) -> ForwardArtifacts:
        deep, taps = self.encoder.forward(x, check_size=check_size)
        low = taps["conv2"]
        feats = deep
        aux_in = low
        if self.ffm is not None:
            fused = self.ffm.forward(low, deep)
            if self.cfg.ffm_to_head:
                feats = fused
            else:
                aux_in = fused
            self._fused = fused
        heat = self.head.forward(feats)
        aux = self.aux_up.forward(self.aux.forward(aux_in)) if self.aux is not None else None
        return ForwardArtifacts(heat, self.normalization, aux, low, deep, taps)

    def backward(self, grad_heat, grad_aux=None):
        g_feats = self.head.backward(grad_heat)
        g_aux_in = None
        if self.aux is not None and grad_aux is not None:
            g_aux_in = self.aux.backward(self.aux_up.backward(grad_aux))
        g_low = None
        g_deep = g_feats
        if self.ffm is not None:
            if self.cfg.ffm_to_head:
                g_low, g_deep = self.ffm.backward(g_feats)
                g_aux_low = g_aux_in
            else:
                g_fused = g_aux_in if g_aux_in is not None else np.zeros_like(self._fused)
                g_low, g_high = self.ffm.backward(g_fused)
                g_deep = g_deep + g_high
                g_aux_low = None
        else:
            g_aux_low = g_aux_in
        if g_aux_low is not None:
            g_low = g_aux_low if g_low is None else g_low + g_aux_low
        taps = {"conv2": g_low} if g_low is not None else None
        return self.encoder.backward(g_deep, taps)


def network_forward(cfg: NetworkConfig, x: np.ndarray, model: PoseNet | None = None) -> ForwardArtifacts:
    model = model if model is not None else PoseNet(cfg)
    return model.forward(x)
