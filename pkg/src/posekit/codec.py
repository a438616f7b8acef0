"""Keypoints <-> heatmaps: target rendering, OHKM loss, decoding, flip testing, augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError


@dataclass
class Pose:
    """K keypoints as rows of (x, y, v); v is 0 unlabeled, 1 labeled-invisible, 2 visible."""

    keypoints: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.ndim == 1:
            kp = kp.reshape(-1, 3)
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise ShapeError(f"pose keypoints must be (K, 3), got {kp.shape}")
        self.keypoints = kp

    @property
    def K(self) -> int:
        return self.keypoints.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def visibility(self) -> np.ndarray:
        return self.keypoints[:, 2]

    def flat(self) -> list[float]:
        return [float(v) for v in self.keypoints.ravel()]


@dataclass
class HeatmapStack:
    """(n, K, h, w) maps that are either peak-1 (max <= 1) or sum-1 per map."""

    maps: np.ndarray
    normalization: str = "peak"

    def __post_init__(self):
        maps = np.asarray(self.maps)
        if maps.ndim != 4:
            raise ShapeError(f"heatmaps must be (n, K, h, w), got {maps.shape}")
        if self.normalization == "peak":
            if maps.size and maps.max() > 1 + 1e-9:
                raise ValueError("peak-normalized maps must not exceed 1")
        elif self.normalization == "sum":
            if maps.size and np.abs(maps.sum(axis=(2, 3)) - 1).max() > 1e-6:
                raise ValueError("sum-normalized maps must each sum to 1")
        else:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        self.maps = maps

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps.shape[2], self.maps.shape[3]


@dataclass
class FlipPairs:
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def validate(self, K: int) -> None:
        seen = set()
        for a, b in self.pairs:
            if a in seen or b in seen or a == b:
                raise ConfigError(f"flip pairs must be disjoint, offending pair {(a, b)}")
            if not (0 <= a < K and 0 <= b < K):
                raise ConfigError(f"flip pair {(a, b)} out of range for K={K}")
            seen.update((a, b))

    def permutation(self, K: int) -> np.ndarray:
        self.validate(K)
        perm = np.arange(K)
        for a, b in self.pairs:
            perm[a], perm[b] = b, a
        return perm


# -- targets and loss -------------------------------------------------------

def render_targets(poses: Sequence[Pose], resolution: tuple[int, int], sigma: float = 1.0):
    """Peak-1 Gaussian maps centred on the rounded keypoint location.

    Returns ``(HeatmapStack, mask)``; joints with v=0, or whose rounded centre
    falls outside the map, get an all-zero map and mask 0.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = resolution
    K = poses[0].K if poses else 0
    maps = np.zeros((len(poses), K, h, w))
    mask = np.zeros((len(poses), K))
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    for n, pose in enumerate(poses):
        for k, (x, y, v) in enumerate(pose.keypoints):
            if v <= 0:
                continue
            cx, cy = np.floor(x + 0.5), np.floor(y + 0.5)
            if not (0 <= cx < w and 0 <= cy < h):
                continue
            maps[n, k] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
            mask[n, k] = 1
    return HeatmapStack(maps, "peak"), mask


def per_joint_mse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return ((pred - target) ** 2).mean(axis=(2, 3))


def _top_r_weights(losses: np.ndarray, mask: np.ndarray, r: int) -> np.ndarray:
    """Per-(sample, joint) weights that average the r largest unmasked losses of each sample.

    Ties go to the lower joint index. Samples with no unmasked joints get zero weight.
    """
    n, K = losses.shape
    weights = np.zeros_like(losses)
    for i in range(n):
        idx = np.flatnonzero(mask[i] > 0)
        if idx.size == 0:
            continue
        # stable sort on -loss keeps lower indices first among ties
        order = idx[np.argsort(-losses[i, idx], kind="stable")]
        chosen = order[:min(r, idx.size)]
        weights[i, chosen] = 1.0 / chosen.size
    valid = (mask > 0).any(axis=1).sum()
    return weights / max(valid, 1)


def ohkm_mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None, r: int = 8,
                  return_grad: bool = False):
    """Mean of the ``r`` largest per-joint MSEs of each sample, averaged over samples.

    ``pred`` and ``target`` are (n, K, h, w) in the same normalization; the
    gradient, when requested, is with respect to ``pred`` and is exactly zero
    for masked joints.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    n, K = pred.shape[:2]
    if not 1 <= r <= K:
        raise ValueError(f"R must lie in [1, {K}], got {r}")
    mask = np.ones((n, K)) if mask is None else np.asarray(mask, dtype=np.float64)
    losses = per_joint_mse(pred, target)
    weights = _top_r_weights(losses, mask, r)
    loss = float((weights * losses).sum())
    if not return_grad:
        return loss
    hw = pred.shape[2] * pred.shape[3]
    grad = (2.0 / hw) * weights[:, :, None, None] * (pred - target)
    return loss, grad


def mse_loss(pred, target, mask=None, return_grad=False):
    """Plain per-joint MSE averaged over unmasked joints (OHKM with R = K)."""
    return ohkm_mse_loss(pred, target, mask, r=pred.shape[1], return_grad=return_grad)


def top_r_mean(values: Sequence[float], r: int) -> float:
    """Mean of the ``r`` largest entries, using the same selection rule as the loss."""
    v = np.asarray(values, dtype=np.float64).reshape(1, -1)
    if not 1 <= r <= v.size:
        raise ValueError(f"R must lie in [1, {v.size}], got {r}")
    return float((_top_r_weights(v, np.ones_like(v), r) * v).sum())


def sum_normalize(maps: np.ndarray) -> np.ndarray:
    """Scale each non-empty map to unit sum (used for targets in the ``sum`` domain)."""
    total = maps.sum(axis=(2, 3), keepdims=True)
    return np.where(total > 0, maps / np.where(total > 0, total, 1), 0)


def peak_normalize(maps: np.ndarray) -> np.ndarray:
    """Divide each map by its maximum."""
    return maps / maps.max(axis=(2, 3), keepdims=True)


def peak_normalize_backward(maps: np.ndarray, grad: np.ndarray) -> np.ndarray:
    n, K, h, w = maps.shape
    flat = maps.reshape(n, K, -1)
    idx = flat.argmax(axis=2)
    m = np.take_along_axis(flat, idx[..., None], axis=2)
    g = grad.reshape(n, K, -1)
    out = g / m
    corr = (g * flat).sum(axis=2, keepdims=True) / m ** 2
    np.put_along_axis(out, idx[..., None], np.take_along_axis(out, idx[..., None], axis=2) - corr,
                      axis=2)
    return out.reshape(maps.shape)


def to_compare_domain(maps: np.ndarray, normalization: str, domain: str = "peak"):
    """Bring predictions into the loss domain; returns ``(values, backward_fn)``."""
    if normalization == domain:
        return maps, lambda g: g
    if domain == "peak" and normalization == "sum":
        return peak_normalize(maps), lambda g: peak_normalize_backward(maps, g)
    raise ValueError(f"cannot compare {normalization!r} maps in the {domain!r} domain")


# -- decoding ---------------------------------------------------------------

def decode_heatmaps(maps: np.ndarray, offset: float = 0.25, second: str = "global"):
    """Argmax per map, nudged ``offset`` px toward the second-largest response.

    Returns ``(coords, confidence)`` with coords (n, K, 2) as (x, y). The second
    response is searched over the whole map (``global``) or the 8-neighbourhood
    (``neighbor``). When it is not unique, or equals the maximum of a flat map,
    no offset is applied.
    """
    if second not in ("global", "neighbor"):
        raise ValueError(f"second must be 'global' or 'neighbor', got {second!r}")
    maps = np.asarray(maps)
    n, K, h, w = maps.shape
    coords = np.zeros((n, K, 2))
    conf = np.zeros((n, K))
    for i in range(n):
        for k in range(K):
            hm = maps[i, k]
            flat = hm.ravel()
            a = int(flat.argmax())
            ay, ax = divmod(a, w)
            conf[i, k] = flat[a]
            coords[i, k] = ax, ay
            if second == "global":
                rest = flat.copy()
                rest[a] = -np.inf
                cand = rest
            else:
                cand = np.full(flat.shape, -np.inf)
                y0, y1 = max(ay - 1, 0), min(ay + 2, h)
                x0, x1 = max(ax - 1, 0), min(ax + 2, w)
                cand.reshape(h, w)[y0:y1, x0:x1] = hm[y0:y1, x0:x1]
                cand[a] = -np.inf
            if not np.isfinite(cand).any():
                continue
            b = int(cand.argmax())
            top2 = cand[b]
            if np.count_nonzero(cand == top2) > 1 or (top2 == flat[a] and np.all(flat == flat[a])):
                continue
            by, bx = divmod(b, w)
            coords[i, k, 0] += offset * np.sign(bx - ax)
            coords[i, k, 1] += offset * np.sign(by - ay)
    return coords, conf


def decode_poses(maps: np.ndarray, **kwargs) -> list[Pose]:
    coords, conf = decode_heatmaps(maps, **kwargs)
    return [Pose(np.concatenate([coords[i], conf[i][:, None]], axis=1)) for i in range(len(coords))]


# -- flip test --------------------------------------------------------------

def flip_average(predict: Callable[[np.ndarray], np.ndarray], x: np.ndarray, pairs: FlipPairs,
                 shift: bool = False) -> np.ndarray:
    """Average predictions on ``x`` and its mirror, un-mirroring and swapping paired joints.

    ``shift`` moves the un-mirrored maps one pixel right, the alignment fix
    used by heads whose output grid is offset from the input grid.
    """
    plain = predict(x)
    flipped = predict(np.ascontiguousarray(x[..., ::-1]))
    back = flipped[..., ::-1][:, pairs.permutation(plain.shape[1])]
    if shift:
        back = back.copy()
        back[..., 1:] = back[..., :-1].copy()
    return 0.5 * (plain + back)


# -- augmentation -----------------------------------------------------------

@dataclass
class AugmentParams:
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.7, 1.3)
    rotation_range: tuple[float, float] = (-40.0, 40.0)


def affine_matrix(size: tuple[int, int], angle_deg: float = 0.0, scale: float = 1.0,
                  flip: bool = False) -> np.ndarray:
    """3x3 forward map on (x, y): mirror, then rotate and scale about the image centre."""
    h, w = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    lin = scale * np.array([[c, -s], [s, c]]) @ np.diag([-1.0 if flip else 1.0, 1.0])
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = np.array([cx, cy]) - lin @ np.array([cx, cy])
    return m


def warp_image(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear warp of a (c, h, w) image by a forward (x, y) affine map, zero fill."""
    inv = np.linalg.inv(matrix)
    # ndimage works on (row, col) = (y, x) and wants the output->input map
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64)
    inv_rc = swap @ inv @ swap
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = ndimage.affine_transform(image[c], inv_rc[:2, :2], offset=inv_rc[:2, 2],
                                          order=1, mode="grid-constant", cval=0.0)
    return out


def transform_pose(pose: Pose, matrix: np.ndarray, size: tuple[int, int], flip: bool = False,
                   pairs: FlipPairs | None = None) -> Pose:
    h, w = size
    kp = pose.keypoints.copy()
    xy1 = np.concatenate([kp[:, :2], np.ones((kp.shape[0], 1))], axis=1)
    kp[:, :2] = (matrix @ xy1.T).T[:, :2]
    if flip and pairs is not None:
        kp = kp[pairs.permutation(kp.shape[0])]
    outside = (kp[:, 0] < 0) | (kp[:, 0] > w - 1) | (kp[:, 1] < 0) | (kp[:, 1] > h - 1)
    kp[outside, 2] = 0
    return Pose(kp)


def augment(image: np.ndarray, pose: Pose, rng: np.random.Generator,
            params: AugmentParams | None = None, pairs: FlipPairs | None = None):
    """Random flip, rotation and scale applied as one affine warp to pixels and keypoints."""
    params = params or AugmentParams()
    flip = bool(rng.random() < params.flip_prob)
    scale = float(rng.uniform(*params.scale_range))
    angle = float(rng.uniform(*params.rotation_range))
    return apply_affine(image, pose, angle, scale, flip, pairs)


def apply_affine(image: np.ndarray, pose: Pose, angle: float = 0.0, scale: float = 1.0,
                 flip: bool = False, pairs: FlipPairs | None = None):
    size = image.shape[-2:]
    if angle == 0.0 and scale == 1.0 and not flip:
        return image.copy(), Pose(pose.keypoints.copy())
    m = affine_matrix(size, angle, scale, flip)
    return warp_image(image, m), transform_pose(pose, m, size, flip, pairs)


# -- annotation files -------------------------------------------------------

@dataclass
class AnnotationSet:
    """In-memory form of the shared annotation / dataset JSON schema."""

    images: list[dict]
    annotations: list[dict]
    K: int
    flip_pairs: list[tuple[int, int]]
    kappa: list[float]

    def __post_init__(self):
        if len(self.kappa) != self.K:
            raise ConfigError(f"kappa has {len(self.kappa)} entries for K={self.K}")
        FlipPairs(list(self.flip_pairs)).validate(self.K)
        for ann in self.annotations:
            if len(ann["keypoints"]) != 3 * self.K:
                raise ConfigError(
                    f"annotation for image {ann['image_id']} has {len(ann['keypoints'])} values, "
                    f"expected {3 * self.K}")

    @property
    def pairs(self) -> FlipPairs:
        return FlipPairs([tuple(p) for p in self.flip_pairs])

    def poses_by_image(self) -> dict[int, list[dict]]:
        out = {img["id"]: [] for img in self.images}
        for ann in self.annotations:
            out.setdefault(ann["image_id"], []).append(ann)
        return out

    def to_json(self) -> dict:
        return {
            "images": self.images,
            "annotations": self.annotations,
            "meta": {"K": self.K, "flip_pairs": [list(p) for p in self.flip_pairs],
                     "kappa": list(self.kappa)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationSet":
        try:
            meta = obj["meta"]
            return cls(list(obj["images"]), list(obj["annotations"]), int(meta["K"]),
                       [tuple(p) for p in meta.get("flip_pairs", [])], list(meta["kappa"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed annotation file: missing {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AnnotationSet":
        return cls.from_json(json.loads(Path(path).read_text()))
