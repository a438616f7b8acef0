"""Synthetic stick-figure dataset: anti-aliased limbs on a noisy background with exact keypoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import AnnotationSet, Pose
from .tensor import load_blob, make_rng, save_blob

JOINTS = ("head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
          "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle")
FLIP_PAIRS = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12)]
LIMBS = [(0, 1), (0, 2), (1, 2), (1, 3), (3, 5), (2, 4), (4, 6), (1, 7), (2, 8), (7, 8),
         (7, 9), (9, 11), (8, 10), (10, 12)]
# standing pose in pixels relative to the figure centre, for a 64x48 canvas
TEMPLATE = np.array([
    [0, -21], [-6, -14], [6, -14], [-9, -6], [9, -6], [-11, 2], [11, 2],
    [-4, 2], [4, 2], [-5, 11], [5, 11], [-5, 20], [5, 20],
], dtype=np.float64)
KAPPA = 1.0 / np.sqrt(2.0)


@dataclass
class SyntheticSpec:
    height: int = 64
    width: int = 48
    limb_radius: float = 1.5
    joint_jitter: float = 1.5
    scale_range: tuple[float, float] = (0.8, 1.1)
    max_rotation: float = 15.0
    max_shift: float = 4.0
    noise: float = 0.15
    occlusion_prob: float = 0.05

    @property
    def K(self) -> int:
        return len(JOINTS)


def capsule(canvas_shape, a, b, radius: float) -> np.ndarray:
    """Anti-aliased segment a-b of the given radius: clip(radius + 0.5 - distance, 0, 1)."""
    h, w = canvas_shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b - a
    denom = float(d @ d)
    t = np.zeros_like(xs) if denom == 0 else np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / denom, 0, 1)
    dist = np.hypot(xs - (a[0] + t * d[0]), ys - (a[1] + t * d[1]))
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def sample_pose(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(*spec.scale_range)
    angle = np.deg2rad(rng.uniform(-spec.max_rotation, spec.max_rotation))
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    pts = TEMPLATE + rng.normal(0.0, spec.joint_jitter, TEMPLATE.shape)
    centre = np.array([(spec.width - 1) / 2, (spec.height - 1) / 2])
    centre = centre + rng.uniform(-spec.max_shift, spec.max_shift, 2)
    xy = (scale * pts) @ rot.T + centre
    return np.round(xy, 3)


def render_figure(xy: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator | None = None,
                  noise: bool = True) -> np.ndarray:
    shape = (spec.height, spec.width)
    img = np.zeros(shape)
    for a, b in LIMBS:
        img = np.maximum(img, capsule(shape, xy[a], xy[b], spec.limb_radius))
    img = np.maximum(img, capsule(shape, xy[0], xy[0], spec.limb_radius + 1.5))
    if noise and rng is not None and spec.noise > 0:
        img = np.maximum(img, spec.noise * rng.random(shape))
    return img


def generate_sample(spec: SyntheticSpec, rng: np.random.Generator):
    """One (image (1, h, w), keypoints (K, 3), head_box, area) sample."""
    xy = sample_pose(spec, rng)
    img = render_figure(xy, spec, rng)
    v = np.full(spec.K, 2.0)
    occluded = rng.random(spec.K) < spec.occlusion_prob
    for k in np.flatnonzero(occluded):
        x0, y0 = int(round(xy[k, 0])) - 3, int(round(xy[k, 1])) - 3
        ys = slice(max(y0, 0), max(y0 + 7, 0))
        xs = slice(max(x0, 0), max(x0 + 7, 0))
        patch = img[ys, xs]
        img[ys, xs] = spec.noise * rng.random(patch.shape)
        v[k] = 1.0
    inside = (xy[:, 0] >= 0) & (xy[:, 0] <= spec.width - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= spec.height - 1)
    v[~inside] = 0.0
    head_r = 4.0
    hx, hy = xy[0]
    head_box = [round(hx - head_r, 3), round(hy - head_r, 3), round(hx + head_r, 3), round(hy + head_r, 3)]
    pad = spec.limb_radius
    span = xy.max(axis=0) - xy.min(axis=0) + 2 * pad
    area = round(float(span[0] * span[1]), 3)
    kp = np.column_stack([xy, v])
    return img[None].astype(np.float32), kp, head_box, area


def synth_generate(spec: SyntheticSpec, count: int, seed: int, out_dir) -> AnnotationSet:
    """Write ``count`` samples under ``out_dir`` (annotations.json + images/*.tns)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    images, anns = [], []
    for i in range(count):
        img, kp, head_box, area = generate_sample(spec, rng)
        fname = f"images/{i:06d}.tns"
        save_blob(out / fname, img[None])
        images.append({"id": i, "width": spec.width, "height": spec.height, "file": fname})
        anns.append({"image_id": i, "keypoints": [float(v) for v in kp.ravel()],
                     "head_box": head_box, "area": area})
    ann = AnnotationSet(images, anns, spec.K, FLIP_PAIRS, [KAPPA] * spec.K)
    ann.save(out / "annotations.json")
    (out / "spec.json").write_text(json.dumps({"seed": seed, "count": count, **vars(spec)},
                                              indent=1, sort_keys=True))
    return ann


@dataclass
class Dataset:
    images: np.ndarray  # (N, c, h, w)
    poses: list[Pose]
    annotations: AnnotationSet
    root: Path | None = None

    def __len__(self):
        return len(self.poses)


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    ann = AnnotationSet.load(root / "annotations.json")
    by_img = ann.poses_by_image()
    images, poses = [], []
    for img in ann.images:
        arr = load_blob(root / img["file"])
        images.append(arr.reshape(arr.shape[-3:]))
        entries = by_img.get(img["id"], [])
        if not entries:
            poses.append(Pose(np.zeros((ann.K, 3))))
        else:
            poses.append(Pose(entries[0]["keypoints"]))
    stack = np.stack(images) if images else np.zeros((0, 1, 0, 0), np.float32)
    return Dataset(stack, poses, ann, root)


def in_memory_dataset(spec: SyntheticSpec, count: int, seed: int) -> Dataset:
    rng = make_rng(seed)
    images, poses, anns, metas = [], [], [], []
    for i in range(count):
        img, kp, head_box, area = generate_sample(spec, rng)
        images.append(img)
        poses.append(Pose(kp))
        metas.append({"id": i, "width": spec.width, "height": spec.height, "file": ""})
        anns.append({"image_id": i, "keypoints": [float(v) for v in kp.ravel()],
                     "head_box": head_box, "area": area})
    ann = AnnotationSet(metas, anns, spec.K, FLIP_PAIRS, [KAPPA] * spec.K)
    stack = np.stack(images) if images else np.zeros((0, 1, spec.height, spec.width), np.float32)
    return Dataset(stack, poses, ann)
