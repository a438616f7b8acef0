"""OKS, OKS-based AP/AR and PCKh."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

OKS_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 20


@dataclass
class OksParams:
    kappa: np.ndarray
    area_source: str = "annotation"

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if np.any(self.kappa <= 0):
            raise ConfigError("OKS constants must be positive")
        if self.area_source not in ("annotation", "bbox"):
            raise ConfigError(f"unknown area source {self.area_source!r}")


@dataclass
class Detection:
    image_id: int
    keypoints: np.ndarray  # (K, 2) or (K, 3); extra columns ignored
    score: float


@dataclass
class GroundTruth:
    image_id: int
    keypoints: np.ndarray  # (K, 3)
    area: float | None = None
    head_box: Sequence[float] | None = None

    def resolved_area(self, source: str = "annotation") -> float:
        if source == "annotation" and self.area is not None:
            return float(self.area)
        kp = np.asarray(self.keypoints)
        vis = kp[kp[:, 2] > 0, :2]
        if len(vis) == 0:
            return 0.0
        span = vis.max(axis=0) - vis.min(axis=0)
        return float(span[0] * span[1])


def oks(pred: np.ndarray, gt: np.ndarray, area: float, kappa) -> float:
    """Object keypoint similarity over the labeled ground-truth joints."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    if pred.shape[0] != gt.shape[0] or kappa.shape[0] != gt.shape[0]:
        raise ShapeError(f"K mismatch: pred {pred.shape[0]}, gt {gt.shape[0]}, kappa {kappa.shape[0]}")
    labeled = gt[:, 2] > 0
    if not labeled.any():
        raise ValueError("ground truth has no labeled keypoints")
    d2 = ((pred[:, :2] - gt[:, :2]) ** 2).sum(axis=1)
    e = d2 / (2.0 * area * kappa ** 2) if area > 0 else np.where(d2 > 0, np.inf, 0.0)
    return float(np.exp(-e[labeled]).sum() / labeled.sum())


def _match_image(dets: list[Detection], gts: list[GroundTruth], params: OksParams,
                 thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Greedy per-threshold matching; returns (scores (D,), tp flags (T, D))."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)[:MAX_DETS]
    dets = [dets[i] for i in order]
    scores = np.array([d.score for d in dets], dtype=np.float64)
    tp = np.zeros((len(thresholds), len(dets)), dtype=bool)
    if not dets or not gts:
        return scores, tp
    ious = np.array([[oks(d.keypoints, g.keypoints, g.resolved_area(params.area_source), params.kappa)
                      for g in gts] for d in dets])
    for t, thr in enumerate(thresholds):
        taken = np.zeros(len(gts), dtype=bool)
        for di in range(len(dets)):
            best, best_val = -1, -np.inf
            for gi in range(len(gts)):
                if not taken[gi] and ious[di, gi] >= thr and ious[di, gi] > best_val:
                    best, best_val = gi, ious[di, gi]
            if best >= 0:
                taken[best] = True
                tp[t, di] = True
    return scores, tp


def interpolated_ap(tp: np.ndarray, scores: np.ndarray, npos: int) -> tuple[float, float]:
    """101-point interpolated precision and final recall for one threshold."""
    if npos == 0:
        return 0.0, 0.0
    if tp.size == 0:
        return 0.0, 0.0
    order = np.argsort(-scores, kind="mergesort")
    hits = tp[order].astype(np.float64)
    tps = np.cumsum(hits)
    fps = np.cumsum(1.0 - hits)
    recall = tps / npos
    precision = tps / (tps + fps)
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(q.mean()), float(recall[-1])


def oks_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], params: OksParams,
           thresholds=OKS_THRESHOLDS) -> dict:
    """AP and AR at each OKS threshold with greedy score-ordered matching per image."""
    gts = [g for g in gts if np.any(np.asarray(g.keypoints)[:, 2] > 0)]
    image_ids = sorted({g.image_id for g in gts} | {d.image_id for d in dets})
    by_img_d = {i: [] for i in image_ids}
    by_img_g = {i: [] for i in image_ids}
    for d in dets:
        by_img_d[d.image_id].append(d)
    for g in gts:
        by_img_g[g.image_id].append(g)
    all_scores, all_tp = [], []
    for i in image_ids:
        s, tp = _match_image(by_img_d[i], by_img_g[i], params, thresholds)
        all_scores.append(s)
        all_tp.append(tp)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp, axis=1) if all_tp else np.zeros((len(thresholds), 0), bool)
    aps, ars = [], []
    for t in range(len(thresholds)):
        ap, ar = interpolated_ap(tp[t], scores, len(gts))
        aps.append(ap)
        ars.append(ar)
    return {"thresholds": [float(t) for t in thresholds], "ap": aps, "ar": ars}


def head_size(box: Sequence[float], factor: float = 0.6) -> float:
    x1, y1, x2, y2 = box
    return factor * math.hypot(x2 - x1, y2 - y1)


def pckh(preds: np.ndarray, gts: np.ndarray, head_boxes, alpha: float = 0.5, factor: float = 0.6):
    """Per-joint and total fraction of labeled joints within ``alpha`` head sizes.

    ``preds`` is (n, K, >=2), ``gts`` is (n, K, 3) and ``head_boxes`` is n boxes
    (x1, y1, x2, y2). A distance exactly on the threshold counts as correct.
    Joints never labeled get NaN.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if len(head_boxes) != len(gts) or any(b is None for b in head_boxes):
        raise ValueError("PCKh needs a head box for every ground-truth instance")
    sizes = np.array([head_size(b, factor) for b in head_boxes])
    d = np.hypot(preds[..., 0] - gts[..., 0], preds[..., 1] - gts[..., 1])
    labeled = gts[..., 2] > 0
    correct = (d <= alpha * sizes[:, None]) & labeled
    counts = labeled.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(counts > 0, correct.sum(axis=0) / np.maximum(counts, 1), np.nan)
    total = float(correct.sum() / labeled.sum()) if labeled.any() else float("nan")
    return per_joint, total


@dataclass
class EvalReport:
    thresholds: list[float]
    ap: list[float]
    ar: list[float]
    pckh_per_joint: list[float] = field(default_factory=list)
    pckh_total: float | None = None

    @property
    def mean_ap(self) -> float:
        return float(np.mean(self.ap))

    @property
    def mean_ar(self) -> float:
        return float(np.mean(self.ar))

    def ap_at(self, thr: float) -> float:
        return self.ap[int(np.argmin(np.abs(np.asarray(self.thresholds) - thr)))]

    def to_json(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v
        return {
            "AP": self.mean_ap, "AP50": self.ap_at(0.5), "AP75": self.ap_at(0.75),
            "AR": self.mean_ar,
            "ar_convention": "recall at each OKS threshold 0.50:0.05:0.95, maxDets=20",
            "thresholds": self.thresholds, "ap": self.ap, "ar": self.ar,
            "pckh_per_joint": [clean(float(v)) for v in self.pckh_per_joint],
            "pckh_total": clean(self.pckh_total),
        }

    def to_text(self) -> str:
        lines = ["# AR = mean recall over OKS thresholds 0.50:0.05:0.95 (maxDets=20)",
                 f"{'AP':>7} {'AP.5':>7} {'AP.75':>7} {'AR':>7} {'PCKh':>7}"]
        pk = "-" if self.pckh_total is None or math.isnan(self.pckh_total) else f"{self.pckh_total:.4f}"
        lines.append(f"{self.mean_ap:7.4f} {self.ap_at(0.5):7.4f} {self.ap_at(0.75):7.4f} "
                     f"{self.mean_ar:7.4f} {pk:>7}")
        return "\n".join(lines) + "\n"

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"
