"""Training loop, prediction, evaluation and the ablation driver."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import (AnnotationSet, AugmentParams, FlipPairs, Pose, augment, decode_heatmaps,
                    flip_average, mse_loss, ohkm_mse_loss, render_targets, sum_normalize,
                    to_compare_domain)
from .errors import ConfigError, NumericalError
from .metrics import Detection, EvalReport, GroundTruth, OksParams, oks_ap, pckh
from .network import NetworkConfig, PoseNet
from .synth import Dataset
from .tensor import DTYPES, make_rng

log = logging.getLogger(__name__)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("POSEKIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    lr_factor: float = 0.1
    epochs: int = 150
    milestones: list[int] | None = None
    batch_size: int = 16
    R: int = 8
    seed: int = 0
    input_size: tuple[int, int] = (64, 48)
    augment: bool = True
    sigma: float = 1.0
    compare_domain: str = "peak"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    precision: str = "f32"
    max_steps: int | None = None

    def __post_init__(self):
        if self.milestones is None:
            self.milestones = default_milestones(self.epochs)
        m = list(self.milestones)
        if any(b <= a for a, b in zip(m, m[1:])) or any(x >= self.epochs or x < 1 for x in m):
            raise ConfigError(f"milestones {m} must be strictly increasing and inside (0, {self.epochs})")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")
        if self.compare_domain not in ("peak", "sum"):
            raise ConfigError("compare_domain must be 'peak' or 'sum'")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index: decayed once per milestone reached."""
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.lr_factor ** passed


def default_milestones(epochs: int) -> list[int]:
    """60% and 80% of the run, the 90/120-of-150 shape scaled to any length."""
    out = []
    for frac in (0.6, 0.8):
        m = int(round(frac * epochs))
        if 0 < m < epochs and (not out or m > out[-1]):
            out.append(m)
    return out


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def compute_loss(model: PoseNet, images: np.ndarray, poses: list[Pose], tcfg: TrainConfig,
                 backward: bool = False):
    """Forward pass plus OHKM loss (and weighted auxiliary MSE); optionally backpropagates.

    Returns ``(total, main_mse, artifacts)`` where ``main_mse`` is the plain MSE
    of the final heatmaps in the comparison domain.
    """
    cfg = model.cfg
    out = model.forward(images)
    target, mask = render_targets(poses, images.shape[2:], tcfg.sigma)
    tmaps = target.maps.astype(images.dtype)
    domain = tcfg.compare_domain if out.normalization == "sum" else "peak"
    if domain == "sum":
        tmaps = sum_normalize(tmaps)
    pred, back = to_compare_domain(out.heatmaps, out.normalization, domain)
    r = min(tcfg.R, cfg.K)
    loss, g = ohkm_mse_loss(pred, tmaps, mask, r=r, return_grad=True)
    main_mse = mse_loss(pred, tmaps, mask)
    total = loss
    g_aux = None
    if out.aux_heatmaps is not None and cfg.aux_weight > 0:
        aux_loss, g_aux = mse_loss(out.aux_heatmaps, target.maps.astype(images.dtype), mask,
                                   return_grad=True)
        total += cfg.aux_weight * aux_loss
        g_aux = cfg.aux_weight * g_aux
    if backward:
        model.backward(back(g).astype(images.dtype),
                       None if g_aux is None else g_aux.astype(images.dtype))
    return total, main_mse, out


@dataclass
class TrainResult:
    model: PoseNet
    history: list[dict] = field(default_factory=list)
    steps: int = 0


def train(net_cfg: NetworkConfig, tcfg: TrainConfig, data: Dataset, out_dir=None,
          log_path=None) -> TrainResult:
    """Adam training with per-epoch JSON-lines logging; writes a checkpoint into ``out_dir``."""
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    dtype = DTYPES[tcfg.precision]
    model = PoseNet(net_cfg, rng=make_rng(net_cfg.seed)).astype(dtype)
    model.train()
    opt = Adam(model.parameters(), tcfg.base_lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    rng = make_rng(tcfg.seed)
    pairs = data.annotations.pairs
    aug = AugmentParams()
    n = len(data)
    # train-mode batchnorm needs at least two samples per batch
    bs = min(tcfg.batch_size, n)
    history = []
    step = 0
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tcfg.epochs):
            opt.lr = tcfg.lr_at(epoch)
            order = rng.permutation(n)
            losses, mses = [], []
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                if len(idx) < 2 and model.cfg.bn:
                    continue
                images, poses = [], []
                for i in idx:
                    img, pose = data.images[i], data.poses[i]
                    if tcfg.augment:
                        img, pose = augment(img, pose, rng, aug, pairs)
                    images.append(img)
                    poses.append(pose)
                batch = np.stack(images).astype(dtype)
                model.zero_grad()
                total, mse, _ = compute_loss(model, batch, poses, tcfg, backward=True)
                if not np.isfinite(total):
                    raise NumericalError(f"loss became {total} at step {step}")
                opt.step()
                step += 1
                losses.append(total)
                mses.append(mse)
                if tcfg.max_steps is not None and step >= tcfg.max_steps:
                    break
            rec = {"epoch": epoch, "step": step, "lr": opt.lr, "loss": float(np.mean(losses)),
                   "mse": float(np.mean(mses))}
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            log.debug("epoch %d loss %.6f", epoch, rec["loss"])
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                break
    finally:
        if log_file:
            log_file.close()
    model.eval()
    if out_dir is not None:
        write_model(model, out_dir, tcfg)
    return TrainResult(model, history, step)


def write_model(model: PoseNet, out_dir, tcfg: TrainConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.cfg.save(out / "model.cfg")
    extra = {"train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(tcfg).items()}} \
        if tcfg else None
    return save_checkpoint(model, out / "checkpoint", extra)


def read_model(ckpt_dir, cfg: NetworkConfig | None = None, precision: str = "f32") -> PoseNet:
    root = Path(ckpt_dir)
    if cfg is None:
        cfg = NetworkConfig.load(root / "model.cfg")
    model = PoseNet(cfg).astype(DTYPES[precision])
    sub = root / "checkpoint" if (root / "checkpoint").exists() else root
    load_checkpoint(model, sub)
    return model.eval()


# -- prediction and evaluation ----------------------------------------------

def predict_heatmaps(model: PoseNet, images: np.ndarray, flip: bool = False,
                     pairs: FlipPairs | None = None, batch_size: int = 32) -> np.ndarray:
    model.eval()
    dtype = model.parameters()[0].data.dtype
    outs = []

    def run(x):
        return model.forward(x).heatmaps

    for start in range(0, len(images), batch_size):
        x = np.asarray(images[start:start + batch_size], dtype=dtype)
        outs.append(flip_average(run, x, pairs or FlipPairs()) if flip else run(x))
    if not outs:
        return np.zeros((0, model.cfg.K) + tuple(images.shape[2:]))
    return np.concatenate(outs)


def predict(model: PoseNet, data: Dataset, flip: bool = False) -> list[dict]:
    """Prediction dump entries: image_id, keypoints [x, y, score] * K, instance score."""
    heat = predict_heatmaps(model, data.images, flip, data.annotations.pairs)
    coords, conf = decode_heatmaps(heat)
    h, w = data.images.shape[2:] if len(data) else (0, 0)
    coords[..., 0] = np.clip(coords[..., 0], 0, w - 1)
    coords[..., 1] = np.clip(coords[..., 1], 0, h - 1)
    out = []
    for img, xy, c in zip(data.annotations.images, coords, conf):
        kps = np.column_stack([xy, c]).ravel()
        out.append({"image_id": img["id"], "keypoints": [round(float(v), 6) for v in kps],
                    "score": round(float(c.mean()), 6)})
    return out


def evaluate(predictions: list[dict], ann: AnnotationSet, area_source: str = "annotation") -> EvalReport:
    K = ann.K
    for p in predictions:
        if len(p["keypoints"]) != 3 * K:
            raise ConfigError(f"prediction for image {p['image_id']} has "
                              f"{len(p['keypoints']) // 3} joints, annotations have K={K}")
    dets = [Detection(p["image_id"], np.asarray(p["keypoints"], dtype=np.float64).reshape(K, 3),
                      float(p["score"])) for p in predictions]
    gts = [GroundTruth(a["image_id"], np.asarray(a["keypoints"], dtype=np.float64).reshape(K, 3),
                       a.get("area"), a.get("head_box")) for a in ann.annotations]
    params = OksParams(np.asarray(ann.kappa), area_source)
    res = oks_ap(dets, gts, params)
    report = EvalReport(res["thresholds"], res["ap"], res["ar"])
    # PCKh pairs each ground truth with the best-scoring prediction on its image
    best = {}
    for d in dets:
        if d.image_id not in best or d.score > best[d.image_id].score:
            best[d.image_id] = d
    with_box = [g for g in gts if g.head_box is not None]
    if with_box and len(with_box) == len(gts):
        preds = np.stack([best[g.image_id].keypoints[:, :2] if g.image_id in best
                          else np.full((K, 2), np.inf) for g in gts])
        per_joint, total = pckh(preds, np.stack([g.keypoints for g in gts]),
                                [g.head_box for g in gts])
        report.pckh_per_joint = [float(v) for v in per_joint]
        report.pckh_total = total
    return report


def mean_decode_error(model: PoseNet, data: Dataset, flip: bool = False) -> float:
    heat = predict_heatmaps(model, data.images, flip, data.annotations.pairs)
    coords, _ = decode_heatmaps(heat)
    errs = []
    for xy, pose in zip(coords, data.poses):
        vis = pose.visibility > 0
        errs.extend(np.hypot(*(xy[vis] - pose.xy[vis]).T))
    return float(np.mean(errs)) if errs else 0.0


def dataset_mse(model: PoseNet, data: Dataset, tcfg: TrainConfig) -> float:
    model.eval()
    dtype = model.parameters()[0].data.dtype
    _, mse, _ = compute_loss(model, data.images.astype(dtype), data.poses, tcfg)
    return float(mse)


# -- ablation ---------------------------------------------------------------

ABLATION_VARIANTS = {
    "baseline-sbn": dict(fam=False, fsm="none", ffm=False, head="sbn", aux_weight=0.0),
    "+fam": dict(fam=True, fsm="none", ffm=False, head="sbn", aux_weight=0.0),
    "+fsm": dict(fam=False, fsm="parallel", ffm=False, head="sbn", aux_weight=0.0),
    "+ffm": dict(fam=False, fsm="none", ffm=True, head="sbn", aux_weight=0.5),
    "+duc": dict(fam=False, fsm="none", ffm=False, head="duc", aux_weight=0.0),
    "full": dict(fam=True, fsm="parallel", ffm=True, head="duc", aux_weight=0.5),
}


def ablate(base_cfg: NetworkConfig, tcfg: TrainConfig, train_data: Dataset, val_data: Dataset,
           variants=None, log_dir=None) -> list[dict]:
    """Train every variant under the same seed, data order and step budget; collect metrics."""
    rows = []
    for name in variants or ABLATION_VARIANTS:
        cfg = replace(base_cfg, **ABLATION_VARIANTS[name])
        log_path = Path(log_dir) / f"{name.strip('+')}.jsonl" if log_dir else None
        if log_path:
            log_path.parent.mkdir(parents=True, exist_ok=True)
        res = train(cfg, tcfg, train_data, log_path=log_path)
        report = evaluate(predict(res.model, val_data), val_data.annotations)
        rows.append({
            "variant": name, "params": res.model.num_parameters(), "steps": res.steps,
            "final_loss": res.history[-1]["loss"] if res.history else float("nan"),
            # one domain for every head so the column is comparable
            "train_mse": dataset_mse(res.model, train_data, replace(tcfg, compare_domain="peak")),
            "decode_error_px": mean_decode_error(res.model, val_data),
            "oks_ap": report.mean_ap, "ap50": report.ap_at(0.5),
        })
    return rows


def ablation_table(rows: list[dict]) -> str:
    head = f"{'variant':<14}{'params':>8}{'loss':>11}{'train mse':>11}{'err px':>8}{'AP':>8}{'AP.5':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['variant']:<14}{r['params']:>8d}{r['final_loss']:>11.5f}"
                     f"{r['train_mse']:>11.5f}{r['decode_error_px']:>8.2f}{r['oks_ap']:>8.3f}"
                     f"{r['ap50']:>8.3f}")
    return "\n".join(lines) + "\n"
