"""Training loop, per-instance prediction, and the multi-IoU AP evaluator."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .fpn import BackboneConfig, backbone_forward, build_backbone
from .heads import HeadConfig, build_head, forward_batch
from .imgproc import Box, crop_resize_mask, extract_boundary, mask_iou, paste_mask
from .losses import LossConfig, LossReport, boundary_loss_batch, mask_loss_batch
from .params import ParamSet
from .rng import SplitMix64, mix64
from .roialign import extract_roi_features, extract_roi_features_batch
from . import tensor as T

IOU_THRESHOLDS = tuple(50 + 5 * i for i in range(10))  # percent, 0.50..0.95
RECALL_GRID = np.linspace(0.0, 1.0, 101)
PREDICTOR_RES = 28
HEAD_SEED_TAG = 0x68656164


@dataclass
class TrainConfig:
    iterations: int = 2000
    base_lr: float = 0.02       # scaled by batch_size/16 (linear scaling rule)
    batch_size: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    # lr drops to 0.1x / 0.01x at these fractions of the iteration budget
    decay_fractions: tuple = (2 / 3, 8 / 9)
    decay_factors: tuple = (0.1, 0.01)

    def validate(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("negative learning rate or weight decay")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        fr = self.decay_fractions
        if len(fr) != 2 or not (0 < fr[0] < fr[1] < 1):
            raise ConfigError(f"decay fractions must be increasing in (0,1), got {fr}")
        return self

    def learning_rate(self, iteration: int) -> float:
        lr = self.base_lr * self.batch_size / 16.0
        d1 = int(self.decay_fractions[0] * self.iterations)
        d2 = int(self.decay_fractions[1] * self.iterations)
        if iteration >= d2:
            return lr * self.decay_factors[1]
        if iteration >= d1:
            return lr * self.decay_factors[0]
        return lr


@dataclass
class APReport:
    ap_per_threshold: dict      # threshold (0.50..0.95) -> AP
    ap: float
    ap50: float
    ap75: float

    @classmethod
    def from_thresholds(cls, per_threshold: dict) -> "APReport":
        vals = [per_threshold[t / 100.0] for t in IOU_THRESHOLDS]
        return cls(ap_per_threshold=dict(per_threshold),
                   ap=float(np.mean(vals)),
                   ap50=per_threshold[0.50],
                   ap75=per_threshold[0.75])


@dataclass
class Model:
    backbone_cfg: BackboneConfig
    head_cfg: HeadConfig
    params: ParamSet


@dataclass
class Prediction:
    scene: int
    cls: int
    score: float
    mask: np.ndarray            # full image frame


def build_model(backbone_cfg: BackboneConfig, head_cfg: HeadConfig) -> Model:
    backbone_cfg.validate()
    head_cfg.validate()
    if backbone_cfg.channels != head_cfg.channels:
        raise ConfigError(
            f"pyramid channels ({backbone_cfg.channels}) must match head "
            f"channels ({head_cfg.channels})")
    params = ParamSet(backbone_cfg.seed)
    build_backbone(backbone_cfg, params)
    params.absorb(build_head(head_cfg, mix64(backbone_cfg.seed, HEAD_SEED_TAG)))
    return Model(backbone_cfg=backbone_cfg, head_cfg=head_cfg, params=params)


class _TargetCache:
    """Per-(scene, instance) 28x28 mask and boundary targets, built lazily."""

    def __init__(self, dataset, loss_cfg: LossConfig):
        self.dataset = dataset
        self.loss_cfg = loss_cfg
        self._store = {}

    def get(self, scene_idx: int, inst_idx: int):
        key = (scene_idx, inst_idx)
        if key not in self._store:
            inst = self.dataset[scene_idx].instances[inst_idx]
            m28 = crop_resize_mask(inst.mask, inst.box, PREDICTOR_RES)
            if self.loss_cfg.target == "boundary":
                b28 = extract_boundary(m28)
            elif self.loss_cfg.target == "mask":
                b28 = m28
            else:
                b28 = None
            self._store[key] = (m28, b28)
        return self._store[key]


def _batch_rois(model: Model, scenes_with_idx, cache: _TargetCache):
    """RoI features and targets for every instance of the given scenes."""
    rm_parts, rb_parts, classes, m_targets, b_targets = [], [], [], [], []
    needs_rb = model.head_cfg.needs_boundary_roi()
    for scene_idx, scene in scenes_with_idx:
        img = T.Tensor(scene.image[None])
        pyramid = backbone_forward(img, model.backbone_cfg, model.params)
        boxes = [inst.box for inst in scene.instances]
        r_m, r_b = extract_roi_features_batch(pyramid, boxes, model.head_cfg)
        rm_parts.append(r_m)
        if needs_rb:
            rb_parts.append(r_b)
        for inst_idx, inst in enumerate(scene.instances):
            classes.append(inst.cls)
            m28, b28 = cache.get(scene_idx, inst_idx)
            m_targets.append(m28)
            b_targets.append(b28)
    r_m = T.concat(rm_parts) if len(rm_parts) > 1 else rm_parts[0]
    r_b = None
    if needs_rb:
        r_b = T.concat(rb_parts) if len(rb_parts) > 1 else rb_parts[0]
    return r_m, r_b, np.array(classes), np.array(m_targets), b_targets


def train(backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
          train_cfg: TrainConfig, dataset):
    """SGD training over synthetic scenes with oracle boxes.

    Returns (model, history) where history holds one (iteration, lr,
    LossReport) triple per iteration.
    """
    train_cfg.validate()
    if not dataset:
        raise ConfigError("train: dataset is empty")
    model = build_model(backbone_cfg, head_cfg)
    loss_cfg = head_cfg.loss
    cache = _TargetCache(dataset, loss_cfg)
    sampler = SplitMix64(train_cfg.seed)
    history = []

    for it in range(train_cfg.iterations):
        picks = [sampler.below(len(dataset)) for _ in range(train_cfg.batch_size)]
        scenes = [(i, dataset[i]) for i in picks]
        r_m, r_b, classes, m_targets, b_targets = _batch_rois(model, scenes, cache)
        mask_logits, boundary_logits = forward_batch(
            model.head_cfg, model.params, r_m, r_b)

        m_loss = mask_loss_batch(mask_logits, classes, m_targets)
        if boundary_logits is not None and loss_cfg.target != "none":
            b_loss = boundary_loss_batch(boundary_logits, classes,
                                         np.array(b_targets), loss_cfg)
        else:
            b_loss = T.Tensor(0.0)
        total = T.add(m_loss, b_loss)

        m_val, b_val = m_loss.item(), b_loss.item()
        if not np.isfinite(m_val + b_val):
            raise NumericalError(
                f"loss diverged at iteration {it}: mask={m_val}, boundary={b_val}")
        lr = train_cfg.learning_rate(it)
        T.backward(total, model.params)
        from .params import sgd_step
        sgd_step(model.params, lr, train_cfg.momentum, train_cfg.weight_decay)
        history.append((it, lr, LossReport(mask_loss=m_val, boundary_loss=b_val,
                                           total=m_val + b_val)))
    return model, history


# ---------------------------------------------------------------------------
# prediction


def _predict_rois(model: Model, scene, boxes, classes):
    """Binary 28x28 masks and scores for the given boxes of one scene."""
    with T.no_grad():
        img = T.Tensor(scene.image[None])
        pyramid = backbone_forward(img, model.backbone_cfg, model.params)
        r_m, r_b = extract_roi_features_batch(pyramid, boxes, model.head_cfg)
        mask_logits, boundary_logits = forward_batch(
            model.head_cfg, model.params, r_m, r_b)

    results = []
    for i, cls in enumerate(classes):
        logit = mask_logits.data[i, cls]
        prob = 1.0 / (1.0 + np.exp(-logit))
        mask28 = (prob > 0.5).astype(np.uint8)
        fg = prob[mask28.astype(bool)]
        score = float(fg.mean()) if fg.size else 0.5
        results.append((mask28, score))
    bnd = None if boundary_logits is None else boundary_logits.data
    return results, bnd


def predict_instance(model: Model, scene, box: Box, cls: int):
    """One oracle-box prediction: (28x28 RoI-frame mask, score)."""
    results, _ = _predict_rois(model, scene, [box], [cls])
    return results[0]


def predict_scene(model: Model, scene, scene_idx: int):
    boxes = [inst.box for inst in scene.instances]
    classes = [inst.cls for inst in scene.instances]
    if not boxes:
        return []
    results, _ = _predict_rois(model, scene, boxes, classes)
    h, w = scene.image.shape[1:]
    preds = []
    for (mask28, score), inst in zip(results, scene.instances):
        full = paste_mask(mask28, inst.box, h, w)
        preds.append(Prediction(scene=scene_idx, cls=inst.cls,
                                score=score, mask=full))
    return preds


def _eval_workers(n_scenes: int) -> int:
    env = os.environ.get("BMLAB_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_scenes))


def collect_predictions(model: Model, dataset):
    """Per-scene predictions, merged in scene order (thread count does not
    affect results; BMLAB_THREADS caps parallelism)."""
    workers = _eval_workers(len(dataset))
    if workers == 1:
        per_scene = [predict_scene(model, s, i) for i, s in enumerate(dataset)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(
                lambda args: predict_scene(model, args[1], args[0]),
                enumerate(dataset)))
    return [p for preds in per_scene for p in preds]


# ---------------------------------------------------------------------------
# AP


def _interp_ap(tp_flags, n_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve."""
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1)
    precision = tp / ranks
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(idx < len(tp_flags), envelope[np.minimum(idx, len(tp_flags) - 1)], 0.0)
    return float(vals.mean())


def compute_ap_report(predictions, dataset) -> APReport:
    """COCO-style AP: greedy score-ordered matching, class-averaged.

    Predictions carry full-image masks; groundtruth comes from the dataset
    instances. Per threshold, each groundtruth can match at most one
    prediction (highest-IoU eligible groundtruth wins).
    """
    gts = []    # (scene, cls, mask)
    for si, scene in enumerate(dataset):
        for inst in scene.instances:
            gts.append((si, inst.cls, inst.mask))
    classes = sorted({cls for _, cls, _ in gts})

    # IoUs against same-scene same-class groundtruths, shared by thresholds
    by_class = {}
    for cls in classes:
        gt_idx = [i for i, g in enumerate(gts) if g[1] == cls]
        preds = [p for p in predictions if p.cls == cls]
        order = np.argsort([-p.score for p in preds], kind="stable")
        preds = [preds[i] for i in order]
        ious = []
        for p in preds:
            row = [(gi, mask_iou(p.mask, gts[gi][2]))
                   for gi in gt_idx if gts[gi][0] == p.scene]
            ious.append(row)
        by_class[cls] = (preds, gt_idx, ious)

    per_threshold = {}
    for t_pct in IOU_THRESHOLDS:
        t = t_pct / 100.0
        ap_values = []
        for cls in classes:
            preds, gt_idx, ious = by_class[cls]
            n_gt = len(gt_idx)
            matched = set()
            flags = []
            for p, row in zip(preds, ious):
                best_gi, best_iou = -1, 0.0
                for gi, iou in row:
                    if gi in matched or iou < t:
                        continue
                    if best_gi < 0 or iou > best_iou:
                        best_gi, best_iou = gi, iou
                if best_gi >= 0:
                    matched.add(best_gi)
                    flags.append(1)
                else:
                    flags.append(0)
            ap_values.append(_interp_ap(flags, n_gt))
        per_threshold[t] = float(np.mean(ap_values)) if ap_values else 0.0
    return APReport.from_thresholds(per_threshold)


def evaluate(model: Model, dataset) -> APReport:
    if not dataset:
        raise ConfigError("evaluate: dataset is empty")
    return compute_ap_report(collect_predictions(model, dataset), dataset)


# ---------------------------------------------------------------------------
# curve export


def ap_curve_export(reports: dict, path, svg_path=None) -> None:
    """CSV of AP per threshold, one column per variant.

    When both 'bmask' and 'plain' are present a 'gain' column holds their
    per-threshold difference.
    """
    if not reports:
        raise ConfigError("ap_curve_export: no reports")
    names = list(reports)
    gain = "bmask" in reports and "plain" in reports
    lines = ["threshold," + ",".join(names) + (",gain" if gain else "")]
    for t_pct in IOU_THRESHOLDS:
        t = t_pct / 100.0
        row = [f"{t:.2f}"] + [f"{reports[n].ap_per_threshold[t]:.6f}" for n in names]
        if gain:
            row.append(f"{reports['bmask'].ap_per_threshold[t] - reports['plain'].ap_per_threshold[t]:.6f}")
        lines.append(",".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    if svg_path is not None:
        _write_curve_svg(reports, svg_path)


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _write_curve_svg(reports: dict, path) -> None:
    """Minimal fixed-viewBox polyline chart; CSV stays the canonical output."""
    width, height, pad = 640, 440, 50
    xs = np.linspace(pad, width - pad, len(IOU_THRESHOLDS))

    def y_of(v):
        return height - pad - v * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
             f'stroke="black"/>']
    for i, t_pct in enumerate(IOU_THRESHOLDS):
        parts.append(f'<text x="{xs[i]:.1f}" y="{height - pad + 18}" '
                     f'font-size="11" text-anchor="middle">{t_pct / 100:.2f}</text>')
    for j, (name, rep) in enumerate(reports.items()):
        color = _SVG_COLORS[j % len(_SVG_COLORS)]
        pts = " ".join(f"{xs[i]:.1f},{y_of(rep.ap_per_threshold[t / 100]):.1f}"
                       for i, t in enumerate(IOU_THRESHOLDS))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{width - pad + 4}" '
                     f'y="{y_of(rep.ap_per_threshold[0.95]) + 4:.1f}" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
