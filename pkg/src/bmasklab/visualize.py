"""Qualitative PNG overlays: groundtruth outline / predicted mask / boundary heat."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .imgproc import bilinear_sample, extract_boundary
from .synthdata import PALETTE
from .traineval import Model, _predict_rois


def _to_hwc(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def _paste_prob(prob: np.ndarray, box, height: int, width: int) -> np.ndarray:
    """Continuous paste of a RoI-frame probability map into the image frame."""
    out = np.zeros((height, width))
    s_h, s_w = prob.shape
    xlo = max(0, int(np.floor(box.x0)))
    xhi = min(width, int(np.ceil(box.x1)))
    ylo = max(0, int(np.floor(box.y0)))
    yhi = min(height, int(np.ceil(box.y1)))
    if xhi <= xlo or yhi <= ylo:
        return out
    cx = np.arange(xlo, xhi) + 0.5
    cy = np.arange(ylo, yhi) + 0.5
    u = (cx - box.x0) / box.width * s_w
    v = (cy - box.y0) / box.height * s_h
    vals = bilinear_sample(prob, u[None, :], v[:, None])
    inside = ((cy[:, None] >= box.y0) & (cy[:, None] < box.y1)
              & (cx[None, :] >= box.x0) & (cx[None, :] < box.x1))
    out[ylo:yhi, xlo:xhi] = np.where(inside, vals, 0.0)
    return out


def render_scene(model: Model, scene) -> np.ndarray:
    """Three side-by-side panels as one HxW*3 RGB array."""
    h, w = scene.image.shape[1:]
    base = _to_hwc(scene.image)

    gt_panel = base.copy()
    for inst in scene.instances:
        outline = extract_boundary(inst.mask).astype(bool)
        gt_panel[outline] = PALETTE[inst.cls].astype(np.uint8)

    pred_panel = base.copy().astype(np.float64)
    heat = np.zeros((h, w))
    if scene.instances:
        boxes = [inst.box for inst in scene.instances]
        classes = [inst.cls for inst in scene.instances]
        results, bnd_logits = _predict_rois(model, scene, boxes, classes)
        for i, ((mask28, _score), inst) in enumerate(zip(results, scene.instances)):
            from .imgproc import paste_mask
            full = paste_mask(mask28, inst.box, h, w).astype(bool)
            color = PALETTE[inst.cls]
            pred_panel[full] = 0.45 * pred_panel[full] + 0.55 * color
            if bnd_logits is not None:
                prob = 1.0 / (1.0 + np.exp(-bnd_logits[i, inst.cls]))
                heat = np.maximum(heat, _paste_prob(prob, inst.box, h, w))
    pred_panel = np.clip(np.rint(pred_panel), 0, 255).astype(np.uint8)
    heat_panel = np.repeat((np.clip(heat, 0, 1) * 255).astype(np.uint8)[:, :, None],
                           3, axis=2)
    return np.concatenate([gt_panel, pred_panel, heat_panel], axis=1)


def save_overlays(model: Model, dataset, count: int, out_dir) -> list:
    paths = []
    for i in range(min(count, len(dataset))):
        panel = render_scene(model, dataset[i])
        path = out_dir / f"scene_{i:03d}.png"
        Image.fromarray(panel).save(path, format="PNG")
        paths.append(path)
    return paths
