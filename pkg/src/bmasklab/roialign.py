"""RoIAlign over pyramid features, plus the two boundary RoI strategies.

The sampling pattern (sub-cell positions, bilinear corner weights, zero
reads outside the feature map) is computed here; the gather/scatter pair
is expressed as one sparse matrix per batch of boxes so both directions
run in compiled code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ShapeError
from .imgproc import Box
from .tensor import Tensor, _make

MASK_ROI_SIZE = 14
SAMPLING_RATIO = 2  # bilinear samples per output-cell axis


@dataclass
class PyramidFeatures:
    """P2..P5 feature maps, each 1xCx(H/2^k)x(W/2^k)."""

    levels: dict[int, Tensor]
    channels: int
    image_height: int
    image_width: int

    def __post_init__(self):
        for k, t in self.levels.items():
            n, c, h, w = t.data.shape
            if n != 1 or c != self.channels:
                raise ShapeError(f"P{k}: expected 1x{self.channels}xHxW, "
                                 f"got {t.data.shape}")


@dataclass
class RoiFeatures:
    """Per-RoI features for the mask branch and (optionally) the boundary branch."""

    r_m: Tensor                # C x s_m x s_m
    r_b: Tensor | None         # C x s_b x s_b
    mask_level: int
    boundary_level: int | None = None


def assign_level(box: Box) -> int:
    """FPN level for a box: clamp(floor(4 + log2(sqrt(area)/224)), 2, 5)."""
    k = int(np.floor(4 + np.log2(np.sqrt(box.area) / 224.0)))
    return min(5, max(2, k))


def _axis_corners(coord, extent):
    """Bilinear corner index/weight along one axis, in cell-center space.

    Samples inside [-1, extent] clamp to the border cells (so constants
    are preserved for any box over the feature map); samples beyond that
    band read 0.
    """
    ok = (coord >= -1.0) & (coord <= extent)
    cc = np.clip(coord, 0.0, extent - 1.0)
    lo = np.minimum(np.floor(cc).astype(np.int64), max(extent - 2, 0))
    t = cc - lo
    return lo, t, ok


def _sample_matrix(boxes, stride, out, sampling, fh, fw):
    """Sparse (n_boxes*out^2*sampling^2, fh*fw) bilinear gather matrix.

    Each row holds the 4 corner weights of one sample point.
    """
    r = len(boxes)
    coords = np.array([[b.x0, b.y0, b.x1, b.y1] for b in boxes]) / stride
    steps = (np.arange(out)[:, None]
             + (np.arange(sampling)[None, :] + 0.5) / sampling).reshape(-1)
    xs = coords[:, 0, None] + steps[None, :] * ((coords[:, 2] - coords[:, 0]) / out)[:, None]
    ys = coords[:, 1, None] + steps[None, :] * ((coords[:, 3] - coords[:, 1]) / out)[:, None]
    # sample grid per box, y-major rows
    fx = np.broadcast_to(xs[:, None, :], (r, xs.shape[1], xs.shape[1])) - 0.5
    fy = np.broadcast_to(ys[:, :, None], fx.shape) - 0.5
    x0, tx, ok_x = _axis_corners(fx, fw)
    y0, ty, ok_y = _axis_corners(fy, fh)
    ok = (ok_x & ok_y).reshape(-1)
    n_samples = r * fx[0].size
    rows = np.tile(np.arange(n_samples), 4)
    cols = np.empty(4 * n_samples, dtype=np.int64)
    vals = np.empty(4 * n_samples)
    for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        xi = np.minimum(x0 + dx, fw - 1).reshape(-1)
        yi = np.minimum(y0 + dy, fh - 1).reshape(-1)
        w = ((tx if dx else 1 - tx) * (ty if dy else 1 - ty)).reshape(-1)
        cols[k * n_samples:(k + 1) * n_samples] = yi * fw + xi
        vals[k * n_samples:(k + 1) * n_samples] = np.where(ok, w, 0.0)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_samples, fh * fw))


def roi_align_batch(f: Tensor, boxes, stride: int, out: int,
                    sampling: int = SAMPLING_RATIO) -> Tensor:
    """RoIAlign for a list of boxes on one feature map -> (R, C, out, out).

    Differentiable w.r.t. f; each output cell averages sampling^2 bilinear
    samples. Boxes are mapped to feature coordinates by dividing by stride
    (no rounding); out-of-range samples read 0.
    """
    if sampling < 1:
        raise ShapeError(f"roi_align: sampling must be >= 1, got {sampling}")
    if f.data.ndim != 4 or f.data.shape[0] != 1:
        raise ShapeError(f"roi_align: expected 1xCxHxW features, got {f.data.shape}")
    if not boxes:
        raise ShapeError("roi_align: no boxes")
    _, c, fh, fw = f.data.shape
    r = len(boxes)
    mat = _sample_matrix(boxes, stride, out, sampling, fh, fw)
    flat_t = f.data.reshape(c, fh * fw).T            # (HW, C)
    samples = mat @ np.ascontiguousarray(flat_t)     # (R*S, C)
    vals = (samples.reshape(r, out, sampling, out, sampling, c)
            .mean(axis=(2, 4))
            .transpose(0, 3, 1, 2)
            .copy())

    def bwd(g):
        gs = (np.broadcast_to(
                g.transpose(0, 2, 3, 1)[:, :, None, :, None, :]
                / (sampling * sampling),
                (r, out, sampling, out, sampling, c))
              .reshape(-1, c))
        dflat_t = mat.T @ np.ascontiguousarray(gs)   # (HW, C)
        return (dflat_t.T.reshape(1, c, fh, fw).copy(),)

    return _make(vals, (f,), bwd)


def roi_align(f: Tensor, box: Box, stride: int, out: int,
              sampling: int = SAMPLING_RATIO) -> Tensor:
    """Single-box RoIAlign -> (C, out, out). See roi_align_batch."""
    from .tensor import reshape
    batched = roi_align_batch(f, [box], stride, out, sampling)
    return reshape(batched, batched.data.shape[1:])


def extract_roi_features(pyramid: PyramidFeatures, box: Box, cfg) -> RoiFeatures:
    """Mask features from the assigned level at 14x14; boundary features per cfg.

    cfg is a HeadConfig; cfg.boundary_source selects P2 or the mask level,
    cfg.boundary_roi_size selects 14 or 28. Variants without a boundary
    branch get r_b=None.
    """
    level = assign_level(box)
    r_m = roi_align(pyramid.levels[level], box, 2 ** level, MASK_ROI_SIZE)
    if not cfg.needs_boundary_roi():
        return RoiFeatures(r_m=r_m, r_b=None, mask_level=level)
    b_level = 2 if cfg.boundary_source == "p2" else level
    r_b = roi_align(pyramid.levels[b_level], box, 2 ** b_level,
                    cfg.boundary_roi_size)
    return RoiFeatures(r_m=r_m, r_b=r_b, mask_level=level,
                       boundary_level=b_level)


def _grouped_align(pyramid: PyramidFeatures, boxes, levels, out: int) -> Tensor:
    """Batch roi_align with per-box levels, preserving box order."""
    from .tensor import concat, take_rows
    order = []
    parts = []
    for level in sorted(set(levels)):
        idxs = [i for i, lv in enumerate(levels) if lv == level]
        order.extend(idxs)
        parts.append(roi_align_batch(pyramid.levels[level],
                                     [boxes[i] for i in idxs],
                                     2 ** level, out))
    stacked = concat(parts) if len(parts) > 1 else parts[0]
    if order == list(range(len(boxes))):
        return stacked
    inverse = np.empty(len(boxes), dtype=np.int64)
    inverse[np.array(order)] = np.arange(len(boxes))
    return take_rows(stacked, inverse)


def extract_roi_features_batch(pyramid: PyramidFeatures, boxes, cfg):
    """Batched strategy dispatch: (r_m (R,C,14,14), r_b (R,C,s,s) or None)."""
    levels = [assign_level(b) for b in boxes]
    r_m = _grouped_align(pyramid, boxes, levels, MASK_ROI_SIZE)
    if not cfg.needs_boundary_roi():
        return r_m, None
    if cfg.boundary_source == "p2":
        r_b = roi_align_batch(pyramid.levels[2], boxes, 4, cfg.boundary_roi_size)
    else:
        r_b = _grouped_align(pyramid, boxes, levels, cfg.boundary_roi_size)
    return r_m, r_b
