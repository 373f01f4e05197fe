"""Mask-head variants and the analytic multiply-accumulate counter.

Four head architectures over RoI features:

* plain  -- 4 stacked 3x3 convs, then the deconv+1x1 predictor.
* lmh    -- plain with 4 extra 3x3 convs (compute-matched baseline).
* bmask  -- two-branch head: the mask branch feeds the boundary branch
            through a 1x1+ReLU fusion block (mask->boundary), boundary
            features feed back the same way (boundary->mask), and both
            branches end in their own deconv+1x1 predictor.
* sobel  -- plain mask path; boundary logits are derived from the mask
            probabilities via fixed Sobel kernels plus two 3x3 convs.

All convs are 3x3/pad 1 unless stated; fusion blocks are 1x1. Predictors
are a 2x2/stride-2 deconv followed by a 1x1 conv to K class channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .imgproc import SOBEL_X, SOBEL_Y
from .losses import LossConfig
from .params import ParamSet
from .roialign import MASK_ROI_SIZE, RoiFeatures
from . import tensor as T

HEAD_VARIANTS = ("plain", "bmask", "lmh", "sobel")
BOUNDARY_SOURCES = ("p2", "same")
PREDICTOR_SIZE = 2 * MASK_ROI_SIZE  # 28x28 after the deconv


@dataclass
class HeadConfig:
    variant: str = "bmask"
    channels: int = 256
    num_classes: int = 3
    m2b_fusion: bool = True
    b2m_fusion: bool = True
    boundary_source: str = "p2"
    boundary_roi_size: int = 28
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        if self.variant not in HEAD_VARIANTS:
            raise ConfigError(f"unknown head variant {self.variant!r}")
        if self.boundary_source not in BOUNDARY_SOURCES:
            raise ConfigError(f"unknown boundary source {self.boundary_source!r}")
        if self.boundary_roi_size not in (14, 28):
            raise ConfigError(f"boundary_roi_size must be 14 or 28, "
                              f"got {self.boundary_roi_size}")
        if self.channels < 1 or self.num_classes < 1:
            raise ConfigError("channels and num_classes must be positive")
        self.loss.validate()
        return self

    def needs_boundary_roi(self) -> bool:
        return self.variant == "bmask"

    def has_boundary_branch(self) -> bool:
        return self.variant in ("bmask", "sobel")


@dataclass
class HeadOutputs:
    mask_logits: T.Tensor                 # K x 28 x 28
    boundary_logits: T.Tensor | None      # present for bmask / sobel


def build_head(cfg: HeadConfig, seed: int) -> ParamSet:
    """Create head parameters in a fixed, deterministic order."""
    cfg.validate()
    ps = ParamSet(seed)
    c, k = cfg.channels, cfg.num_classes
    n_stack = 8 if cfg.variant == "lmh" else 4
    for i in range(1, n_stack + 1):
        ps.add_conv(f"head.mask_conv{i}", c, c, 3)
    if cfg.variant == "bmask":
        if cfg.boundary_roi_size == 28:
            ps.add_conv("head.bnd_down", c, c, 3)
        if cfg.m2b_fusion:
            ps.add_conv("head.m2b", c, c, 1)
        ps.add_conv("head.bnd_conv1", c, c, 3)
        ps.add_conv("head.bnd_conv2", c, c, 3)
        ps.add_deconv("head.bnd_deconv", c, c)
        ps.add_conv("head.bnd_pred", k, c, 1)
        if cfg.b2m_fusion:
            ps.add_conv("head.b2m", c, c, 1)
        ps.add_conv("head.mask_post", c, c, 3)
    if cfg.variant == "sobel":
        ps.add_conv("head.sobel_conv1", c, 2, 3)
        ps.add_conv("head.sobel_conv2", k, c, 3)
    ps.add_deconv("head.mask_deconv", c, c)
    ps.add_conv("head.mask_pred", k, c, 1)
    return ps


def _conv(ps, name, x, stride=1, pad=1):
    return T.conv2d(x, ps[name + ".w"], ps[name + ".b"], stride=stride, pad=pad)


def _predict(ps, name_deconv, name_pred, x):
    up = T.conv_transpose2d(x, ps[name_deconv + ".w"], stride=2)
    return _conv(ps, name_pred, up, pad=0)


_SOBEL_KERNEL = np.stack([SOBEL_X, SOBEL_Y])[:, None]


def forward_batch(cfg: HeadConfig, ps: ParamSet, r_m: T.Tensor,
                  r_b: T.Tensor | None):
    """Head forward over a batch of RoIs.

    r_m is (N,C,14,14); r_b is (N,C,s,s) for the bmask variant, None
    otherwise. Returns (mask_logits, boundary_logits), each (N,K,28,28);
    boundary_logits is None for plain/lmh.
    """
    c = cfg.channels
    if r_m.data.ndim != 4 or r_m.data.shape[1:] != (c, MASK_ROI_SIZE, MASK_ROI_SIZE):
        raise ShapeError(f"head: r_m shape {r_m.data.shape}, expected "
                         f"(N,{c},{MASK_ROI_SIZE},{MASK_ROI_SIZE})")

    x = r_m
    n_stack = 8 if cfg.variant == "lmh" else 4
    for i in range(1, n_stack + 1):
        x = T.relu(_conv(ps, f"head.mask_conv{i}", x))

    if cfg.variant in ("plain", "lmh"):
        return _predict(ps, "head.mask_deconv", "head.mask_pred", x), None

    if cfg.variant == "sobel":
        mask_logits = _predict(ps, "head.mask_deconv", "head.mask_pred", x)
        n = mask_logits.data.shape[0]
        fg = T.sum_axes(T.sigmoid(mask_logits), (1,))
        fg = T.reshape(fg, (n, 1, PREDICTOR_SIZE, PREDICTOR_SIZE))
        sob = T.conv2d(fg, T.Tensor(_SOBEL_KERNEL), T.Tensor(np.zeros(2)), pad=1)
        h1 = T.relu(_conv(ps, "head.sobel_conv1", sob))
        boundary_logits = _conv(ps, "head.sobel_conv2", h1)
        return mask_logits, boundary_logits

    # bmask
    if r_b is None:
        raise ShapeError("bmask head requires boundary RoI features")
    s = cfg.boundary_roi_size
    if r_b.data.shape[1:] != (c, s, s):
        raise ShapeError(f"head: r_b shape {r_b.data.shape}, expected (N,{c},{s},{s})")
    f_m = x
    if s == 28:
        r_bt = _conv(ps, "head.bnd_down", r_b, stride=2)
    else:
        r_bt = r_b
    if cfg.m2b_fusion:
        f_b = T.add(T.relu(_conv(ps, "head.m2b", f_m, pad=0)), r_bt)
    else:
        f_b = r_bt
    f_b = T.relu(_conv(ps, "head.bnd_conv1", f_b))
    f_b = T.relu(_conv(ps, "head.bnd_conv2", f_b))
    boundary_logits = _predict(ps, "head.bnd_deconv", "head.bnd_pred", f_b)
    if cfg.b2m_fusion:
        f_m = T.add(T.relu(_conv(ps, "head.b2m", f_b, pad=0)), f_m)
    f_m = T.relu(_conv(ps, "head.mask_post", f_m))
    mask_logits = _predict(ps, "head.mask_deconv", "head.mask_pred", f_m)
    return mask_logits, boundary_logits


def forward(cfg: HeadConfig, ps: ParamSet, r: RoiFeatures) -> HeadOutputs:
    """Single-RoI forward; see forward_batch for the batched form."""
    r_m = T.reshape(r.r_m, (1,) + r.r_m.data.shape)
    r_b = None
    if r.r_b is not None:
        r_b = T.reshape(r.r_b, (1,) + r.r_b.data.shape)
    mask_logits, boundary_logits = forward_batch(cfg, ps, r_m, r_b)
    squeeze = lambda t: T.reshape(t, t.data.shape[1:])
    return HeadOutputs(
        mask_logits=squeeze(mask_logits),
        boundary_logits=None if boundary_logits is None else squeeze(boundary_logits),
    )


def count_macs(cfg: HeadConfig):
    """Analytic multiply-accumulates of the head convs, predictors excluded.

    Each conv contributes K^2 * C_in * C_out * H_out * W_out. The deconv
    and 1x1 output layers of both predictors are not counted, matching how
    the compute comparison is framed.
    """
    cfg.validate()
    c = cfg.channels
    hw = MASK_ROI_SIZE * MASK_ROI_SIZE
    layers = []

    def conv(name, cin, cout, k, positions):
        layers.append((name, k * k * cin * cout * positions))

    n_stack = 8 if cfg.variant == "lmh" else 4
    for i in range(1, n_stack + 1):
        conv(f"mask_conv{i}", c, c, 3, hw)
    if cfg.variant == "bmask":
        if cfg.boundary_roi_size == 28:
            conv("bnd_down", c, c, 3, hw)
        if cfg.m2b_fusion:
            conv("m2b", c, c, 1, hw)
        conv("bnd_conv1", c, c, 3, hw)
        conv("bnd_conv2", c, c, 3, hw)
        if cfg.b2m_fusion:
            conv("b2m", c, c, 1, hw)
        conv("mask_post", c, c, 3, hw)
    if cfg.variant == "sobel":
        out_hw = PREDICTOR_SIZE * PREDICTOR_SIZE
        conv("sobel_conv1", 2, c, 3, out_hw)
        conv("sobel_conv2", c, cfg.num_classes, 3, out_hw)
    return sum(m for _, m in layers), layers
