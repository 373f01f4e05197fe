"""Miniature convolutional pyramid backbone (P2-P5 at strides 4/8/16/32).

Four downsampling stages (stride-2 3x3 convs; the first stage has two so
C2 lands at stride 4) feed 1x1 lateral convs, a nearest-neighbor top-down
pathway, and one 3x3 smoothing conv per level. No normalization layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .params import ParamSet
from .roialign import PyramidFeatures
from . import tensor as T


@dataclass
class BackboneConfig:
    stem_channels: tuple = (32, 64, 128, 256)
    channels: int = 256
    seed: int = 0

    def validate(self):
        if len(self.stem_channels) != 4:
            raise ShapeError(f"backbone needs 4 stage widths, got {self.stem_channels}")
        return self


def build_backbone(cfg: BackboneConfig, ps: ParamSet) -> ParamSet:
    cfg.validate()
    c1, c2, c3, c4 = cfg.stem_channels
    cp = cfg.channels
    ps.add_conv("backbone.stem1a", c1, 3, 3)
    ps.add_conv("backbone.stem1b", c1, c1, 3)
    ps.add_conv("backbone.stem2", c2, c1, 3)
    ps.add_conv("backbone.stem3", c3, c2, 3)
    ps.add_conv("backbone.stem4", c4, c3, 3)
    for level, cin in zip((2, 3, 4, 5), (c1, c2, c3, c4)):
        ps.add_conv(f"backbone.lateral{level}", cp, cin, 1)
        ps.add_conv(f"backbone.smooth{level}", cp, cp, 3)
    return ps


def backbone_forward(img: T.Tensor, cfg: BackboneConfig, ps: ParamSet) -> PyramidFeatures:
    """Image (1,3,H,W) with H,W multiples of 32 -> P2..P5 feature maps."""
    if img.data.ndim != 4 or img.data.shape[:2] != (1, 3):
        raise ShapeError(f"backbone: expected (1,3,H,W) image, got {img.data.shape}")
    _, _, h, w = img.data.shape
    if h % 32 or w % 32:
        raise ShapeError(f"backbone: image dims must be multiples of 32, got {h}x{w}")

    def down(name, x):
        return T.relu(T.conv2d(x, ps[name + ".w"], ps[name + ".b"], stride=2, pad=1))

    c2 = down("backbone.stem1b", down("backbone.stem1a", img))
    c3 = down("backbone.stem2", c2)
    c4 = down("backbone.stem3", c3)
    c5 = down("backbone.stem4", c4)

    def lateral(level, x):
        return T.conv2d(x, ps[f"backbone.lateral{level}.w"],
                        ps[f"backbone.lateral{level}.b"])

    t5 = lateral(5, c5)
    t4 = T.add(lateral(4, c4), T.upsample_nearest2(t5))
    t3 = T.add(lateral(3, c3), T.upsample_nearest2(t4))
    t2 = T.add(lateral(2, c2), T.upsample_nearest2(t3))

    levels = {}
    for level, t in ((2, t2), (3, t3), (4, t4), (5, t5)):
        levels[level] = T.conv2d(t, ps[f"backbone.smooth{level}.w"],
                                 ps[f"backbone.smooth{level}.b"], pad=1)
    return PyramidFeatures(levels=levels, channels=cfg.channels,
                           image_height=h, image_width=w)
