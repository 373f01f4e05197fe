"""Desk-scale laboratory for boundary-preserving instance mask heads."""

from .errors import (ConfigError, DatasetFormatError, GraphError,
                     NumericalError, ShapeError)
from .fpn import BackboneConfig, backbone_forward, build_backbone
from .heads import HeadConfig, HeadOutputs, build_head, count_macs, forward
from .imgproc import (Box, Shape, crop_resize_mask, extract_boundary,
                      mask_iou, paste_mask, rasterize_shape, sobel_xy)
from .losses import (LossConfig, LossReport, bce, boundary_loss, dice,
                     mask_loss, weighted_bce)
from .params import ParamSet, load_checkpoint, read_checkpoint, save_checkpoint, sgd_step
from .roialign import (PyramidFeatures, RoiFeatures, assign_level,
                       extract_roi_features, roi_align)
from .synthdata import DatasetSpec, Instance, SceneSample, generate
from .tensor import Tensor, backward, no_grad
from .traineval import (APReport, Model, TrainConfig, ap_curve_export,
                        build_model, evaluate, predict_instance, train)

__version__ = "0.1.0"
