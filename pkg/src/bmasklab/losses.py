"""Boundary and mask losses: BCE, class-balanced BCE, Dice, and Dice+BCE.

All losses take predicted probability maps as Tensors and binary numpy
targets, and return scalar Tensors. Batched variants treat the leading
axis as instances and average per-instance losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T

PROB_EPS = 1e-7  # probabilities are clamped to [eps, 1-eps] before logs

BOUNDARY_LOSS_KINDS = ("bce", "weighted_bce", "dice", "dice_bce")
BOUNDARY_TARGETS = ("boundary", "mask", "none")


@dataclass
class LossConfig:
    kind: str = "dice_bce"
    lam: float = 1.0          # BCE weight inside dice_bce
    epsilon: float = 1.0      # Dice smoothing term
    target: str = "boundary"

    def validate(self):
        if self.kind not in BOUNDARY_LOSS_KINDS:
            raise ConfigError(f"unknown boundary loss kind {self.kind!r}")
        if self.target not in BOUNDARY_TARGETS:
            raise ConfigError(f"unknown boundary target {self.target!r}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        return self


@dataclass
class LossReport:
    mask_loss: float
    boundary_loss: float
    total: float


def _check_target(p: T.Tensor, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.data.shape:
        raise ShapeError(f"loss: prediction {p.data.shape} vs target {y.shape}")
    return y


def bce(p: T.Tensor, y) -> T.Tensor:
    """Mean binary cross-entropy of a probability map against a binary map."""
    y = _check_target(p, y)
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = T.mul(T.log(pc), T.Tensor(y))
    negt = T.mul(T.log(T.add_scalar(T.neg(pc), 1.0)), T.Tensor(1.0 - y))
    return T.neg(T.mean_all(T.add(pos, negt)))


def weighted_bce(p: T.Tensor, y) -> T.Tensor:
    """HED-style class-balanced BCE: positives weighted by the negative
    fraction and vice versa. Degenerate targets (all 0 or all 1) fall back
    to plain bce."""
    y = _check_target(p, y)
    n_pos = float(y.sum())
    n = y.size
    if n_pos == 0 or n_pos == n:
        return bce(p, y)
    beta = (n - n_pos) / n
    weights = np.where(y > 0, beta, 1.0 - beta)
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    pos = T.mul(T.log(pc), T.Tensor(y))
    negt = T.mul(T.log(T.add_scalar(T.neg(pc), 1.0)), T.Tensor(1.0 - y))
    return T.neg(T.mean_all(T.mul(T.add(pos, negt), T.Tensor(weights))))


def dice(p: T.Tensor, y, eps: float = 1.0) -> T.Tensor:
    """Dice loss 1 - (2*sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps)."""
    y = _check_target(p, y)
    inter = T.sum_all(T.mul(p, T.Tensor(y)))
    denom = T.add_scalar(T.sum_all(T.mul(p, p)), float((y * y).sum()) + eps)
    ratio = T.div(T.add_scalar(T.mul_scalar(inter, 2.0), eps), denom)
    return T.add_scalar(T.neg(ratio), 1.0)


def boundary_loss(p_b: T.Tensor, y_b, cfg: LossConfig) -> T.Tensor:
    """Dispatch on cfg.kind; dice_bce is dice + lambda * bce."""
    if cfg.target == "none":
        return T.Tensor(0.0)
    if cfg.kind == "bce":
        return bce(p_b, y_b)
    if cfg.kind == "weighted_bce":
        return weighted_bce(p_b, y_b)
    if cfg.kind == "dice":
        return dice(p_b, y_b, cfg.epsilon)
    if cfg.kind == "dice_bce":
        return T.add(dice(p_b, y_b, cfg.epsilon), T.mul_scalar(bce(p_b, y_b), cfg.lam))
    raise ConfigError(f"unknown boundary loss kind {cfg.kind!r}")


def mask_loss(logits: T.Tensor, cls: int, target) -> T.Tensor:
    """Per-instance mask BCE on the target class channel only."""
    if logits.data.ndim != 3:
        raise ShapeError(f"mask_loss: expected KxHxW logits, got {logits.data.shape}")
    k = logits.data.shape[0]
    if not (0 <= cls < k):
        raise ShapeError(f"mask_loss: class {cls} out of range for K={k}")
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.data.shape[1:]:
        raise ShapeError(f"mask_loss: target {t.shape} vs logits {logits.data.shape}")
    n, h, w = 1, *logits.data.shape[1:]
    batched = T.reshape(logits, (1, k, h, w))
    chan = T.select_classes(batched, np.array([cls]))
    return bce(T.sigmoid(chan), t[None])


# ---------------------------------------------------------------------------
# batched variants used by the training loop


def mask_loss_batch(logits: T.Tensor, classes, targets) -> T.Tensor:
    """Mean mask BCE over instances; logits (N,K,H,W), targets (N,H,W)."""
    classes = np.asarray(classes, dtype=np.int64)
    chan = T.select_classes(logits, classes)
    return bce(T.sigmoid(chan), np.asarray(targets, dtype=np.float64))


def _dice_batch(p: T.Tensor, y: np.ndarray, eps: float) -> T.Tensor:
    inter = T.sum_axes(T.mul(p, T.Tensor(y)), (1, 2))
    psq = T.sum_axes(T.mul(p, p), (1, 2))
    denom = T.add(psq, T.Tensor((y * y).sum(axis=(1, 2)) + eps))
    ratio = T.div(T.add_scalar(T.mul_scalar(inter, 2.0), eps), denom)
    return T.mean_all(T.add_scalar(T.neg(ratio), 1.0))


def boundary_loss_batch(logits: T.Tensor, classes, targets,
                        cfg: LossConfig) -> T.Tensor:
    """Mean boundary loss over instances; logits (N,K,H,W), targets (N,H,W)."""
    if cfg.target == "none":
        return T.Tensor(0.0)
    classes = np.asarray(classes, dtype=np.int64)
    y = np.asarray(targets, dtype=np.float64)
    p = T.sigmoid(T.select_classes(logits, classes))
    if cfg.kind == "bce":
        return bce(p, y)
    if cfg.kind == "weighted_bce":
        # balancing weights are per-instance, so average instance losses
        n = y.shape[0]
        acc = None
        for i in range(n):
            item = weighted_bce(_slice_instance(p, i), y[i])
            acc = item if acc is None else T.add(acc, item)
        return T.mul_scalar(acc, 1.0 / n)
    if cfg.kind == "dice":
        return _dice_batch(p, y, cfg.epsilon)
    if cfg.kind == "dice_bce":
        return T.add(_dice_batch(p, y, cfg.epsilon),
                     T.mul_scalar(bce(p, y), cfg.lam))
    raise ConfigError(f"unknown boundary loss kind {cfg.kind!r}")


def _slice_instance(p: T.Tensor, i: int) -> T.Tensor:
    """View instance i of a (N,H,W) tensor as (H,W) with gradient routing."""
    n, h, w = p.data.shape
    data = p.data[i]

    def bwd(g):
        full = np.zeros_like(p.data)
        full[i] = g
        return (full,)

    return T._make(data, (p,), bwd)
