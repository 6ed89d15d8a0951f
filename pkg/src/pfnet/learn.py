"""Losses, edge-target derivation, SGD with momentum, and the training loop.

Training minimizes cross-entropy on the class mask plus binary
cross-entropy on each enabled gap's boundary map, both weighted 1 by
default.  The learning rate follows the poly schedule
``base_lr * (1 - iter / total_iter) ** power`` with power 0.9.

Edge targets come from 4-connected label changes dilated by a Chebyshev
radius, OR-pooled down to each gap's stride.  A non-finite loss aborts
immediately with the iteration and the operation that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from . import tensor as tt
from .data import AUGMENT_OPS, augment
from .metrics import label_boundaries
from .network import ParameterSet, init_params, pfnet_forward
from .ops import bilinear_resize
from .tensor import Tape, Tensor, _accumulate, _maybe_record, reverse_accumulate

EDGE_STRIDES = (8, 16, 32)
IGNORE_LABEL = 255
_EPS = 1e-7


class TrainingAborted(RuntimeError):
    def __init__(self, iteration, detail):
        super().__init__(f"non-finite loss at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    epochs: int = 16
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    batch_size: int = 8
    seed: int = 0
    edge_radius: int = 1
    ce_weight: float = 1.0
    bce_weight: float = 1.0
    augment: bool = True
    checkpoint_every: int = 0  # iterations; 0 disables periodic checkpoints

    def validate(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")


# ---------------------------------------------------------------------------
# targets


def edge_map(mask, radius=1):
    """Full-resolution boundary pixels: any 4-neighbor label change,
    dilated by the Chebyshev radius."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("empty mask")
    edges = label_boundaries(mask)
    if radius > 0:
        edges = maximum_filter(edges.astype(np.uint8), size=2 * radius + 1).astype(bool)
    return edges


def edge_targets_from_mask(mask, radius=1, strides=EDGE_STRIDES):
    """Binary boundary grids at the requested strides (default 8/16/32),
    downsampled from :func:`edge_map` by logical-OR pooling."""
    edges = edge_map(mask, radius)
    h, w = edges.shape
    targets = {}
    for s in strides:
        if h % s or w % s:
            raise ValueError(f"mask size {h}x{w} not divisible by stride {s}")
        targets[s] = (
            edges.reshape(h // s, s, w // s, s).max(axis=(1, 3)).astype(np.float64)
        )
    return targets


# ---------------------------------------------------------------------------
# losses


def bce_loss(pred, target):
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    p = np.clip(pred.data, _EPS, 1.0 - _EPS)
    count = p.size
    loss = float(-(target * np.log(p) + (1.0 - target) * np.log1p(-p)).sum() / count)
    out = Tensor(np.asarray(loss, dtype=pred.dtype), _op="bce_loss")

    def backward(g):
        inside = (pred.data > _EPS) & (pred.data < 1.0 - _EPS)
        grad = (p - target) / (p * (1.0 - p) * count)
        _accumulate(pred, (g * grad * inside).astype(pred.dtype))

    return _maybe_record(out, (pred,), backward)


def ce_loss(logits, mask, ignore_label=IGNORE_LABEL):
    """Mean cross-entropy over non-ignored pixels of an integer mask."""
    mask = np.asarray(mask)
    n, k, h, w = logits.shape
    if mask.shape != (n, h, w):
        raise ValueError(f"logits {logits.shape} vs mask {mask.shape}")
    valid = mask != ignore_label
    if not valid.any():
        raise ValueError("all pixels ignored")
    if mask[valid].max() >= k:
        raise ValueError("mask label outside class range")
    count = int(valid.sum())

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz  # [N, K, H, W]
    labels = np.where(valid, mask, 0).astype(np.int64)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    loss = float(-(picked * valid).sum() / count)
    out = Tensor(np.asarray(loss, dtype=logits.dtype), _op="ce_loss")

    def backward(g):
        softmax = np.exp(logp)
        onehot = np.zeros_like(softmax)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        grad = (softmax - onehot) * valid[:, None] / count
        _accumulate(logits, (g * grad).astype(logits.dtype))

    return _maybe_record(out, (logits,), backward)


def poly_lr(base_lr, iteration, total_iter, power=0.9):
    return base_lr * (1.0 - iteration / total_iter) ** power


# ---------------------------------------------------------------------------
# optimizer


class SgdMomentum:
    """SGD with momentum and decoupled-from-nothing weight decay:

    v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v
    """

    def __init__(self, momentum=0.9, weight_decay=1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params, lr):
        new = ParameterSet()
        for name in sorted(params):
            p = params[name]
            grad = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
            grad = grad + self.weight_decay * p.data
            v = self.momentum * self.velocity.get(name, 0.0) + grad
            self.velocity[name] = v
            new[name] = Tensor((p.data - lr * v).astype(p.dtype), requires_grad=True)
        return new


# ---------------------------------------------------------------------------
# steps and loop


def _batch_losses(params, images, masks, net_cfg, train_cfg):
    """Forward pass and the combined loss for one assembled batch."""
    out = pfnet_forward(Tensor(images), params, net_cfg)
    full = bilinear_resize(out.logits, images.shape[2:])
    ce = ce_loss(full, masks)
    total = tt.scale(ce, train_cfg.ce_weight)
    bce_parts = []
    if out.boundary_maps and train_cfg.bce_weight != 0.0:
        for gap in sorted(out.boundary_maps):
            stride = 2 ** gap
            target = np.stack(
                [edge_targets_from_mask(m, train_cfg.edge_radius)[stride] for m in masks]
            )[:, None]
            bce_parts.append(bce_loss(out.boundary_maps[gap], target))
        bce_sum = bce_parts[0]
        for part in bce_parts[1:]:
            bce_sum = tt.add(bce_sum, part)
        total = tt.add(total, tt.scale(bce_sum, train_cfg.bce_weight))
    ce_val = float(ce.data)
    bce_val = float(sum(float(p.data) for p in bce_parts))
    return total, ce_val, bce_val


def train_step(params, optimizer, batch, net_cfg, train_cfg, iteration, total_iter):
    """One optimization step; returns (new params, loss components)."""
    images = np.stack([img for img, _ in batch]).astype(np.float32)
    masks = np.stack([m for _, m in batch])
    lr = poly_lr(train_cfg.base_lr, iteration, total_iter, train_cfg.poly_power)
    try:
        with Tape() as tape:
            total, ce_val, bce_val = _batch_losses(params, images, masks, net_cfg, train_cfg)
        reverse_accumulate(tape, total)
    except FloatingPointError as exc:
        raise TrainingAborted(iteration, str(exc)) from exc
    new_params = optimizer.step(params, lr)
    return new_params, {"lr": lr, "ce": ce_val, "bce_total": bce_val, "total": float(total.data)}


def train_run(crops, net_cfg, train_cfg, on_log=None, on_checkpoint=None):
    """Full training loop over (image, mask) crops.

    Batch order and augmentation choices are seeded, so a rerun with the
    same inputs reproduces the final parameters byte for byte.
    """
    train_cfg.validate()
    params = init_params(net_cfg, train_cfg.seed, dtype=np.float32)
    optimizer = SgdMomentum(train_cfg.momentum, train_cfg.weight_decay)
    n = len(crops)
    if n == 0:
        raise ValueError("no training crops")
    batches_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_iter = train_cfg.epochs * batches_per_epoch
    iteration = 0
    for epoch in range(train_cfg.epochs):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([train_cfg.seed, 1000 + epoch]))
        )
        order = rng.permutation(n)
        ops = (
            rng.integers(0, len(AUGMENT_OPS), size=n)
            if train_cfg.augment
            else np.zeros(n, dtype=int)
        )
        for start in range(0, n, train_cfg.batch_size):
            chosen = order[start : start + train_cfg.batch_size]
            batch = []
            for pos, idx in enumerate(chosen):
                img, msk = crops[idx]
                img, msk = augment(img, msk, AUGMENT_OPS[ops[start + pos]])
                batch.append((img, msk))
            params, stats = train_step(
                params, optimizer, batch, net_cfg, train_cfg, iteration, total_iter
            )
            if on_log is not None:
                on_log(iteration, stats)
            iteration += 1
            if (
                on_checkpoint is not None
                and train_cfg.checkpoint_every > 0
                and iteration % train_cfg.checkpoint_every == 0
                and iteration < total_iter
            ):
                on_checkpoint(iteration, params)
    return params
