"""Optimization recipe: mixed BCE+Dice objective, Adam with cosine-annealed
learning rate, geometric augmentation, and IoU/Dice evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import StateError
from .tensor import ShapeError, Tensor, no_grad, sigmoid, softplus


def _pair(logits, target):
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.shape != t.shape:
        raise ShapeError(f"logits {logits.shape} vs target {t.shape}")
    return logits, t.astype(logits.dtype)


def bce_loss(logits, target) -> Tensor:
    """Mean binary cross entropy on logits, computed in log-sum-exp form
    (softplus(x) - x*y) so large logits cannot overflow."""
    logits, t = _pair(logits, target)
    return (softplus(logits) - logits * Tensor(t)).mean()


def dice_loss(logits, target, smooth=1.0) -> Tensor:
    """Soft Dice loss on sigmoid probabilities with additive smoothing."""
    logits, t = _pair(logits, target)
    p = sigmoid(logits)
    ty = Tensor(t)
    inter = (p * ty).sum()
    denom = p.sum() + ty.sum() + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def mixed_loss(logits, target) -> Tensor:
    """Training objective: 0.5 * BCE + Dice."""
    return 0.5 * bce_loss(logits, target) + dice_loss(logits, target)


def _binary_pair(pred, target):
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} vs target {t.shape}")
    return p.astype(bool), t.astype(bool)


def iou_metric(pred_mask, target) -> float:
    """Intersection over union of binary masks; both empty counts as 1.0."""
    p, t = _binary_pair(pred_mask, target)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def dice_metric(pred_mask, target) -> float:
    """Dice coefficient of binary masks; both empty counts as 1.0."""
    p, t = _binary_pair(pred_mask, target)
    total = p.sum() + t.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / total)


def predict_mask(logits) -> np.ndarray:
    """Threshold logits at probability 0.5 (logit 0) into a {0,1} mask."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (x >= 0.0).astype(np.uint8)


class Adam:
    """Adam over a list of parameter tensors, with bias correction.

    ``lr`` is mutable so a schedule can retune it between epochs. ``step``
    consumes the gradients currently stored on the parameters.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise StateError("adam step with no gradient on a parameter")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class CosineSchedule:
    """Cosine annealing from lr_max at epoch 0 down to lr_min at epoch t_max."""

    lr_max: float = 1e-4
    lr_min: float = 1e-5
    t_max: int = 200

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} must be below lr_max {self.lr_max}")
        if self.t_max < 1:
            raise ValueError("t_max must be positive")

    def __call__(self, epoch: int) -> float:
        if not 0 <= epoch <= self.t_max:
            raise ValueError(f"epoch {epoch} outside [0, {self.t_max}]")
        # convex combination keeps both endpoints exact
        w = 0.5 * (1.0 + math.cos(math.pi * epoch / self.t_max))
        return self.lr_min * (1.0 - w) + self.lr_max * w


def channel_stats(images) -> tuple:
    """Per-channel mean and stddev over a list of [C, H, W] images."""
    stacked = np.stack([np.asarray(im) for im in images])
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize_image(img: np.ndarray, mean, std) -> np.ndarray:
    """Standardize a [C, H, W] image with per-channel statistics."""
    m = np.asarray(mean, dtype=img.dtype).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=img.dtype).reshape(-1, 1, 1)
    return (img - m) / s


def augment_sample(img: np.ndarray, mask: np.ndarray, rng, mean=None, std=None):
    """Random clockwise quarter-turns plus horizontal/vertical flips, applied
    identically to image [C, H, W] and mask [H, W]; then per-channel
    normalization of the image alone (when stats are given)."""
    if img.shape[-2] != img.shape[-1]:
        raise ValueError(f"rotation needs square inputs, got {img.shape}")
    if img.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"image {img.shape} vs mask {mask.shape}")
    k = int(rng.integers(0, 4))
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    # np.rot90 turns counter-clockwise; negate for clockwise turns
    img = np.rot90(img, k=-k, axes=(-2, -1))
    mask = np.rot90(mask, k=-k, axes=(-2, -1))
    if flip_h:
        img = img[..., ::-1]
        mask = mask[..., ::-1]
    if flip_v:
        img = img[..., ::-1, :]
        mask = mask[..., ::-1, :]
    img = np.ascontiguousarray(img)
    mask = np.ascontiguousarray(mask)
    if mean is not None:
        img = normalize_image(img, mean, std)
    return img, mask


@dataclass
class EvalReport:
    """Per-dataset evaluation summary."""

    mean_iou: float
    mean_dice: float
    per_iou: list = field(default_factory=list)
    per_dice: list = field(default_factory=list)
    mean_bce: float = 0.0
    mean_dice_loss: float = 0.0


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def train_epoch(model, samples, optimizer, rng, batch_size=4, augment=True,
                mean=None, std=None):
    """One pass over the training samples; returns the per-batch loss list.

    Samples are (image [C,H,W] float, mask [H,W] {0,1}) pairs or objects with
    .image/.mask. Order is reshuffled from ``rng`` every call.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    pairs = [(s.image, s.mask) if hasattr(s, "image") else s for s in samples]
    order = rng.permutation(len(pairs))
    losses = []
    for batch in _batches(len(pairs), batch_size, order):
        imgs, masks = [], []
        for j in batch:
            im, mk = pairs[j]
            if augment:
                im, mk = augment_sample(im, mk, rng, mean, std)
            elif mean is not None:
                im = normalize_image(im, mean, std)
            imgs.append(im)
            masks.append(mk)
        x = Tensor(np.stack(imgs))
        y = np.stack(masks)[:, None, :, :]
        logits = model.forward(x, mode="train", rng=rng)
        loss = mixed_loss(logits, y)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.data))
    return losses


def evaluate(model, samples, batch_size=4, mean=None, std=None) -> EvalReport:
    """Eval-mode forwards over a dataset; thresholds at 0.5 and aggregates
    per-sample IoU/Dice plus the loss components."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    pairs = [(s.image, s.mask) if hasattr(s, "image") else s for s in samples]
    per_iou, per_dice, bces, dices = [], [], [], []
    with no_grad():
        for batch in _batches(len(pairs), batch_size):
            imgs = []
            masks = []
            for j in batch:
                im, mk = pairs[j]
                if mean is not None:
                    im = normalize_image(im, mean, std)
                imgs.append(im)
                masks.append(mk)
            x = Tensor(np.stack(imgs))
            y = np.stack(masks)[:, None, :, :]
            logits = model.forward(x, mode="eval")
            bces.append(float(bce_loss(logits, y).data))
            dices.append(float(dice_loss(logits, y).data))
            pred = predict_mask(logits)
            for row in range(len(batch)):
                per_iou.append(iou_metric(pred[row, 0], y[row, 0]))
                per_dice.append(dice_metric(pred[row, 0], y[row, 0]))
    return EvalReport(mean_iou=float(np.mean(per_iou)),
                      mean_dice=float(np.mean(per_dice)),
                      per_iou=per_iou, per_dice=per_dice,
                      mean_bce=float(np.mean(bces)),
                      mean_dice_loss=float(np.mean(dices)))


def fit(model, train_samples, val_samples, epochs, rng, batch_size=4,
        schedule=None, augment=True, mean=None, std=None, on_epoch=None):
    """Full training loop.

    Runs ``epochs`` passes, retuning the learning rate from the schedule at
    each epoch start and evaluating on the validation set afterwards.
    ``on_epoch(record)`` fires with the row {'epoch', 'lr', 'train_loss',
    'val_iou', 'val_dice'}; returns the list of all rows.
    """
    if schedule is None:
        schedule = CosineSchedule(t_max=max(epochs, 1))
    optimizer = Adam([p for _, p in model.named_parameters()], lr=schedule(0))
    history = []
    for epoch in range(epochs):
        optimizer.lr = schedule(min(epoch, schedule.t_max))
        losses = train_epoch(model, train_samples, optimizer, rng,
                             batch_size=batch_size, augment=augment,
                             mean=mean, std=std)
        if val_samples:
            report = evaluate(model, val_samples, batch_size=batch_size,
                              mean=mean, std=std)
            val_iou, val_dice = report.mean_iou, report.mean_dice
        else:
            val_iou = val_dice = float("nan")
        record = {"epoch": epoch, "lr": optimizer.lr,
                  "train_loss": float(np.mean(losses)),
                  "val_iou": val_iou, "val_dice": val_dice,
                  "batch_losses": losses}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history
