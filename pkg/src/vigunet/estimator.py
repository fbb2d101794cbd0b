"""Array-in/array-out wrapper with the usual fit/predict surface."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, VigUnet
from .tensor import Tensor, make_rng, no_grad, sigmoid
from .training import (CosineSchedule, channel_stats, fit, iou_metric,
                       normalize_image)
from .validation import check_images, check_masks, check_square_size


class VigUnetSegmenter(BaseEstimator):
    """Binary segmenter over RGB image batches.

    fit(X, y) takes images [N, H, W, 3] or [N, 3, H, W] (uint8 or floats in
    [0, 1]) with binary masks [N, H, W]; the input side fixes the network's
    resolution. predict returns {0, 1} masks, predict_proba the sigmoid
    probabilities, score the mean IoU.
    """

    def __init__(self, dims=(8, 16, 32, 64, 128), k=9, heads=4, ffn_ratio=4,
                 reductions=(1, 1, 1, 1, 1), droppath=0.0, epochs=20,
                 batch_size=4, lr_max=1e-4, lr_min=1e-5, augment=True, seed=41):
        self.dims = dims
        self.k = k
        self.heads = heads
        self.ffn_ratio = ffn_ratio
        self.reductions = reductions
        self.droppath = droppath
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.augment = augment
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X.shape)
        side = check_square_size(X.shape[2], X.shape[3])
        self.mean_, self.std_ = channel_stats(X)
        config = ModelConfig(in_channels=3, num_classes=1, image_h=side,
                             image_w=side, dims=tuple(self.dims), k=self.k,
                             heads=self.heads, ffn_ratio=self.ffn_ratio,
                             reductions=tuple(self.reductions),
                             droppath_rate=self.droppath)
        rng = make_rng(self.seed)
        self.model_ = VigUnet(config, rng=rng)
        samples = [(X[i], y[i]) for i in range(len(X))]
        schedule = CosineSchedule(self.lr_max, self.lr_min, t_max=max(self.epochs, 1))
        self.history_ = fit(self.model_, samples, [], epochs=self.epochs,
                            rng=rng, batch_size=self.batch_size,
                            schedule=schedule, augment=self.augment,
                            mean=self.mean_, std=self.std_)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel foreground probabilities, [N, H, W] float32."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        cfg = self.model_.config
        if X.shape[2:] != (cfg.image_h, cfg.image_w):
            raise ValueError(f"fitted for {cfg.image_h}x{cfg.image_w} inputs, "
                             f"got {X.shape[2]}x{X.shape[3]}")
        probs = []
        with no_grad():
            for start in range(0, len(X), self.batch_size):
                chunk = X[start : start + self.batch_size]
                chunk = np.stack([normalize_image(im, self.mean_, self.std_)
                                  for im in chunk])
                logits = self.model_.forward(Tensor(chunk), mode="eval")
                probs.append(sigmoid(logits).data[:, 0])
        return np.concatenate(probs, axis=0)

    def predict(self, X) -> np.ndarray:
        """Thresholded {0, 1} masks, [N, H, W] uint8."""
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean IoU of predict(X) against the reference masks."""
        pred = self.predict(X)
        y = check_masks(y, (len(pred), 3) + pred.shape[1:])
        return float(np.mean([iou_metric(p, t) for p, t in zip(pred, y)]))
