"""Input validation for the array-in/array-out estimator interface."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_images(X) -> np.ndarray:
    """Coerce a batch of RGB images to float32 [N, 3, H, W] in [0, 1].

    Accepts channels-first or channels-last layouts; uint8 input is scaled
    by 1/255, float input is taken as already scaled.
    """
    X = check_array(X, allow_nd=True, dtype=None, ensure_2d=False)
    if X.ndim != 4:
        raise ValueError(f"expected 4-d image batch, got shape {X.shape}")
    if X.shape[1] == 3:
        pass
    elif X.shape[-1] == 3:
        X = np.transpose(X, (0, 3, 1, 2))
    else:
        raise ValueError(f"expected 3 channels first or last, got shape {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    else:
        X = X.astype(np.float32, copy=False)
    return np.ascontiguousarray(X)


def check_masks(y, image_shape) -> np.ndarray:
    """Coerce binary masks to float32 [N, H, W] matching the image batch."""
    y = check_array(y, allow_nd=True, dtype=None, ensure_2d=False)
    if y.ndim != 3:
        raise ValueError(f"expected [N, H, W] masks, got shape {y.shape}")
    n, _, h, w = image_shape
    if y.shape != (n, h, w):
        raise ValueError(f"masks {y.shape} do not match images [{n}, {h}, {w}]")
    vals = np.unique(y)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"masks must be binary 0/1, found values {vals[:8]}")
    return y.astype(np.float32)


def check_square_size(h: int, w: int) -> int:
    """The network wants square inputs with side divisible by 32."""
    if h != w:
        raise ValueError(f"expected square images, got {h}x{w}")
    if h % 32:
        raise ValueError(f"image side {h} must be divisible by 32")
    return h
