"""Composite network blocks: graph-convolution and feed-forward residual
blocks plus the stem and the resolution-changing transitions.

All blocks take and return [B, C, H, W] maps. ``forward(x, mode, rng)``
threads the train/eval mode down to batch norm and stochastic depth; rng is
only consulted in train mode when the droppath rate is nonzero.
"""
from __future__ import annotations

import numpy as np

from .graph import UpdateHeads, _knn_batch, _mr_aggregate_batch, to_map, to_nodes
from .layers import BatchNorm2d, Conv2d
from .tensor import DEFAULT_DTYPE, Tensor, bilinear_upsample, droppath, gelu


class Grapher:
    """Residual graph-convolution block.

    Projects the map, rebuilds a KNN graph from the projected features of
    each sample, aggregates max-relative neighborhoods, applies the per-head
    update, projects back down and adds the input.
    """

    def __init__(self, dim, k=9, heads=4, droppath_rate=0.0, reduction=1, rng=None,
                 dtype=DEFAULT_DTYPE):
        self.dim = dim
        self.k = k
        self.reduction = reduction
        self.droppath_rate = droppath_rate
        self.fc_in = Conv2d(dim, dim, kernel_size=1, rng=rng, dtype=dtype)
        self.bn_in = BatchNorm2d(dim, dtype=dtype)
        self.heads = UpdateHeads(2 * dim, 2 * dim, heads, rng=rng, dtype=dtype)
        self.bn_heads = BatchNorm2d(2 * dim, dtype=dtype)
        self.fc_out = Conv2d(2 * dim, dim, kernel_size=1, rng=rng, dtype=dtype)
        self.bn_out = BatchNorm2d(dim, dtype=dtype)

    def forward(self, x: Tensor, mode="train", rng=None) -> Tensor:
        _, _, h, w = x.shape
        y = self.bn_in(self.fc_in(x), mode)
        nodes = to_nodes(y)
        neighbors = _knn_batch(nodes.data, self.k, grid=(h, w), reduction=self.reduction)
        agg = _mr_aggregate_batch(nodes, neighbors)
        upd = self.heads(agg)
        z = self.bn_heads(to_map(upd, h, w), mode)
        z = self.bn_out(self.fc_out(z), mode)
        z = gelu(z)
        z = droppath(z, self.droppath_rate, mode, rng)
        return z + x

    __call__ = forward

    def named_parameters(self, prefix=""):
        yield from self.fc_in.named_parameters(prefix + "fc_in.")
        yield from self.bn_in.named_parameters(prefix + "bn_in.")
        yield from self.heads.named_parameters(prefix + "heads.")
        yield from self.bn_heads.named_parameters(prefix + "bn_heads.")
        yield from self.fc_out.named_parameters(prefix + "fc_out.")
        yield from self.bn_out.named_parameters(prefix + "bn_out.")

    def named_buffers(self, prefix=""):
        yield from self.bn_in.named_buffers(prefix + "bn_in.")
        yield from self.bn_heads.named_buffers(prefix + "bn_heads.")
        yield from self.bn_out.named_buffers(prefix + "bn_out.")


class Ffn:
    """Residual feed-forward block: two 1x1 convs around a GELU, the hidden
    width a fixed multiple of the input width."""

    def __init__(self, dim, hidden_ratio=4, droppath_rate=0.0, rng=None,
                 dtype=DEFAULT_DTYPE):
        hidden = dim * hidden_ratio
        self.dim = dim
        self.droppath_rate = droppath_rate
        self.fc1 = Conv2d(dim, hidden, kernel_size=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype=dtype)
        self.fc2 = Conv2d(hidden, dim, kernel_size=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(dim, dtype=dtype)

    def forward(self, x: Tensor, mode="train", rng=None) -> Tensor:
        y = gelu(self.bn1(self.fc1(x), mode))
        y = self.bn2(self.fc2(y), mode)
        y = droppath(y, self.droppath_rate, mode, rng)
        return y + x

    __call__ = forward

    def named_parameters(self, prefix=""):
        yield from self.fc1.named_parameters(prefix + "fc1.")
        yield from self.bn1.named_parameters(prefix + "bn1.")
        yield from self.fc2.named_parameters(prefix + "fc2.")
        yield from self.bn2.named_parameters(prefix + "bn2.")

    def named_buffers(self, prefix=""):
        yield from self.bn1.named_buffers(prefix + "bn1.")
        yield from self.bn2.named_buffers(prefix + "bn2.")


class Stem:
    """Input stem: two 3x3 convs (second one strided) that map the image to
    the first feature width at half resolution, plus a learnable additive
    position embedding over that grid."""

    def __init__(self, in_channels, dim, image_hw, rng=None, dtype=DEFAULT_DTYPE):
        h, w = image_hw
        if h % 2 or w % 2:
            raise ValueError(f"stem input size must be even, got {h}x{w}")
        self.conv1 = Conv2d(in_channels, dim, kernel_size=3, stride=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(dim, dtype=dtype)
        self.conv2 = Conv2d(dim, dim, kernel_size=3, stride=2, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(dim, dtype=dtype)
        self.pos_embed = Tensor(np.zeros((1, dim, h // 2, w // 2), dtype=dtype),
                                requires_grad=True)

    def forward(self, x: Tensor, mode="train") -> Tensor:
        y = gelu(self.bn1(self.conv1(x), mode))
        y = gelu(self.bn2(self.conv2(y), mode))
        return y + self.pos_embed

    __call__ = forward

    def named_parameters(self, prefix=""):
        yield from self.conv1.named_parameters(prefix + "conv1.")
        yield from self.bn1.named_parameters(prefix + "bn1.")
        yield from self.conv2.named_parameters(prefix + "conv2.")
        yield from self.bn2.named_parameters(prefix + "bn2.")
        yield prefix + "pos_embed", self.pos_embed

    def named_buffers(self, prefix=""):
        yield from self.bn1.named_buffers(prefix + "bn1.")
        yield from self.bn2.named_buffers(prefix + "bn2.")


class Downsample:
    """Halve resolution and change width with one strided 3x3 conv + norm."""

    def __init__(self, in_dim, out_dim, rng=None, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(in_dim, out_dim, kernel_size=3, stride=2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_dim, dtype=dtype)

    def forward(self, x: Tensor, mode="train") -> Tensor:
        return self.bn(self.conv(x), mode)

    __call__ = forward

    def named_parameters(self, prefix=""):
        yield from self.conv.named_parameters(prefix + "conv.")
        yield from self.bn.named_parameters(prefix + "bn.")

    def named_buffers(self, prefix=""):
        yield from self.bn.named_buffers(prefix + "bn.")


class Upsample:
    """Double resolution bilinearly, then change width with a 3x3 conv + norm."""

    def __init__(self, in_dim, out_dim, rng=None, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(in_dim, out_dim, kernel_size=3, stride=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_dim, dtype=dtype)

    def forward(self, x: Tensor, mode="train") -> Tensor:
        return self.bn(self.conv(bilinear_upsample(x, 2)), mode)

    __call__ = forward

    def named_parameters(self, prefix=""):
        yield from self.conv.named_parameters(prefix + "conv.")
        yield from self.bn.named_parameters(prefix + "bn.")

    def named_buffers(self, prefix=""):
        yield from self.bn.named_buffers(prefix + "bn.")
