"""Learnable layers: convolution parameters and batch-norm state."""
from __future__ import annotations

import numpy as np

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, conv2d, make_rng


class StateError(RuntimeError):
    """Raised when a layer is used with missing or inconsistent state."""


def kaiming_uniform(shape, fan_in, rng, dtype=DEFAULT_DTYPE) -> Tensor:
    """Fan-in scaled uniform init, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv2d:
    """Convolution weights/bias plus stride and padding.

    Kernels must be odd-sized and stride 1 or 2; padding defaults to
    kernel//2 so stride-1 convolutions preserve the spatial size.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None,
                 rng=None, dtype=DEFAULT_DTYPE):
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        rng = make_rng(rng)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = kaiming_uniform(
            (out_channels, in_channels, kernel_size, kernel_size), fan_in, rng, dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes by batch statistics (biased variance) and folds
    an unbiased estimate into the running stats; eval mode normalizes by
    the running stats and requires them to be initialized.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, init_running=True,
                 dtype=DEFAULT_DTYPE, mode="train"):
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.mode = mode
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        if init_running:
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)
        else:
            self.running_mean = None
            self.running_var = None

    def forward(self, x: Tensor, mode=None) -> Tensor:
        mode = self.mode if mode is None else mode
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batch norm over {self.channels} channels got input {x.shape}")
        cview = (1, self.channels, 1, 1)
        if mode == "train":
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            xhat = centered * ((var + self.eps) ** -0.5)
            self._update_running(x, mean.data, var.data)
        else:
            if self.running_mean is None or self.running_var is None:
                raise StateError("eval-mode batch norm with uninitialized running stats")
            rm = self.running_mean.reshape(cview)
            rv = self.running_var.reshape(cview)
            xhat = (x - Tensor(rm)) * Tensor((rv + self.eps) ** -0.5)
        return xhat * self.gamma.reshape(cview) + self.beta.reshape(cview)

    __call__ = forward

    def _update_running(self, x, batch_mean, batch_var):
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=x.dtype)
            self.running_var = np.ones(self.channels, dtype=x.dtype)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * batch_mean.reshape(-1)).astype(x.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased.reshape(-1)).astype(x.dtype)
        if np.any(self.running_var < 0):
            raise StateError("running variance went negative")

    def named_parameters(self, prefix=""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def load_buffer(self, name, value):
        if name == "running_mean":
            self.running_mean = value
        elif name == "running_var":
            self.running_var = value
        else:
            raise KeyError(name)
