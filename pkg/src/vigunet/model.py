"""Full segmentation network: 4-stage graph-conv encoder, 2-block
bottleneck, mirrored 4-stage decoder with additive skips, 1-channel head.

Also owns the checkpoint file format. Checkpoints are self-describing: a
magic/version header, a key=value echo of the model configuration (plus any
caller extras such as normalization statistics), then every parameter and
running statistic as a named float32 tensor.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .blocks import Downsample, Ffn, Grapher, Stem, Upsample
from .layers import Conv2d
from .tensor import (DEFAULT_DTYPE, ShapeError, Tensor, bilinear_upsample,
                     make_rng, read_array, write_array)

CHECKPOINT_MAGIC = b"VGUN"
CHECKPOINT_VERSION = 1

NUM_STAGES = 4


class CheckpointError(Exception):
    """Base for all checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class StageConfig:
    """Settings for one resolution level's Grapher (+FFN) blocks."""

    dim: int
    k: int = 9
    heads: int = 4
    ffn_ratio: int = 4
    reduction: int = 1
    droppath_rate: float = 0.0
    ffn_convs: int = 2  # fixed depth of the feed-forward block

    def validate(self):
        if self.ffn_convs != 2:
            raise ValueError("ffn block depth is fixed at 2 convs")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.heads < 1 or (2 * self.dim) % self.heads:
            raise ValueError(f"heads {self.heads} must divide 2*dim {2 * self.dim}")
        if self.reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {self.reduction}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ValueError(f"droppath rate {self.droppath_rate} outside [0, 1)")


# (name, parser, formatter) for the flat checkpoint echo
def _fmt_ints(v):
    return ",".join(str(x) for x in v)


def _parse_ints(s):
    return tuple(int(x) for x in s.split(","))


_CONFIG_FIELDS = [
    ("in_channels", int, str),
    ("num_classes", int, str),
    ("image_h", int, str),
    ("image_w", int, str),
    ("dims", _parse_ints, _fmt_ints),
    ("k", int, str),
    ("heads", int, str),
    ("ffn_ratio", int, str),
    ("reductions", _parse_ints, _fmt_ints),
    ("droppath_rate", float, repr),
    ("bottleneck_graphers", int, str),
    ("skip_before_blocks", lambda s: bool(int(s)), lambda v: str(int(v))),
]


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``dims`` lists the channel width at each of the five resolution levels
    (H/2 down to H/32); ``reductions`` gives the KNN candidate-pooling ratio
    at the same five levels (1 = exact KNN over all nodes).
    """

    in_channels: int = 3
    num_classes: int = 1
    image_h: int = 512
    image_w: int = 512
    dims: tuple = (32, 64, 128, 256, 512)
    k: int = 9
    heads: int = 4
    ffn_ratio: int = 4
    reductions: tuple = (1, 1, 1, 1, 1)
    droppath_rate: float = 0.0
    bottleneck_graphers: int = 2
    skip_before_blocks: bool = False  # join skips before the decoder blocks instead

    def validate(self):
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be positive")
        if self.image_h % 32 or self.image_w % 32:
            raise ValueError(
                f"input size {self.image_h}x{self.image_w} must be divisible by 32")
        if len(self.dims) != NUM_STAGES + 1:
            raise ValueError(f"expected {NUM_STAGES + 1} stage dims, got {self.dims}")
        for a, b in zip(self.dims, self.dims[1:]):
            if b != 2 * a:
                raise ValueError(f"stage dims must double at each level, got {self.dims}")
        if len(self.reductions) != NUM_STAGES + 1:
            raise ValueError(f"expected {NUM_STAGES + 1} reductions, got {self.reductions}")
        if self.bottleneck_graphers < 1:
            raise ValueError("need at least one bottleneck block")
        for lvl in range(NUM_STAGES + 1):
            self.stage(lvl).validate()
            r = self.reductions[lvl]
            gh, gw = self.grid_at(lvl)
            if gh % r or gw % r:
                raise ValueError(
                    f"reduction {r} does not divide the level-{lvl} grid {gh}x{gw}")

    def grid_at(self, level):
        """Node-grid size at resolution level 0..4 (H/2 .. H/32)."""
        return self.image_h >> (level + 1), self.image_w >> (level + 1)

    def stage(self, level) -> StageConfig:
        return StageConfig(dim=self.dims[level], k=self.k, heads=self.heads,
                           ffn_ratio=self.ffn_ratio, reduction=self.reductions[level],
                           droppath_rate=self.droppath_rate)

    def to_dict(self) -> dict:
        out = {}
        for name, _, fmt in _CONFIG_FIELDS:
            out[name] = fmt(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for name, parse, _ in _CONFIG_FIELDS:
            if name not in d:
                raise KeyError(f"missing model config key {name!r}")
            kwargs[name] = parse(d[name])
        return cls(**kwargs)


class VigUnet:
    """The assembled network. Construction draws all weights from ``rng``;
    forward threads mode and rng to every block."""

    def __init__(self, config: ModelConfig, rng=None, dtype=DEFAULT_DTYPE):
        config.validate()
        rng = make_rng(rng)
        self.config = config
        d = config.dims
        hw = (config.image_h, config.image_w)

        def grapher(level):
            sc = config.stage(level)
            return Grapher(sc.dim, k=sc.k, heads=sc.heads,
                           droppath_rate=sc.droppath_rate, reduction=sc.reduction,
                           rng=rng, dtype=dtype)

        def ffn(level):
            sc = config.stage(level)
            return Ffn(sc.dim, hidden_ratio=sc.ffn_ratio,
                       droppath_rate=sc.droppath_rate, rng=rng, dtype=dtype)

        self.stem = Stem(config.in_channels, d[0], hw, rng=rng, dtype=dtype)
        self.enc_graphers = [grapher(i) for i in range(NUM_STAGES)]
        self.enc_ffns = [ffn(i) for i in range(NUM_STAGES)]
        self.downs = [Downsample(d[i], d[i + 1], rng=rng, dtype=dtype)
                      for i in range(NUM_STAGES)]
        self.bottleneck = [grapher(NUM_STAGES)
                           for _ in range(config.bottleneck_graphers)]
        # decoder runs deepest level first: up to level 3, 2, 1, 0
        self.ups = [Upsample(d[lvl + 1], d[lvl], rng=rng, dtype=dtype)
                    for lvl in reversed(range(NUM_STAGES))]
        self.dec_graphers = [grapher(lvl) for lvl in reversed(range(NUM_STAGES))]
        self.dec_ffns = [ffn(lvl) for lvl in reversed(range(NUM_STAGES))]
        self.final_conv = Conv2d(d[0], config.num_classes, kernel_size=1,
                                 rng=rng, dtype=dtype)

    def forward(self, x: Tensor, mode="train", rng=None, trace=None) -> Tensor:
        """[B, 3, H, W] image -> [B, 1, H, W] logit map.

        ``trace``, if a list, collects (name, shape) for every block output;
        skip additions appear as their own entries.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected [B, {cfg.in_channels}, H, W] input, got {x.shape}")
        if x.shape[2] != cfg.image_h or x.shape[3] != cfg.image_w:
            raise ShapeError(
                f"model built for {cfg.image_h}x{cfg.image_w} inputs, got "
                f"{x.shape[2]}x{x.shape[3]}")

        def log(name, t):
            if trace is not None:
                trace.append((name, tuple(t.shape)))
            return t

        y = log("stem", self.stem(x, mode))
        skips = []
        for i in range(NUM_STAGES):
            y = log(f"enc.{i}.grapher", self.enc_graphers[i](y, mode, rng))
            y = log(f"enc.{i}.ffn", self.enc_ffns[i](y, mode, rng))
            skips.append(y)
            y = log(f"enc.{i}.down", self.downs[i](y, mode))
        for j, g in enumerate(self.bottleneck):
            y = log(f"bottleneck.{j}", g(y, mode, rng))
        for i in range(NUM_STAGES):
            y = log(f"dec.{i}.up", self.ups[i](y, mode))
            s = skips[NUM_STAGES - 1 - i]
            if s.shape != y.shape:
                raise ShapeError(
                    f"skip shape {s.shape} does not match decoder shape {y.shape}")
            if cfg.skip_before_blocks:
                y = log(f"dec.{i}.skip", y + s)
            y = log(f"dec.{i}.grapher", self.dec_graphers[i](y, mode, rng))
            y = log(f"dec.{i}.ffn", self.dec_ffns[i](y, mode, rng))
            if not cfg.skip_before_blocks:
                y = log(f"dec.{i}.skip", y + s)
        y = log("final.upsample", bilinear_upsample(y, 2))
        return log("final.conv", self.final_conv(y))

    __call__ = forward

    def _module_items(self):
        yield "stem", self.stem
        for i in range(NUM_STAGES):
            yield f"enc.{i}.grapher", self.enc_graphers[i]
            yield f"enc.{i}.ffn", self.enc_ffns[i]
            yield f"enc.{i}.down", self.downs[i]
        for j, g in enumerate(self.bottleneck):
            yield f"bottleneck.{j}", g
        for i in range(NUM_STAGES):
            yield f"dec.{i}.up", self.ups[i]
            yield f"dec.{i}.grapher", self.dec_graphers[i]
            yield f"dec.{i}.ffn", self.dec_ffns[i]
        yield "final", self.final_conv

    def named_parameters(self):
        for name, mod in self._module_items():
            yield from mod.named_parameters(name + ".")

    def named_buffers(self):
        for name, mod in self._module_items():
            if hasattr(mod, "named_buffers"):
                yield from mod.named_buffers(name + ".")

    def load_buffer(self, name, value):
        mod_name, _, local = name.rpartition(".")
        for prefix, mod in self._module_items():
            hit = mod_name == prefix or mod_name.startswith(prefix + ".")
            if hit and hasattr(mod, "named_buffers"):
                inner = mod_name[len(prefix):].lstrip(".")
                target = mod
                for attr in inner.split(".") if inner else []:
                    target = getattr(target, attr)
                target.load_buffer(local, value)
                return
        raise KeyError(name)

    def count_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def build_vig_unet(config: ModelConfig, rng=None, dtype=DEFAULT_DTYPE) -> VigUnet:
    return VigUnet(config, rng=rng, dtype=dtype)


def count_parameters(model: VigUnet) -> int:
    """Total learnable elements (running statistics excluded)."""
    return model.count_parameters()


def parameter_table(model: VigUnet):
    """Per-module (name, tensor count, parameter count) rows for reporting."""
    rows = []
    for name, mod in model._module_items():
        params = list(mod.named_parameters(""))
        rows.append((name, len(params), sum(p.data.size for _, p in params)))
    return rows


def _write_str(fp, s: str):
    raw = s.encode("utf-8")
    fp.write(struct.pack("<I", len(raw)))
    fp.write(raw)


def _read_exact(fp, n: int) -> bytes:
    raw = fp.read(n)
    if len(raw) != n:
        raise CheckpointTruncatedError(
            f"unexpected end of file (wanted {n} bytes, got {len(raw)})")
    return raw


def _read_str(fp) -> str:
    (n,) = struct.unpack("<I", _read_exact(fp, 4))
    return _read_exact(fp, n).decode("utf-8")


def save_checkpoint(model: VigUnet, path, extra: dict | None = None):
    """Write the model (parameters + running stats) with a config echo.

    ``extra`` adds caller key=value strings to the echo block, e.g. the
    normalization statistics a training run baked in.
    """
    echo = model.config.to_dict()
    for key, val in (extra or {}).items():
        if key in echo:
            raise ValueError(f"extra key {key!r} collides with a config field")
        echo[str(key)] = str(val)
    entries = list(model.named_parameters()) + [
        (name, buf) for name, buf in model.named_buffers()]
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(fp, "".join(f"{k}={v}\n" for k, v in echo.items()))
        fp.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            arr = tensor.data if isinstance(tensor, Tensor) else tensor
            _write_str(fp, name)
            write_array(fp, arr)


def _parse_echo(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config echo line: {line!r}")
        out[key] = val
    return out


def load_checkpoint(path, config: ModelConfig | None = None, rng=None):
    """Read a checkpoint; returns (model, extras).

    The model is rebuilt from the embedded config echo unless ``config`` is
    given, in which case every stored tensor must match that architecture.
    ``extras`` carries the non-architecture echo entries.
    """
    with open(path, "rb") as fp:
        magic = _read_exact(fp, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fp, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})")
        echo = _parse_echo(_read_str(fp))
        (count,) = struct.unpack("<I", _read_exact(fp, 4))
        stored = {}
        order = []
        for _ in range(count):
            name = _read_str(fp)
            try:
                stored[name] = read_array(fp)
            except EOFError as exc:
                raise CheckpointTruncatedError(str(exc)) from None
            order.append(name)

    known = {name for name, _, _ in _CONFIG_FIELDS}
    cfg_dict = {k: v for k, v in echo.items() if k in known}
    extras = {k: v for k, v in echo.items() if k not in known}
    try:
        file_cfg = ModelConfig.from_dict(cfg_dict)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad config echo: {exc}") from None
    model = VigUnet(config if config is not None else file_cfg, rng=rng)

    expected = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name in expected:
        if name not in stored:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name!r}")
    for name in order:
        if name in expected:
            target = expected[name]
            if stored[name].shape != target.data.shape:
                raise CheckpointShapeError(
                    f"tensor {name!r} has shape {stored[name].shape}, model "
                    f"expects {target.data.shape}")
            target.data = stored[name].astype(target.data.dtype)
        elif name in buffers:
            ref = buffers[name]
            if ref is not None and stored[name].shape != ref.shape:
                raise CheckpointShapeError(
                    f"buffer {name!r} has shape {stored[name].shape}, model "
                    f"expects {ref.shape}")
            model.load_buffer(name, stored[name])
        else:
            raise CheckpointShapeError(f"checkpoint tensor {name!r} not in model")
    return model, extras
