"""Flat key=value run configuration for the command line tools.

Every key has a default, so an empty file (or no file) is a valid desk-scale
run. Unknown keys are rejected with their line number; '#' starts a comment.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .model import ModelConfig


class ConfigError(Exception):
    pass


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    return tuple(int(x) for x in s.split(","))


@dataclass
class RunConfig:
    """Everything a training or inference run needs, with desk defaults:
    64x64 inputs, channel widths 8..128, batch 4."""

    data_dir: str = "data"
    out_dir: str = "runs"
    image_size: int = 64
    dims: tuple = (8, 16, 32, 64, 128)
    k: int = 9
    heads: int = 4
    ffn_ratio: int = 4
    reductions: tuple = (1, 1, 1, 1, 1)
    droppath: float = 0.0
    skip_before_blocks: bool = False
    epochs: int = 100
    batch_size: int = 4
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    seed: int = 41
    val_ratio: float = 0.2
    split_seed: int = 41
    augment: bool = True

    def model_config(self) -> ModelConfig:
        return ModelConfig(in_channels=3, num_classes=1,
                           image_h=self.image_size, image_w=self.image_size,
                           dims=tuple(self.dims), k=self.k, heads=self.heads,
                           ffn_ratio=self.ffn_ratio,
                           reductions=tuple(self.reductions),
                           droppath_rate=self.droppath,
                           skip_before_blocks=self.skip_before_blocks)


_PARSERS = {
    str: lambda s: s,
    int: int,
    float: float,
    tuple: _parse_ints,
    bool: _parse_bool,
}


def parse_config(text: str, source="<config>") -> RunConfig:
    """Parse key=value lines into a RunConfig; all errors carry line numbers."""
    defaults = RunConfig()
    types = {f.name: type(getattr(defaults, f.name)) for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[types[key]](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return RunConfig(**values)


def load_config(path=None) -> RunConfig:
    """Read a config file; a missing argument means all defaults."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fp:
        return parse_config(fp.read(), source=str(path))


def describe_keys() -> str:
    """One line per key with its default, for --help output."""
    defaults = RunConfig()
    lines = []
    for f in fields(RunConfig):
        val = getattr(defaults, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"  {f.name} (default {val})")
    return "\n".join(lines)
