"""Run configuration: a flat ``key = value`` text file with ``#`` comments."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from typing import List, Tuple


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    preset: str = "tiny"
    attention_enabled: bool = True
    msff_enabled: bool = True
    rw_enabled: bool = True  # false -> channel concatenation + 1x1 conv
    per_block_attention: bool = False
    reduction: int = 4
    dilations: Tuple[int, int] = (2, 4)
    fused_width: int = 0  # 0 -> 64 (tiny) / 256 (full)
    head_width: int = 0  # 0 -> 256 (tiny) / 1024 (full)
    rpn_combine: str = "sum"
    anchor_scales: Tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    # optimisation
    lr: float = 0.005
    momentum: float = 0.9
    clip_norm: float = 10.0
    epochs: int = 15
    batch_size: int = 4
    seed: int = 0
    # data
    image_size: int = 96
    data: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @property
    def cf(self) -> int:
        return self.fused_width or (64 if self.preset == "tiny" else 256)

    @property
    def head_hidden(self) -> int:
        return self.head_width or (256 if self.preset == "tiny" else 1024)

    def validate(self) -> None:
        if self.preset not in ("tiny", "full"):
            raise ConfigError(f"preset must be tiny or full, got {self.preset!r}")
        if self.rpn_combine not in ("sum", "concat"):
            raise ConfigError(f"rpn_combine must be sum or concat, got {self.rpn_combine!r}")
        if len(self.dilations) != 2 or min(self.dilations) < 1:
            raise ConfigError("dilations needs two positive integers")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ConfigError("anchor scales and ratios must be non-empty")
        if min(self.anchor_scales) <= 0 or min(self.anchor_ratios) <= 0:
            raise ConfigError("anchor scales and ratios must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.clip_norm <= 0:
            raise ConfigError("lr > 0, 0 <= momentum < 1 and clip_norm > 0 required")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs >= 0 and batch_size >= 2 required (batch norm)")
        if self.image_size < 64 or self.image_size % 32:
            raise ConfigError("image_size must be >= 64 and divisible by 32")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, (list, tuple)):
                s = ",".join(_fmt(x) for x in v)
            else:
                s = _fmt(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), delimiters=("=",),
                                           interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in parser["run"].items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse(key, known[key], raw.strip())
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, f, raw: str):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            elem = type(default[0])
            return tuple(elem(x) for x in items)
        if isinstance(default, list):
            return [x.strip() for x in raw.split(",") if x.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def default_config(**overrides) -> RunConfig:
    return RunConfig(**overrides)

