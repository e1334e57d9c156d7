"""Plain-text run configuration.

One ``key = value`` per line, ``#`` starts a comment. Keys are dotted:
``train.*``, ``pdt.*``, ``data.*``, ``mmd.*``, ``backbone.*``, mirroring the
fields of the matching config dataclasses. Missing keys take their defaults,
unknown keys are an error. :meth:`RunConfig.to_text` writes every key with
its effective value and reads back to an equal config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import SynthSpec
from .errors import ConfigError
from .losses import MmdConfig
from .pdt import PdtConfig
from .trainer import TrainConfig

ECHO_NAME = "config.txt"


@dataclass(frozen=True)
class BackboneSpec:
    seed: int = 0
    embed_dim: int = 64


def _train_fields():
    return [f for f in dataclasses.fields(TrainConfig) if f.name != "mmd"]


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    pdt: PdtConfig = field(default_factory=PdtConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    mmd: MmdConfig = field(default_factory=MmdConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    @property
    def train_config(self) -> TrainConfig:
        """TrainConfig with the ``mmd.*`` section folded in."""
        return dataclasses.replace(self.train, mmd=self.mmd)

    def sections(self):
        return {
            "train": (self.train, _train_fields()),
            "pdt": (self.pdt, dataclasses.fields(PdtConfig)),
            "data": (self.data, dataclasses.fields(SynthSpec)),
            "mmd": (self.mmd, dataclasses.fields(MmdConfig)),
            "backbone": (self.backbone, dataclasses.fields(BackboneSpec)),
        }

    def validate(self) -> "RunConfig":
        self.train_config.validate()
        self.pdt.validate()
        self.data.validate()
        if self.backbone.embed_dim < 2:
            raise ConfigError(f"backbone.embed_dim must be >= 2, got {self.backbone.embed_dim}")
        return self

    def with_overrides(self, **values) -> "RunConfig":
        """``with_overrides(**{"train.supervision": "mmd_op"})``."""
        return parse_items(values.items(), base=self)

    def to_text(self) -> str:
        lines = []
        for prefix, (obj, fields) in self.sections().items():
            for f in fields:
                lines.append(f"{prefix}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / ECHO_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def _format(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _convert(key: str, raw: str, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def _field_kinds(section_obj, fields) -> dict[str, type]:
    # field annotations are strings under postponed evaluation; the default tells the type
    return {f.name: type(getattr(section_obj, f.name)) for f in fields}


def parse_items(items, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates: dict[str, dict] = {}
    sections = base.sections()
    for key, raw in items:
        prefix, dot, name = key.partition(".")
        if not dot or prefix not in sections:
            raise ConfigError(f"unknown config key {key!r}")
        obj, fields = sections[prefix]
        kinds = _field_kinds(obj, fields)
        if name not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(prefix, {})[name] = _convert(key, str(raw), kinds[name])
    parts = {p: dataclasses.replace(obj, **updates.get(p, {})) for p, (obj, _) in sections.items()}
    return RunConfig(**parts)


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    items, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        seen.add(key)
        items.append((key, value))
    return parse_items(items)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), str(path))
