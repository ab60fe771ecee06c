"""Flat key-value run configuration.

Files hold one `key = value` per line with `#` comments. Unknown keys are
rejected. The strategy/feature pairing is validated: sum needs bag
detections, att needs spatial features, obj needs detections plus the
category embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class RunConfig:
    # model dimensions
    d_model: int = 128
    d_ff: int = 256
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    delib_layers: int = 2
    max_len: int = 100
    dropout: float = 0.1
    # training hyperparameters
    lr_base: float = 0.05
    warmup: int = 8000
    patience: int = 10
    max_epochs: int = 200
    batch_size: int = 8
    min_freq: int = 1
    beam: int = 10
    draft_n: int = 10
    seed: int = 0
    # strategy selection
    system: str = "base"          # base | delib
    visual: str = "none"          # none | sum | att | obj
    # paths
    train_src: str = ""
    train_tgt: str = ""
    val_src: str = ""
    val_tgt: str = ""
    vocab_src: str = ""
    vocab_tgt: str = ""
    image_ids: str = ""           # one image id per line, parallel to bitext
    detections: str = ""
    object_vocab: str = ""
    object_embeddings: str = ""
    spatial_features: str = ""
    pos_lexicon: str = ""
    person_list: str = ""
    amb_list: str = ""
    # degradation
    degrade_rate: float = 0.15
    min_count: int = 10
    min_ratio: float = 0.2

    def validate(self) -> None:
        if self.system not in ("base", "delib"):
            raise ConfigError(
                f"system must be base|delib, got {self.system!r}", key="system"
            )
        if self.visual not in ("none", "sum", "att", "obj"):
            raise ConfigError(
                f"visual must be none|sum|att|obj, got {self.visual!r}",
                key="visual",
            )
        if self.visual != "none" and not self.image_ids:
            raise ConfigError(
                f"visual={self.visual} requires image_ids", key="image_ids"
            )
        if self.visual == "sum":
            if not self.detections or not self.object_vocab:
                raise ConfigError(
                    "visual=sum pairs with bag-of-objects features and needs "
                    "detections and object_vocab", key="detections",
                )
        elif self.visual == "att":
            if not self.spatial_features:
                raise ConfigError(
                    "visual=att pairs with spatial features and needs "
                    "spatial_features", key="spatial_features",
                )
        elif self.visual == "obj":
            if not self.detections or not self.object_vocab \
                    or not self.object_embeddings:
                raise ConfigError(
                    "visual=obj pairs with object embeddings and needs "
                    "detections, object_vocab and object_embeddings",
                    key="object_embeddings",
                )
        for name in ("d_model", "d_ff", "heads", "enc_layers", "dec_layers",
                     "delib_layers", "max_len", "warmup", "patience",
                     "max_epochs", "batch_size", "beam", "draft_n", "min_freq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", key=name)
        if self.draft_n > self.beam:
            raise ConfigError(
                f"draft_n {self.draft_n} cannot exceed beam {self.beam}",
                key="draft_n",
            )

    def model_config(self, src_vocab: int, tgt_vocab: int,
                     spatial_channels: int | None = None) -> ModelConfig:
        return ModelConfig(
            src_vocab=src_vocab, tgt_vocab=tgt_vocab,
            d_model=self.d_model, d_ff=self.d_ff, heads=self.heads,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers,
            delib_layers=self.delib_layers, dropout=self.dropout,
            max_len=self.max_len,
            spatial_channels=spatial_channels or 2048,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines()):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"line {lineno + 1} is not 'key = value': {raw!r}"
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                parsed = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value
        except ValueError as exc:
            raise ConfigError(
                f"bad value for {key!r}: {value!r}", key=key
            ) from exc
        setattr(cfg, key, parsed)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
