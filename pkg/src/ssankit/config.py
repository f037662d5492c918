"""Validated configuration records for the model, the losses and training."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised when a configuration is inconsistent. Always raised before any compute."""


@dataclass
class ModelConfig:
    encoder: str = "resnet50"
    image_size: tuple[int, int] = (384, 128)
    channels: int = 2048
    stride: int = 32
    parts: int = 6
    embed_dim: int = 512
    hidden_size: int | None = None
    global_dim: int = 1024
    relation_dim: int = 512
    part_out_dim: int = 512
    vocab_size: int = 2
    max_len: int = 64
    use_pfl: bool = True
    use_prl: bool = True
    pretrained: str | None = None
    seed: int = 0

    @classmethod
    def tiny(cls, **overrides: Any) -> "ModelConfig":
        base = dict(
            encoder="tiny-cnn", image_size=(96, 32), channels=32, stride=16, parts=3,
            embed_dim=32, global_dim=32, relation_dim=32, part_out_dim=16, max_len=32,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def text_hidden(self) -> int:
        return self.channels if self.hidden_size is None else self.hidden_size

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.image_size[0] // self.stride, self.image_size[1] // self.stride

    def validate(self) -> "ModelConfig":
        if self.encoder not in ("resnet50", "tiny-cnn"):
            raise ConfigError(f"unknown encoder variant {self.encoder!r}")
        if self.encoder == "resnet50" and (self.channels, self.stride) != (2048, 32):
            raise ConfigError("resnet50 encoder has channels=2048 and stride=32")
        if self.channels <= 0:
            raise ConfigError("channels must be positive")
        h0, w0 = self.image_size
        if h0 % self.stride or w0 % self.stride:
            raise ConfigError(f"stride {self.stride} must divide image size {h0}x{w0}")
        h, _ = self.feature_size
        if self.parts < 1 or h % self.parts:
            raise ConfigError(
                f"feature-map height {h} is not divisible by K={self.parts} parts"
            )
        if self.use_prl and not self.use_pfl:
            raise ConfigError("part relation learning needs part features (use_pfl)")
        if self.use_prl and self.parts < 2:
            raise ConfigError("relation learning requires K >= 2")
        if self.text_hidden != self.channels:
            # W_g and W_l^k are shared between modalities, so E and F must agree on C.
            raise ConfigError(
                f"text hidden size {self.text_hidden} must equal visual channels {self.channels}"
            )
        for name in ("embed_dim", "global_dim", "relation_dim", "part_out_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include the padding and unknown ids")
        return self


@dataclass
class LossConfig:
    margin: float = 0.2
    beta: float = 0.1
    stream_weights: tuple[float, float, float] = (1.0, 0.5, 0.5)
    num_classes: int = 1
    strict_lambda: bool = False
    id_reduction: str = "mean"

    def validate(self) -> "LossConfig":
        if not 0.0 < self.margin < 2.0:
            raise ConfigError("margin alpha_1 must lie in (0, 2)")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if len(self.stream_weights) != 3 or any(w < 0 for w in self.stream_weights):
            raise ConfigError("stream_weights must be three non-negative numbers")
        if self.id_reduction not in ("mean", "sum"):
            raise ConfigError("id_reduction must be 'mean' or 'sum'")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        return self


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 60
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (40,)
    lr_decay: float = 0.1
    images_per_identity: int = 2
    grad_clip: float | None = 5.0
    flip: bool = True
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    @classmethod
    def tiny(cls, **overrides: Any) -> "TrainConfig":
        """Desk-scale preset used by the synthetic benchmark (tiny-cnn model, batch 16).

        The learning rate is raised from the full-scale default of 1e-3 because the tiny
        model trains from scratch for only 30 epochs; it decays tenfold at epoch 20.
        """
        base: dict[str, Any] = dict(batch_size=16, epochs=30, lr=1e-2, lr_decay_epochs=(20,),
                                    model=ModelConfig.tiny())
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 4:
            raise ConfigError("batch_size must be at least 4 for hard-negative mining")
        if self.images_per_identity < 1 or self.batch_size % self.images_per_identity:
            raise ConfigError("images_per_identity must divide batch_size")
        if self.batch_size // self.images_per_identity < 2:
            raise ConfigError("a batch must hold at least two identities")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs and lr must be positive")
        self.model.validate()
        self.loss.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        model = _build(ModelConfig, data.pop("model", {}))
        loss = _build(LossConfig, data.pop("loss", {}))
        cfg = _build(cls, data)
        cfg.model, cfg.loss = model, loss
        return cfg


_TUPLE_FIELDS = {"image_size", "stream_weights", "lr_decay_epochs"}


def _build(cls, data: dict[str, Any]):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and v is not None else v for k, v in data.items()}
    return cls(**kwargs)


def load_config(path: str | Path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return TrainConfig.from_dict(data)
