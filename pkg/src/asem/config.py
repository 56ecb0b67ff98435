"""Model, training and run configuration."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    vocab_size: int = Field(gt=4)
    embed_dim: int = Field(300, gt=0)
    d_model: int = Field(300, gt=0)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    ffn_dim: int = Field(512, gt=0)
    n_sentiments: int = Field(2, ge=2)
    n_emotions: int = Field(10, ge=2)
    turn_weight: float = Field(2.5, gt=0)
    max_len: int = Field(128, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    use_weighted_concat: bool = True
    use_sae: bool = True
    use_sentiment_loss: bool = True
    single_enc_dec: bool = False
    current_turn_first: bool = True

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def effective_turn_weight(self) -> float:
        return self.turn_weight if self.use_weighted_concat else 1.0

    @classmethod
    def full_scale(cls, vocab_size: int, **kw) -> "ModelConfig":
        """The 12-layer, 10-head configuration (constructible, not exercised in tests)."""
        base = dict(vocab_size=vocab_size, embed_dim=300, d_model=300, n_layers=12, n_heads=10,
                    ffn_dim=1200)
        base.update(kw)
        return cls(**base)


class TrainConfig(_Strict):
    learning_rate: float = Field(1e-4, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int = Field(500, ge=0)
    batch_size: int = Field(16, ge=1)
    early_stop_patience: int = Field(3, ge=1)
    eval_every: int = Field(50, ge=1)
    seed: int = 0
    loss_schedule: Literal["joint", "sentiment_then_emotion"] = "joint"
    sentiment_warmup_epochs: int = Field(1, ge=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)


class DecodeConfig(_Strict):
    width: int = Field(5, ge=1)
    length_penalty: float = 0.6
    max_new_tokens: int = Field(30, ge=0)


class PathsConfig(_Strict):
    corpus: Optional[Path] = None
    train: Optional[Path] = None
    valid: Optional[Path] = None
    test: Optional[Path] = None
    embeddings: Optional[Path] = None
    out_dir: Path = Path("runs/default")

    @model_validator(mode="before")
    @classmethod
    def _none_strings(cls, data):
        if isinstance(data, dict):
            return {k: (None if isinstance(v, str) and v.lower() in ("none", "null", "") else v)
                    for k, v in data.items()}
        return data

    @model_validator(mode="after")
    def _has_data(self):
        if self.corpus is None and (self.train is None or self.valid is None):
            raise ValueError("paths: give either `corpus` or both `train` and `valid`")
        return self


class ModelOverrides(_Strict):
    """Model fields settable from a run config; vocab and label counts come from the data."""

    embed_dim: int = 300
    d_model: int = 300
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 512
    turn_weight: float = 2.5
    max_len: int = 128
    dropout: float = 0.1
    use_weighted_concat: bool = True
    use_sae: bool = True
    use_sentiment_loss: bool = True
    single_enc_dec: bool = False
    current_turn_first: bool = True


class RunConfig(_Strict):
    dataset_tag: Literal["ED", "DD"] = "ED"
    emotions: Optional[list[str]] = None
    min_freq: int = Field(1, ge=1)
    paths: PathsConfig
    model: ModelOverrides = ModelOverrides()
    train: TrainConfig = TrainConfig()
    decoding: DecodeConfig = DecodeConfig()

    def resolve(self, base: Path) -> "RunConfig":
        """Make relative paths relative to the config file's directory."""
        fixed = {}
        for name, value in self.paths:
            if isinstance(value, Path) and not value.is_absolute():
                value = base / value
            fixed[name] = value
        return self.model_copy(update={"paths": PathsConfig(**fixed)})

    def check_paths(self) -> None:
        for name in ("corpus", "train", "valid", "test", "embeddings"):
            p = getattr(self.paths, name)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"paths.{name}: {p} does not exist")


def load_run_config(path: str | Path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    data = yaml.safe_load(path.read_text()) or {}
    cfg = RunConfig.model_validate(data).resolve(path.parent)
    if seed is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed})})
    cfg.check_paths()
    return cfg
