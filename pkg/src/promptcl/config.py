"""Run configuration for suite generation, pretraining and continual tuning."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

GUIDANCE_MODES = ("dual", "image_only", "text_only")


@dataclass
class RunConfig:
    # prompt machinery
    M: int = 10                      # prompt tokens per task
    k: int = 3                       # prompt sets kept by fusion/selection
    d_g: int = 32                    # guidance space width
    guidance_mode: str = "dual"
    fusion_enabled: bool = True      # train-time fusion of top-k prompt sets
    selection_enabled: bool = True   # inference-time top-k selection
    loss_weights: tuple[float, float] = (1.0, 1.0)   # (w_lmm, w_proto)

    # frozen backbone
    d_m: int = 64                    # model width
    n_layers: int = 2
    n_heads: int = 4
    n_image_tokens: int = 4          # image adapter output slots
    vocab_size: int = 256
    max_positions: int = 32          # content positions (image+instruction+answer)

    # data
    d_img: int = 24                  # raw image feature dimension
    T: int = 4
    n_train: int = 500
    n_eval: int = 200

    # optimization
    epochs_per_task: int = 8
    batch_size: int = 32
    learning_rate: float = 0.05      # SGD on current prompts + prototype head
    pretrain_samples: int = 6000
    pretrain_epochs: int = 40
    pretrain_batch_size: int = 32
    pretrain_lr: float = 1e-3
    pretrain_weight_decay: float = 0.01

    seed: int = 0
    encoder_seed: int = 1234         # frozen guidance encoders

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        w_lmm, w_proto = self.loss_weights
        if w_lmm <= 0:
            raise ConfigError(f"w_lmm must be > 0, got {w_lmm}")
        if w_proto < 0:
            raise ConfigError(f"w_proto must be >= 0, got {w_proto}")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ConfigError(
                f"guidance_mode must be one of {GUIDANCE_MODES}, got {self.guidance_mode!r}"
            )
        if self.d_m % self.n_heads != 0:
            raise ConfigError(f"d_m={self.d_m} not divisible by n_heads={self.n_heads}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        self.loss_weights = (float(w_lmm), float(w_proto))

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "loss_weights" in d:
            d = dict(d)
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def guidance_lambda(mode: str) -> float | None:
    """Map a guidance mode to the score-combination weight.

    None means the plain unweighted sum alpha + beta; 1.0 keeps only the
    image score and 0.0 only the text score.
    """
    if mode == "dual":
        return None
    if mode == "image_only":
        return 1.0
    if mode == "text_only":
        return 0.0
    raise ConfigError(f"unknown guidance mode {mode!r}")
