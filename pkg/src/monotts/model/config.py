"""Model hyper-parameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..attention import MECHANISMS
from ..errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    embed_dim: int = 32
    encoder_dim: int = 32
    attention_rnn_dim: int = 64
    decoder_rnn_dim: int = 64
    postnet_dim: int = 256
    mel_dim: int = 16
    reduction_factor: int = 2
    delay_frames: int = 5
    stop_lambda: float = 0.001
    mechanism: str = "gaussian"
    K: int = 5
    max_decode_steps: int = 200
    gmm_delta_init: float = 1.0
    gmm_sigma_init: float = 10.0
    mu0: float = 0.0
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        dims = ("vocab_size", "embed_dim", "encoder_dim", "attention_rnn_dim", "decoder_rnn_dim",
                "postnet_dim", "mel_dim", "K", "max_decode_steps")
        for name in dims:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.encoder_dim % 2:
            raise ConfigError(f"encoder_dim must be even (two directions), got {self.encoder_dim}")
        if self.reduction_factor < 1:
            raise ConfigError(f"reduction_factor must be >= 1, got {self.reduction_factor}")
        if self.delay_frames < 0:
            raise ConfigError(f"delay_frames must be >= 0, got {self.delay_frames}")
        if self.stop_lambda < 0:
            raise ConfigError(f"stop_lambda must be >= 0, got {self.stop_lambda}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.gmm_delta_init <= 0 or self.gmm_sigma_init <= 0:
            raise ConfigError("GMM initial step and width must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return self.from_dict({**self.to_dict(), **changes})
