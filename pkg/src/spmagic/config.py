"""Run configuration shared by the CLI and the benchmark harness."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import TrainingConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"invalid config value for '{key}': {message}")


@dataclass
class RunConfig:
    hvg_count: int = 3000
    pca_dims: int = 100
    knn_k: int = 5
    knn_max: int = 15
    alpha: float = 1.0
    diffusion_t: int = 3
    embed_dim: int = 32
    heads: int = 2
    mask_rate: float = 0.2
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 50
    dropout_rate: float = 0.1
    decoder_hidden: int = 512
    seed: int = 0
    deterministic: bool = False
    freeze_attention: bool = False

    def validate(self) -> "RunConfig":
        checks = [
            ("hvg_count", self.hvg_count >= 1, "must be >= 1"),
            ("pca_dims", self.pca_dims >= 1, "must be >= 1"),
            ("knn_k", self.knn_k >= 1, "must be >= 1"),
            ("knn_max", self.knn_max >= self.knn_k, "must be >= knn_k"),
            ("alpha", self.alpha > 0, "must be > 0"),
            ("diffusion_t", self.diffusion_t >= 0, "must be >= 0"),
            ("embed_dim", self.embed_dim >= 1, "must be >= 1"),
            ("heads", self.heads >= 1 and self.embed_dim % self.heads == 0, "must divide embed_dim"),
            ("mask_rate", 0 < self.mask_rate < 1, "must be in (0, 1)"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("learning_rate", self.learning_rate > 0, "must be > 0"),
            ("epochs", self.epochs >= 0, "must be >= 0"),
            ("dropout_rate", 0 <= self.dropout_rate < 1, "must be in [0, 1)"),
            ("decoder_hidden", self.decoder_hidden >= 1, "must be >= 1"),
            ("seed", 0 <= self.seed < 2**64, "must be a 64-bit unsigned integer"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(key, f"{getattr(self, key)!r} {message}")
        return self

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            mask_rate=self.mask_rate,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.seed,
            joint_attention_training=not self.freeze_attention,
            dropout_rate=self.dropout_rate,
            decoder_hidden=self.decoder_hidden,
            embed_dim=self.embed_dim,
            heads=self.heads,
        )

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, value: str):
    """Convert a text value to the type of ``RunConfig.key``."""
    types = RunConfig.field_types()
    if key not in types:
        raise ConfigError(key, "unknown key")
    kind = types[key]
    text = str(value).strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys are allowed."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = coerce(key, value)
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < config file < command-line overrides, then validate."""
    merged = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**merged).validate()
