"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import ModelConfig, Variant
from .trainer import TrainConfig

# applied before explicit keys when ``profile = desk``
DESK_PROFILE = {
    "embed_dim": 64,
    "hidden_dim": 64,
    "batch_size": 64,
    "max_epochs": 50,
    "formula_table_rows": 1024,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = ""
    out_dir: str = "runs"
    profile: str = "full"
    variant: str = "LABS"
    formula_mode: str = "embed"
    embed_dim: int = 300
    hidden_dim: int = 512
    max_len: int = 120
    alpha: float = 4.0
    learning_rate: float = 0.001
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0
    formula_table_rows: int = 1 << 16
    renormalize_pred: bool = True
    dtype: str = "float64"
    lexicon: str = ""

    def __post_init__(self):
        Variant(self.variant)
        if self.profile not in ("full", "desk"):
            raise ConfigError(f"profile must be 'full' or 'desk', got {self.profile!r}")
        if self.formula_mode not in ("embed", "text", "drop"):
            raise ConfigError(f"formula_mode must be embed, text or drop, got {self.formula_mode!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            max_len=self.max_len,
            alpha=self.alpha,
            formula_mode=self.formula_mode,
            formula_table_rows=self.formula_table_rows,
            renormalize_pred=self.renormalize_pred,
            dtype=self.dtype,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            clip_norm=self.clip_norm,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Short hash of everything that affects results; the output location is left out."""
        settings = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name: _TYPES[f.type] for f in fields(RunConfig)}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    merged: dict[str, object] = {}
    if values.get("profile") == "desk":
        merged.update(DESK_PROFILE)
    merged.update(values)
    if base_dir is not None:
        for key in ("data", "out_dir", "lexicon"):
            if merged.get(key) and not Path(str(merged[key])).is_absolute():
                merged[key] = str(base_dir / str(merged[key]))
    try:
        return RunConfig(**merged)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
