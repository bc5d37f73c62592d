"""Flat ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .pipeline import ModelConfig, TrainConfig

RECONCILERS = ("cnf", "naive-bu", "mint-ols", "mint-shr", "hier-e2e-proj")
PATH_KEYS = ("hierarchy", "panel", "checkpoint", "output_dir", "log")


@dataclass
class RunConfig:
    hierarchy: str | None = None
    panel: str | None = None
    checkpoint: str | None = None
    output_dir: str | None = None
    log: str | None = None
    reconciler: str = "cnf"
    season_period: int = 12
    horizon: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def keys(cls) -> dict[str, type]:
        out: dict[str, type] = {}
        for f in dataclasses.fields(cls):
            if f.name in ("model", "train"):
                continue
            out[f.name] = f.type
        for sub in (ModelConfig, TrainConfig):
            for f in dataclasses.fields(sub):
                out[f.name] = f.type
        return out

    @classmethod
    def from_mapping(cls, values: dict[str, object]) -> "RunConfig":
        known = cls.keys()
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        typed = {k: _coerce(k, known[k], v) for k, v in values.items()}
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        top = {k: v for k, v in typed.items() if k not in model_keys | train_keys}
        cfg = cls(
            model=ModelConfig(**{k: v for k, v in typed.items() if k in model_keys}),
            train=TrainConfig(**{k: v for k, v in typed.items() if k in train_keys}),
            **top,
        )
        if cfg.reconciler not in RECONCILERS:
            raise ConfigError(f"reconciler must be one of {RECONCILERS}, got {cfg.reconciler!r}")
        cfg.model.attention()  # validates head divisibility early
        return cfg

    def require(self, *keys: str, must_exist: tuple[str, ...] = ()) -> None:
        for k in keys:
            if getattr(self, k) in (None, ""):
                raise ConfigError(f"missing required setting {k!r}")
        for k in must_exist:
            p = getattr(self, k)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{k} path does not exist: {p}")


def _coerce(key: str, typ, raw):
    if raw is None:
        return None
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    text = str(raw).strip()
    try:
        if name.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if name.startswith("int"):
            return int(text)
        if name.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {name})") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Read ``path`` (if any) and apply ``overrides``; flags win over the file."""
    values: dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return RunConfig.from_mapping(values)
