"""Pipeline configuration: file, environment and CLI layers plus a stable hash.

Precedence is CLI > environment (``M3_<KEY>``) > config file > defaults.
The config file (conventionally ``m3pipe.conf``) is a JSON object; unknown
keys are rejected with a nearest-name suggestion.
"""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from m3pipe.errors import ValidationError
from m3pipe.records import DEFAULT_SHARD_SIZE, LANGUAGES, TARGET_LANGUAGES
from m3pipe.translate import DEFAULT_PATTERNS

ENV_PREFIX = "M3_"
CONFIG_FILENAME = "m3pipe.conf"


@dataclass(frozen=True)
class PipelineConfig:
    translate_url: str | None = None
    embed_url: str | None = None
    generate_url: str | None = None
    languages: tuple[str, ...] = TARGET_LANGUAGES
    shard_size: int = DEFAULT_SHARD_SIZE
    parallelism: int = 4
    seed: int = 0
    checkpoint_dir: str = ".m3pipe/checkpoints"
    placeholder_patterns: tuple[str, ...] = DEFAULT_PATTERNS
    filter_threshold: float = 0.0
    flag_threshold: float = 2.0
    retries: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    batch_size: int = 64
    max_tokens: int = 64

    def __post_init__(self) -> None:
        langs = tuple(self.languages)
        for lang in langs:
            if lang not in LANGUAGES:
                raise ValidationError(f"languages: invalid language tag {lang!r}")
        if len(set(langs)) != len(langs):
            raise ValidationError("languages: duplicate entries")
        # the language set is a set: canonical order keeps the hash stable
        object.__setattr__(self, "languages", tuple(lang for lang in LANGUAGES if lang in langs))
        object.__setattr__(self, "placeholder_patterns", tuple(self.placeholder_patterns))
        checks = {
            "shard_size": self.shard_size >= 1,
            "parallelism": 1 <= self.parallelism <= 256,
            "seed": 0 <= self.seed < 2**64,
            "filter_threshold": -1.0 <= self.filter_threshold <= 1.0,
            "flag_threshold": self.flag_threshold >= 0.0,
            "retries": 1 <= self.retries <= 20,
            "backoff_base": self.backoff_base >= 0.0,
            "backoff_factor": self.backoff_factor >= 1.0,
            "batch_size": 1 <= self.batch_size <= 64,
            "max_tokens": self.max_tokens >= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ValidationError(f"{key}: value {getattr(self, key)!r} is out of range")

    def canonical(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def http_kwargs(self) -> dict[str, Any]:
        return {
            "retries": self.retries,
            "backoff_base": self.backoff_base,
            "backoff_factor": self.backoff_factor,
            "batch_size": self.batch_size,
        }


FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _unknown(key: str, source: str) -> ValidationError:
    close = difflib.get_close_matches(key, FIELDS, n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ValidationError(f"unknown config key {key!r} in {source}{hint}")


def _coerce(key: str, value: Any) -> Any:
    """Convert file/env/CLI values to the field's type, naming the key on failure."""
    default = FIELDS[key].default
    try:
        if isinstance(default, tuple):
            if isinstance(value, str):
                return tuple(v.strip() for v in value.split(",") if v.strip())
            if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
                raise TypeError("expected a list of strings")
            return tuple(value)
        if isinstance(default, bool):
            raise TypeError("no boolean fields")
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError("expected an integer")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError("expected a number")
            return float(value)
        # optional strings / paths
        if value is None or value == "":
            return None if default is None else default
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{key}: invalid value {value!r} ({exc})") from None


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    cli_overrides: Mapping[str, Any] | None = None,
) -> PipelineConfig:
    """Merge defaults, file, environment and CLI values into a validated config.

    ``env`` defaults to ``os.environ``; only ``M3_*`` names matching a config
    key are read (other ``M3_`` variables such as ``M3_API_TOKEN`` are
    ignored). CLI overrides with value ``None`` mean "not given".
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        text = path.read_text(encoding="utf-8") if path.exists() else ""
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ValidationError(f"{path}: expected a JSON object")
            for key, value in data.items():
                if key not in FIELDS:
                    raise _unknown(key, str(path))
                values[key] = _coerce(key, value)
    env = os.environ if env is None else env
    for key in FIELDS:
        name = ENV_PREFIX + key.upper()
        if name in env:
            values[key] = _coerce(key, env[name])
    for key, value in (cli_overrides or {}).items():
        if value is None:
            continue
        if key not in FIELDS:
            raise _unknown(key, "command-line overrides")
        values[key] = _coerce(key, value)
    return PipelineConfig(**values)
