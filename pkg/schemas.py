"""Validated configuration documents shared by the agent and harness layers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import yaml
from pydantic import BaseModel, ValidationError

try:  # Pydantic v2
    from pydantic import ConfigDict
except ImportError:  # Pydantic v1
    ConfigDict = None

from errors import ConfigError


class ConfigModel(BaseModel):
    """Pydantic v1/v2-compatible base; unknown keys are rejected."""

    if ConfigDict is not None:
        model_config = ConfigDict(populate_by_name=True, extra="forbid")
    else:

        class Config:
            allow_population_by_field_name = True
            extra = "forbid"

    @classmethod
    def parse_document(cls, data: Mapping[str, Any], *, source: str = "config"):
        """Build from a mapping, translating validation failures into ConfigError."""

        try:
            return cls(**dict(data))
        except ValidationError as exc:
            raise ConfigError(f"Invalid {source}: {_summarize_validation(exc)}") from exc


def _summarize_validation(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(item) for item in error.get("loc", ()))
        parts.append(f"{location or '<root>'}: {error.get('msg', 'invalid')}")
    return "; ".join(parts)


def to_model_dict(model: BaseModel) -> dict[str, Any]:
    """Compat helper for pydantic v1/v2 model serialization."""

    if hasattr(model, "model_dump"):
        return model.model_dump()
    return model.dict()


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_digest(data: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:16]


def load_yaml_document(path: str | Path) -> dict[str, Any]:
    source = Path(path)
    if not source.is_file():
        raise ConfigError(f"Config file not found: {source}")
    try:
        data = yaml.safe_load(source.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"Config file {source} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {source} must contain a mapping at the top level.")
    return data
