"""Routing helpers for env/agent id normalization and effective agent configuration."""

from __future__ import annotations

from typing import Any, Mapping

from agent_registry import (
    AGENT_ALIASES,
    AGENT_PRESETS,
    ENV_ALIASES,
    FIDELITY_REPLAY_CAPACITY,
    SUPPORTED_ENVS,
)
from agents import AgentConfig
from errors import ConfigError

FIDELITY_UPDATES_PER_EPISODE = 1


class ResolvedRun(dict):
    """Small dict-like container for a resolved (env, agent) pairing."""


def normalize_env_id(raw: str | None) -> str:
    """Normalize reference ids and common spellings to a canonical env id."""

    normalized = str(raw or "").strip().lower()
    normalized = ENV_ALIASES.get(normalized, normalized)
    if normalized in SUPPORTED_ENVS:
        return normalized
    raise ConfigError(f"Unsupported env '{raw}'. Supported: {', '.join(sorted(SUPPORTED_ENVS))}.")


def normalize_agent_kind(raw: str | None) -> str:
    normalized = str(raw or "").strip().lower()
    normalized = AGENT_ALIASES.get(normalized, normalized)
    if normalized in AGENT_PRESETS:
        return normalized
    raise ConfigError(f"Unsupported agent '{raw}'. Supported: {', '.join(sorted(AGENT_PRESETS))}.")


def resolve_agent_config(
    kind: str,
    overrides: Mapping[str, Any] | None = None,
    fidelity_mode: bool = False,
) -> AgentConfig:
    """Merge the preset for ``kind`` with overrides and validate the result.

    Fidelity mode wins over overrides for the update schedule and replay capacity.
    """

    canonical = normalize_agent_kind(kind)
    overrides = dict(overrides or {})
    if "kind" in overrides and normalize_agent_kind(overrides["kind"]) != canonical:
        raise ConfigError(f"agent_overrides.kind '{overrides['kind']}' conflicts with agent '{canonical}'.")
    overrides.pop("kind", None)

    known = set(getattr(AgentConfig, "model_fields", None) or AgentConfig.__fields__)
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"Unknown agent override keys: {', '.join(unknown)}.")

    merged = {**AGENT_PRESETS[canonical], **overrides, "kind": canonical}
    if fidelity_mode:
        merged["updates_per_episode"] = FIDELITY_UPDATES_PER_EPISODE
        merged["replay_capacity"] = FIDELITY_REPLAY_CAPACITY
    return AgentConfig.parse_document(merged, source=f"{canonical} agent config")


def observation_scale(env_id: str) -> list[float] | None:
    """Fixed per-dimension divisor applied before observations enter a network."""

    scale = SUPPORTED_ENVS[normalize_env_id(env_id)]["observation_scale"]
    return None if scale is None else list(scale)


def resolve_run(env: str, agent: str, overrides: Mapping[str, Any] | None = None, fidelity_mode: bool = False) -> ResolvedRun:
    env_id = normalize_env_id(env)
    config = resolve_agent_config(agent, overrides, fidelity_mode)
    entry = SUPPORTED_ENVS[env_id]
    return ResolvedRun(
        env_id=env_id,
        agent_config=config,
        obs_dim=entry["obs_dim"],
        action_count=entry["action_count"],
        observation_scale=observation_scale(env_id),
        score_metric=entry["score_metric"],
    )
