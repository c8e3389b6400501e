"""Run configuration and flag > file > default layering.

Config files are TOML with three sections mirroring the dataclasses::

    [run]
    k = 30
    H = 3
    ablations = ["C"]

    [provider]
    mode = "live"
    base_url = "https://api.openai.com/v1"

    [provider.models]
    judge = "gpt-4o-mini"

    [paths]
    dataset = "data/locomo_conv26.json"

Only the API credential comes from the environment (``MEMCYCLE_API_KEY``).
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError
from .memory import ViewPolicy
from .providers import AgentRole

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ABLATIONS = ("C", "R", "E")
DEFAULT_MODEL = "gpt-4o-mini"


def parse_ablations(value: str | Iterable[str]) -> frozenset[str]:
    if isinstance(value, str):
        items = [v.strip() for v in value.split(",")]
    else:
        items = [str(v).strip() for v in value]
    items = [v.upper().lstrip("/") for v in items if v]
    bad = [v for v in items if v not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablation(s) {', '.join(bad)}; choose from C, R, E")
    return frozenset(items)


@dataclass(frozen=True)
class ProviderConfig:
    mode: str = "cassette"
    base_url: str = "https://api.openai.com/v1"
    models: Mapping[str, str] = field(default_factory=lambda: {r.value: DEFAULT_MODEL for r in AgentRole})
    embedding_model: str = "text-embedding-3-small"
    cassette: str | None = None
    temperature: float = 0.0
    max_tokens: int = 512
    parallelism: int = 4
    min_interval: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("live", "cassette"):
            raise ConfigError(f"provider mode must be live or cassette, not {self.mode!r}")
        unknown = set(self.models) - {r.value for r in AgentRole}
        if unknown:
            raise ConfigError(f"unknown role(s) in provider.models: {', '.join(sorted(unknown))}")
        if self.temperature < 0 or self.max_tokens <= 0 or self.parallelism <= 0:
            raise ConfigError("temperature must be >= 0; max_tokens and parallelism positive")


@dataclass(frozen=True)
class PathsConfig:
    dataset: str | None = None
    bank: str | None = None
    traces: str | None = None
    report: str | None = None


@dataclass(frozen=True)
class RunConfig:
    k: int = 30
    H: int = 3
    J: int = 5
    view_policy: ViewPolicy = ViewPolicy.HYBRID
    view_limit: int = 10
    theta: float = 0.55
    max_neighbors: int = 5
    ablations: frozenset[str] = frozenset()
    single_action: bool = False
    dimension: int | None = None
    seed: int = 0
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "view_policy", ViewPolicy(self.view_policy))
        object.__setattr__(self, "ablations", parse_ablations(self.ablations))
        for name in ("k", "J", "view_limit", "max_neighbors"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.H, int) or self.H < 0:
            raise ConfigError(f"H must be a nonnegative integer, got {self.H!r}")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie in (0, 1), got {self.theta!r}")
        if self.dimension is not None and self.dimension <= 0:
            raise ConfigError("dimension must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def ablate_C(self) -> bool:
        return "C" in self.ablations

    @property
    def ablate_R(self) -> bool:
        return "R" in self.ablations

    @property
    def ablate_E(self) -> bool:
        return "E" in self.ablations

    def snapshot(self) -> dict[str, Any]:
        """Every setting that can change results; paths are deliberately excluded."""
        p = self.provider
        return {
            "k": self.k,
            "H": self.H,
            "J": self.J,
            "view_policy": self.view_policy.value,
            "view_limit": self.view_limit,
            "theta": self.theta,
            "max_neighbors": self.max_neighbors,
            "ablations": sorted(self.ablations),
            "single_action": self.single_action,
            "dimension": self.dimension,
            "seed": self.seed,
            "provider": {
                "mode": p.mode,
                "models": dict(sorted(p.models.items())) if p.mode == "live" else None,
                "embedding_model": p.embedding_model if p.mode == "live" else None,
                "temperature": p.temperature,
                "max_tokens": p.max_tokens,
            },
        }


_SECTIONS = {"run": None, "provider": "provider", "paths": "paths"}


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def flatten_file(doc: Mapping[str, Any]) -> dict[str, Any]:
    """Turn a parsed config document into dotted keys (``k``, ``provider.mode``, ...)."""
    flat: dict[str, Any] = {}
    run_keys = _field_names(RunConfig) - {"provider", "paths"}
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, Mapping):
            raise ConfigError(f"[{section}] must be a table")
        allowed = run_keys if section == "run" else _field_names(
            ProviderConfig if section == "provider" else PathsConfig)
        for key, value in body.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            if section == "provider" and key == "models":
                if not isinstance(value, Mapping):
                    raise ConfigError("[provider.models] must be a table")
                for role, model in value.items():
                    flat[f"provider.models.{role}"] = model
                continue
            flat[key if section == "run" else f"{section}.{key}"] = value
    return flat


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    return flatten_file(doc)


def build_config(*layers: Mapping[str, Any]) -> RunConfig:
    """Fold dotted-key layers onto the defaults; later layers win field by field."""
    top: dict[str, Any] = {}
    provider: dict[str, Any] = {}
    models = dict(ProviderConfig().models)
    paths: dict[str, Any] = {}
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key.startswith("provider.models."):
                models[key.split(".", 2)[2]] = value
            elif key.startswith("provider."):
                provider[key.split(".", 1)[1]] = value
            elif key.startswith("paths."):
                paths[key.split(".", 1)[1]] = value
            else:
                top[key] = value
    unknown = set(top) - (_field_names(RunConfig) - {"provider", "paths"})
    if unknown:
        raise ConfigError(f"unknown setting(s) {', '.join(sorted(unknown))}")
    try:
        return RunConfig(
            **top,
            provider=ProviderConfig(**provider, models=models),
            paths=PathsConfig(**paths),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def with_ablations(config: RunConfig, ablations: Iterable[str]) -> RunConfig:
    return replace(config, ablations=parse_ablations(ablations))
