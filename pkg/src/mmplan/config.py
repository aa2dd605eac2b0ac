"""Layered configuration: CLI flag > environment variable > config file >
built-in default.

The config file is INI-style, one section per backend role plus a [run]
section::

    [run]
    seed = 0
    k = 20
    variant = osrcot
    cache_dir = cache
    workers = 4

    [chat]
    kind = mock            ; mock | http
    model = mock-chat

    [vision]
    kind = http
    base_url = http://localhost:8080
    model = llava-1.5-7b
    api_key_env = MMPLAN_API_KEY
    rate_limit = 60

    [sequencer]
    kind = mock            ; mock | http
    model = identity       ; oracle | identity | random (mock kinds)

MMPLAN_CONFIG overrides the config file path.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backends.base import BackendSet
from .backends.cache import CachingBackend, ResponseCache
from .backends.http import HttpBackend, RateLimiter, RetryPolicy
from .backends.mock import MockBackend
from .errors import ConfigError

ROLES = ("chat", "vision", "t2i", "embed")
ENV_PREFIX = "MMPLAN_"


@dataclass
class BackendSpec:
    kind: str = "mock"  # mock | http
    base_url: str = ""
    model: str = "mock"
    api_key_env: str = "MMPLAN_API_KEY"
    rate_limit: float | None = None  # requests per minute
    timeout: float = 120.0

    def validate(self, role: str) -> None:
        if self.kind not in ("mock", "http"):
            raise ConfigError(f"[{role}] kind must be mock or http, got {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ConfigError(f"[{role}] kind=http requires base_url")


@dataclass
class AppConfig:
    backends: dict[str, BackendSpec] = field(
        default_factory=lambda: {role: BackendSpec(model=f"mock-{role}") for role in ROLES}
    )
    sequencer: str = "identity"  # oracle | identity | random | http:<url>
    seed: int = 0
    k: int = 20
    variant: str = "osrcot"
    stages: tuple[str, ...] = ("text", "describe", "images", "select")
    goal_image: bool = True
    cache_dir: str = "cache"
    templates_dir: str | None = None
    workers: int = 4
    temperature: float = 0.7
    max_tokens: int = 512
    image_size: tuple[int, int] = (512, 512)
    retry_attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 4.0

    def to_doc(self) -> dict:
        doc = {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name != "backends"
        }
        doc["stages"] = list(self.stages)
        doc["image_size"] = list(self.image_size)
        doc["backends"] = {role: vars(spec).copy() for role, spec in self.backends.items()}
        return doc

    def dump(self) -> str:
        return json.dumps(self.to_doc(), indent=2, sort_keys=True)


def _get(parser: configparser.ConfigParser, section: str, option: str, fallback=None):
    if parser.has_option(section, option):
        return parser.get(section, option)
    return fallback


def load_config_file(path: Path) -> AppConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = AppConfig()

    if parser.has_section("run"):
        sec = "run"
        cfg.seed = int(_get(parser, sec, "seed", cfg.seed))
        cfg.k = int(_get(parser, sec, "k", cfg.k))
        cfg.variant = _get(parser, sec, "variant", cfg.variant)
        stages = _get(parser, sec, "stages")
        if stages:
            cfg.stages = tuple(s.strip() for s in stages.split(",") if s.strip())
        goal_image = _get(parser, sec, "goal_image")
        if goal_image is not None:
            cfg.goal_image = goal_image.strip().lower() in ("1", "true", "yes", "on")
        cfg.cache_dir = _get(parser, sec, "cache_dir", cfg.cache_dir)
        cfg.templates_dir = _get(parser, sec, "templates_dir", cfg.templates_dir)
        cfg.workers = int(_get(parser, sec, "workers", cfg.workers))
        cfg.temperature = float(_get(parser, sec, "temperature", cfg.temperature))
        cfg.max_tokens = int(_get(parser, sec, "max_tokens", cfg.max_tokens))
        cfg.retry_attempts = int(_get(parser, sec, "retry_attempts", cfg.retry_attempts))
        cfg.backoff_base = float(_get(parser, sec, "backoff_base", cfg.backoff_base))
        cfg.backoff_factor = float(_get(parser, sec, "backoff_factor", cfg.backoff_factor))

    for role in ROLES:
        if not parser.has_section(role):
            continue
        spec = cfg.backends[role]
        spec.kind = _get(parser, role, "kind", spec.kind)
        spec.base_url = _get(parser, role, "base_url", spec.base_url)
        spec.model = _get(parser, role, "model", spec.model)
        spec.api_key_env = _get(parser, role, "api_key_env", spec.api_key_env)
        rate = _get(parser, role, "rate_limit")
        if rate is not None:
            spec.rate_limit = float(rate)
        spec.timeout = float(_get(parser, role, "timeout", spec.timeout))
        spec.validate(role)

    if parser.has_section("sequencer"):
        kind = _get(parser, "sequencer", "kind", "mock")
        if kind == "http":
            base = _get(parser, "sequencer", "base_url", "")
            if not base:
                raise ConfigError("[sequencer] kind=http requires base_url")
            cfg.sequencer = base
        else:
            cfg.sequencer = _get(parser, "sequencer", "model", "identity")
    return cfg


def resolve_config(cli: dict | None = None, env: dict | None = None) -> AppConfig:
    """Apply the precedence chain. ``cli`` holds already-typed overrides with
    None meaning "not given"."""
    cli = {k: v for k, v in (cli or {}).items() if v is not None}
    env = os.environ if env is None else env

    path = cli.get("config") or env.get(ENV_PREFIX + "CONFIG")
    cfg = load_config_file(Path(path)) if path else AppConfig()

    def env_override(name: str, cast):
        value = env.get(ENV_PREFIX + name.upper())
        if value is not None:
            setattr(cfg, name, cast(value))

    env_override("seed", int)
    env_override("k", int)
    env_override("variant", str)
    env_override("cache_dir", str)
    env_override("templates_dir", str)
    env_override("workers", int)

    for name in ("seed", "k", "variant", "cache_dir", "templates_dir", "workers",
                 "goal_image", "temperature", "max_tokens", "sequencer"):
        if name in cli:
            setattr(cfg, name, cli[name])
    if "stages" in cli:
        cfg.stages = tuple(cli["stages"])
    return cfg


def build_backends(cfg: AppConfig, use_cache: bool = True) -> BackendSet:
    """Instantiate the per-role backends behind a shared response cache."""
    cache = ResponseCache(Path(cfg.cache_dir)) if use_cache else None
    retry = RetryPolicy(
        attempts=cfg.retry_attempts,
        backoff_base=cfg.backoff_base,
        backoff_factor=cfg.backoff_factor,
    )

    built: dict[str, object] = {}
    models: dict[str, str] = {}
    for role in ROLES:
        spec = cfg.backends[role]
        spec.validate(role)
        if spec.kind == "mock":
            backend = MockBackend(seed=cfg.seed)
        else:
            limiter = RateLimiter(spec.rate_limit) if spec.rate_limit else None
            backend = HttpBackend(
                base_url=spec.base_url,
                model=spec.model,
                api_key_env=spec.api_key_env,
                timeout=spec.timeout,
                retry=retry,
                rate_limiter=limiter,
            )
        built[role] = CachingBackend(backend, cache) if cache is not None else backend
        models[role] = spec.model
    return BackendSet(
        chat=built["chat"],
        vision=built["vision"],
        t2i=built["t2i"],
        embed=built["embed"],
        models=models,
    )
