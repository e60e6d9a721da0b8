"""Declarative service configuration.

One YAML document describes the whole deployment: label space, backend
set, fusion/router/arbiter settings, and the operating mode. Secrets are
never stored in the file — ``${VAR}`` references are substituted from the
environment at load time, and the live-LLM API key is read from
``SOFTCASCADE_LLM_API_KEY``.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import yaml

from .arbiter import (
    API_KEY_ENV,
    ArbiterConfig,
    CachingArbiter,
    ChatCompletionClient,
    DescriptorDB,
    LlmArbiter,
    MockArbiter,
)
from .backends import BackendSet, RemoteBackend, SyntheticBackend, load_logit_store
from .errors import ConfigError
from .fusion import FusionConfig, RouterConfig

MODES = ("live-llm", "mock", "no-arbiter")

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

_TOP_LEVEL_KEYS = {
    "listen", "mode", "class_names", "class_names_file", "backends",
    "fusion", "router", "arbiter", "descriptors", "llm",
}


@dataclass(frozen=True)
class BackendSpec:
    """One backend declaration; ``options`` are kind-specific settings."""

    kind: str
    options: dict


@dataclass(frozen=True)
class LlmEndpoint:
    base_url: str
    model: str


@dataclass
class ServiceConfig:
    """Everything the service and CLI need to assemble a pipeline."""

    class_names: list[str]
    backend_specs: list[BackendSpec]
    mode: str = "no-arbiter"
    listen_host: str = "127.0.0.1"
    listen_port: int = 8000
    fusion: FusionConfig = field(default_factory=FusionConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    arbiter: ArbiterConfig = field(default_factory=ArbiterConfig)
    descriptor_path: str | None = None
    llm: LlmEndpoint | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.class_names:
            raise ConfigError("class_names must not be empty")
        if not self.backend_specs:
            raise ConfigError("at least one backend must be declared")
        if self.mode in ("live-llm", "mock") and not self.descriptor_path:
            raise ConfigError(f"mode {self.mode!r} requires a descriptor database")
        if self.mode == "live-llm":
            if self.llm is None:
                raise ConfigError("mode 'live-llm' requires an llm endpoint")
            if not os.environ.get(API_KEY_ENV):
                raise ConfigError(
                    f"mode 'live-llm' requires credentials in ${API_KEY_ENV}")

    def with_mode(self, mode: str) -> "ServiceConfig":
        """Copy with a different operating mode, re-running validation."""
        return replace(self, mode=mode)


def _expand_env(value):
    """Substitute ``${VAR}`` in string leaves; unknown variables are errors."""
    if isinstance(value, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset variable ${{{name}}}")
            return os.environ[name]
        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, dict):
        return {k: _expand_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_expand_env(v) for v in value]
    return value


def _section(raw: dict, key: str, cls):
    params = raw.get(key) or {}
    if not isinstance(params, dict):
        raise ConfigError(f"{key!r} must be a mapping")
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad {key!r} section: {exc}") from exc


def _parse_listen(raw: dict) -> tuple[str, int]:
    listen = raw.get("listen", "127.0.0.1:8000")
    host, sep, port = str(listen).rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"listen must look like 'host:port', got {listen!r}")
    return host, int(port)


def _parse_class_names(raw: dict, path) -> list[str]:
    if "class_names" in raw and "class_names_file" in raw:
        raise ConfigError("give class_names or class_names_file, not both")
    if "class_names" in raw:
        names = raw["class_names"]
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise ConfigError("class_names must be a list of strings")
        return names
    if "class_names_file" in raw:
        file = raw["class_names_file"]
        try:
            with open(file, "r", encoding="utf-8") as fh:
                return [line.strip() for line in fh if line.strip()]
        except OSError as exc:
            raise ConfigError(f"cannot read class_names_file {file!r}: {exc}") from exc
    raise ConfigError(f"{path}: class_names (or class_names_file) is required")


def load_service_config(path) -> ServiceConfig:
    """Parse and validate a YAML service configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: bad YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    unknown = set(raw) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    raw = _expand_env(raw)

    specs = []
    for i, item in enumerate(raw.get("backends") or []):
        if not isinstance(item, dict) or "kind" not in item:
            raise ConfigError(f"backend #{i} must be a mapping with a 'kind'")
        options = dict(item)
        specs.append(BackendSpec(kind=options.pop("kind"), options=options))

    llm = None
    if raw.get("llm") is not None:
        llm = _section(raw, "llm", LlmEndpoint)

    host, port = _parse_listen(raw)
    return ServiceConfig(
        class_names=_parse_class_names(raw, path),
        backend_specs=specs,
        mode=raw.get("mode", "no-arbiter"),
        listen_host=host,
        listen_port=port,
        fusion=_section(raw, "fusion", FusionConfig),
        router=_section(raw, "router", RouterConfig),
        arbiter=_section(raw, "arbiter", ArbiterConfig),
        descriptor_path=raw.get("descriptors"),
        llm=llm,
    )


def _build_backend(spec: BackendSpec):
    opts = dict(spec.options)
    try:
        if spec.kind == "jsonl":
            return load_logit_store(opts.pop("path"), **opts)
        if spec.kind == "synthetic":
            return SyntheticBackend(**opts)
        if spec.kind == "remote":
            return RemoteBackend(**opts)
    except KeyError as exc:
        raise ConfigError(f"{spec.kind} backend is missing {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"bad {spec.kind} backend options: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot open {spec.kind} backend: {exc}") from exc
    raise ConfigError(f"unknown backend kind {spec.kind!r}")


def build_backends(config: ServiceConfig) -> BackendSet:
    """Instantiate the declared backend set and check it spans the label space."""
    backend_set = BackendSet([_build_backend(s) for s in config.backend_specs])
    class_count = backend_set.backends[0].class_count
    if class_count != len(config.class_names):
        raise ConfigError(
            f"backends emit {class_count} classes but "
            f"{len(config.class_names)} class names are configured")
    return backend_set


def build_arbiter(config: ServiceConfig):
    """Instantiate ``(arbiter, descriptors)`` for the configured mode."""
    descriptors = None
    if config.descriptor_path:
        try:
            descriptors = DescriptorDB.load(config.descriptor_path,
                                            config.class_names)
        except OSError as exc:
            raise ConfigError(
                f"cannot read descriptor database "
                f"{config.descriptor_path!r}: {exc}") from exc
    if config.mode == "no-arbiter":
        return None, descriptors
    if config.mode == "mock":
        arbiter = MockArbiter(lambda_pen=config.arbiter.lambda_pen)
        if config.arbiter.cache_dir:
            arbiter = CachingArbiter(arbiter, config.arbiter.cache_dir)
        return arbiter, descriptors
    client = ChatCompletionClient(base_url=config.llm.base_url,
                                  model=config.llm.model)
    return LlmArbiter(config.arbiter, client), descriptors
