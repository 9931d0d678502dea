"""Run configuration: one JSON file, ``${ENV}`` interpolation, flag overrides."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .client import Decoding, HashEmbedder, HttpBackend, ReplayBackend, ResponseCache, ScriptedOracle, Truth, VLMClient
from .errors import ConfigError
from .evaluation import EvalConfig
from .inference import InferenceConfig

log = logging.getLogger(__name__)

BACKENDS = ("http", "replay", "oracle")
_ENV_REF = re.compile(r"\$\{(?P<name>[A-Za-z_][A-Za-z0-9_]*)(?::-(?P<default>[^}]*))?\}")


@dataclass
class RunConfig:
    backend: str = "http"
    base_url: str = "http://localhost:8000"
    chat_path: str = "/v1/chat/completions"
    embed_path: str = "/v1/embeddings"
    api_key: str | None = "${VLM_API_KEY:-}"
    model_id: str = "Qwen2.5-VL-7B-Instruct"
    embedder: str = "hash"  # "hash" (offline) or "http"
    embed_model: str | None = None
    embed_dim: int = 64
    max_frames: int = 128
    mode: str = "askhint"
    promptset: str = "ucf_crime_qstar"
    pool: str = "ucf_crime_q"
    concurrency: int = 4
    seed: int = 0
    cache_dir: str | None = ".vadprompt-cache"
    output_dir: str = "runs"
    frames_root: str | None = None
    temperature: float = 0.0
    max_tokens: int = 256
    decoding_seed: int | None = 0
    image_max_edge: int = 448
    logprobs: bool = False
    timeout_s: float = 120.0
    retries: int = 3
    backoff_s: float = 1.0
    score_rule: str = "binary"
    auc_level: str = "video"
    window_s: float | None = None
    stride_s: float | None = None
    class_label_targets: list[str] | None = None
    oracle: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.max_frames < 1:
            raise ConfigError("max_frames must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.embedder not in ("hash", "http"):
            raise ConfigError("embedder must be 'hash' or 'http'")

    def decoding(self) -> Decoding:
        return Decoding(self.temperature, self.max_tokens, self.decoding_seed, self.image_max_edge, self.logprobs)

    def inference(self) -> InferenceConfig:
        try:
            return InferenceConfig(
                model_id=self.model_id,
                max_frames=self.max_frames,
                decoding=self.decoding(),
                score_rule=self.score_rule,
                class_label_targets=self.class_label_targets,
                window_s=self.window_s,
                stride_s=self.stride_s,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def eval_config(self) -> EvalConfig:
        try:
            return EvalConfig(self.inference(), self.concurrency, self.seed, self.auc_level)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def interpolate(value: Any) -> Any:
    """Replace ``${NAME}`` / ``${NAME:-default}`` in strings, recursively."""
    if isinstance(value, str):

        def sub(m: re.Match) -> str:
            name, default = m.group("name"), m.group("default")
            if name in os.environ:
                return os.environ[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is not set")

        return _ENV_REF.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    return value


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str) -> Any:
    """Flag strings to the field's type (``--set max_frames=64``)."""
    typ = str(_FIELD_TYPES[name])
    if raw.lower() in ("none", "null") and "None" in typ:
        return None
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    if typ.startswith("bool"):
        return raw.lower() in ("1", "true", "yes", "on")
    if typ.startswith("list") or typ.startswith("dict"):
        return json.loads(raw)
    return raw


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        data[key] = _coerce(key, value) if isinstance(value, str) and key not in ("api_key",) else value
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = interpolate({**asdict(RunConfig()), **data})
    merged["api_key"] = merged.get("api_key") or None
    return RunConfig(**merged)


def build_embedder(cfg: RunConfig, backend: HttpBackend | None = None):
    if cfg.embedder == "hash":
        return HashEmbedder(cfg.embed_dim, cfg.seed)
    backend = backend or _http_backend(cfg)
    return backend.embed


def _http_backend(cfg: RunConfig) -> HttpBackend:
    return HttpBackend(
        cfg.base_url,
        api_key=cfg.api_key,
        chat_path=cfg.chat_path,
        embed_path=cfg.embed_path,
        embed_model=cfg.embed_model,
        timeout=cfg.timeout_s,
        retries=cfg.retries,
        backoff=cfg.backoff_s,
    )


def build_client(cfg: RunConfig, ground_truth: dict[str, Truth] | None = None) -> VLMClient:
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_dir else None
    if cfg.backend == "http":
        backend = _http_backend(cfg)
    elif cfg.backend == "replay":
        if cache is None:
            raise ConfigError("replay backend needs cache_dir")
        backend = ReplayBackend()
    else:
        opts = dict(cfg.oracle)
        opts.setdefault("seed", cfg.seed)
        try:
            backend = ScriptedOracle(ground_truth or {}, **opts)
        except TypeError as exc:
            raise ConfigError(f"bad oracle options: {exc}") from exc
    embedder = build_embedder(cfg, backend if isinstance(backend, HttpBackend) else None)
    return VLMClient(backend, cache=cache, max_in_flight=cfg.concurrency, embedder=embedder)
