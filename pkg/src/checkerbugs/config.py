"""Pipeline configuration (one YAML file, validated strictly) and the
per-run manifest that makes repeated runs auditable.

Unknown keys are rejected and every referenced path is checked at load
time, before any command touches the network or its outputs.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import yaml

__all__ = [
    "ConfigError",
    "MiningConfig",
    "StoreConfig",
    "BackendConfig",
    "AgentsConfig",
    "EvalConfig",
    "PipelineConfig",
    "load_config",
    "write_manifest",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_INPUT",
    "EXIT_BACKEND",
    "TOOL_VERSION",
]

TOOL_VERSION = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_BACKEND = 4


class ConfigError(ValueError):
    pass


@dataclass
class MiningConfig:
    repos: list[str] = field(default_factory=list)
    since: str = "2016-09-01"
    until: str = "2023-12-31"
    keyword_file: str | None = None  # default: bundled seed keywords
    max_files: int = 10
    max_loc: int = 15


@dataclass
class StoreConfig:
    dir: str = "rag-store"
    provider: str = "hashing"
    dimension: int = 384
    batch_size: int = 50
    k: int = 1
    retrieval_enabled: bool = True
    base_url: str | None = None  # remote provider only
    model: str = "all-MiniLM-L6-v2"
    api_key_env: str = "OPENAI_API_KEY"


@dataclass
class BackendConfig:
    name: str = "scripted"
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    script_file: str | None = None
    default_response: str = "NO"
    base_url: str | None = None
    timeout: float = 60.0
    retries: int = 3
    api_key_env: str = "OPENAI_API_KEY"
    concurrency: int = 4


@dataclass
class AgentsConfig:
    strategy: str = "cot"
    granularity: str = "commit"
    detection_shots_file: str | None = None  # default: first two bundled bugs
    ruleset: str | None = None  # default: bundled rule set


@dataclass
class EvalConfig:
    runs: int = 5
    dataset: str | None = None


@dataclass
class PipelineConfig:
    seed: int = 42
    mining: MiningConfig = field(default_factory=MiningConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    agents: AgentsConfig = field(default_factory=AgentsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    transcripts: str | None = None  # default: derived from the output path

    def snapshot(self) -> dict:
        return {
            "seed": self.seed,
            "mining": vars(self.mining).copy(),
            "store": vars(self.store).copy(),
            "backend": vars(self.backend).copy(),
            "agents": vars(self.agents).copy(),
            "eval": vars(self.eval).copy(),
            "transcripts": self.transcripts,
        }


_SECTIONS = {
    "mining": MiningConfig,
    "store": StoreConfig,
    "backend": BackendConfig,
    "agents": AgentsConfig,
    "eval": EvalConfig,
}
_TOP_SCALARS = {"seed", "transcripts"}

_CHOICES = {
    ("store", "provider"): {"hashing", "remote"},
    ("backend", "name"): {"scripted", "remote"},
    ("agents", "strategy"): {"cot", "zero", "few"},
    ("agents", "granularity"): {"commit", "change"},
}

# Config keys holding paths that must already exist.
_PATH_KEYS = (
    ("mining", "keyword_file"),
    ("backend", "script_file"),
    ("agents", "detection_shots_file"),
    ("agents", "ruleset"),
    ("eval", "dataset"),
)


def _build_section(name: str, cls, raw: Mapping[str, Any]):
    section = cls()
    known = vars(section)
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        setattr(section, key, value)
    return section


def load_config(path: str | Path | None) -> PipelineConfig:
    """Load and validate a config file; None yields the defaults.

    Relative paths inside the file are resolved against its directory.
    """
    config = PipelineConfig()
    if path is None:
        return config
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")

    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be a mapping")
            setattr(config, key, _build_section(key, _SECTIONS[key], value))
        elif key in _TOP_SCALARS:
            setattr(config, key, value)
        else:
            raise ConfigError(f"unknown key {key}")

    base = path.parent

    def resolve(value: str | None) -> str | None:
        if value is None:
            return None
        p = Path(value)
        return str(p if p.is_absolute() else base / p)

    config.mining.repos = [resolve(r) for r in config.mining.repos]
    for section_name, key in _PATH_KEYS:
        section = getattr(config, section_name)
        setattr(section, key, resolve(getattr(section, key)))
    config.store.dir = resolve(config.store.dir)
    config.transcripts = resolve(config.transcripts)

    _validate(config)
    return config


def _validate(config: PipelineConfig) -> None:
    for (section_name, key), allowed in _CHOICES.items():
        value = getattr(getattr(config, section_name), key)
        if value not in allowed:
            raise ConfigError(f"{section_name}.{key} must be one of {sorted(allowed)}, got {value!r}")
    if not isinstance(config.seed, int):
        raise ConfigError("seed must be an integer")
    if config.mining.max_files < 1 or config.mining.max_loc < 1:
        raise ConfigError("mining thresholds must be >= 1")
    if config.store.batch_size < 1 or config.store.k < 1:
        raise ConfigError("store.batch_size and store.k must be >= 1")
    if not 0.0 <= float(config.backend.temperature) <= 2.0:
        raise ConfigError("backend.temperature must be within [0, 2]")
    if config.eval.runs < 1:
        raise ConfigError("eval.runs must be >= 1")
    if config.backend.concurrency < 1:
        raise ConfigError("backend.concurrency must be >= 1")
    for repo in config.mining.repos:
        if not Path(repo).exists():
            raise ConfigError(f"mining repo does not exist: {repo}")
    for section_name, key in _PATH_KEYS:
        value = getattr(getattr(config, section_name), key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{section_name}.{key} does not exist: {value}")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    command: str,
    config_snapshot: dict,
    inputs: Mapping[str, str | Path],
    outputs: Mapping[str, str | Path],
    started_at: str,
    manifest_path: str | Path,
) -> dict:
    """Write the run manifest atomically at run end; returns its content.

    Input and output digests make the repeated-run protocol auditable:
    identical runs must produce identical output digests.
    """
    def digest_map(paths: Mapping[str, str | Path]) -> dict:
        out = {}
        for name, p in paths.items():
            p = Path(p)
            out[name] = {"path": str(p), "sha256": _sha256(p) if p.is_file() else None}
        return out

    manifest = {
        "tool_version": TOOL_VERSION,
        "command": command,
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "config": config_snapshot,
        "inputs": digest_map(inputs),
        "outputs": digest_map(outputs),
    }
    manifest_path = Path(manifest_path)
    tmp = manifest_path.with_suffix(manifest_path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, manifest_path)
    return manifest
