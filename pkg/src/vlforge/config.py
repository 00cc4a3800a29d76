"""Pipeline configuration: a flat TOML-like key/value file, canonicalized and hashed.

The file format is deliberately small: optional ``[section]`` headers, one
``key = value`` pair per line, ``#`` comments. Values are parsed as int,
float, bool, or (optionally quoted) string. The canonical form — sorted
``section.key=value`` lines joined by LF — is what gets hashed into every
run-ledger entry, so two configs with the same content always share a hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unreadable or out-of-range configuration input."""


def parse_config_text(text: str) -> dict[str, object]:
    """Parse TOML-like key/value text into a flat dict of dotted keys."""
    values: dict[str, object] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        dotted = f"{section}.{key}" if section else key
        values[dotted] = _parse_value(value.strip())
    return values


def _parse_value(text: str) -> object:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        return text[1:-1]
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def canonical_config(values: dict[str, object]) -> str:
    """Render a flat config dict to its canonical sorted key=value form."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        lines.append(f"{key}={rendered}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict[str, object]) -> str:
    """64-hex digest of the canonical config serialization."""
    return hashlib.sha256(canonical_config(values).encode("utf-8")).hexdigest()


@dataclass
class PipelineConfig:
    """Every tunable the pipeline stages read, with desk-scale defaults."""

    # paths
    workspace: str = "work"
    source_dir: str = ""
    source_tag: str = "local"
    label_map: str = ""
    prompts_dir: str = ""
    lexicon: str = ""
    stub_script: str = ""
    stem_blocklist: str = ""
    reviewers: str = ""

    # gateway
    api_base: str = ""
    caption_model: str = "stub-caption"
    synth_model: str = "stub-synth"
    refine_model: str = "stub-refine"
    filter_model: str = "stub-filter"
    judge_model: str = "stub-judge"
    parallelism: int = 4
    rate_limit: float = 50.0
    rate_burst: int = 10
    attempts: int = 4
    backoff_base_ms: int = 500
    backoff_cap_ms: int = 30000
    cache_enabled: bool = True
    max_tokens: int = 512
    caption_temperature: float = 0.2
    synth_temperature: float = 0.7
    filter_temperature: float = 0.2
    refine_temperature: float = 0.0
    judge_temperature: float = 0.0

    # stage parameters
    eval_fraction: float = 0.2
    seed: int = 7
    threshold: int = 4
    max_iterations: int = 3
    expert_k: int = 50
    max_hamming: int = 8
    min_jaccard: float = 0.8
    min_cosine: float = 0.92
    bench_name: str = "agribench-vl-mini"

    extras: dict[str, object] = field(default_factory=dict, repr=False)

    _SECTIONS = {
        "workspace": "paths", "source_dir": "paths", "source_tag": "paths",
        "label_map": "paths", "prompts_dir": "paths", "lexicon": "paths",
        "stub_script": "paths", "stem_blocklist": "paths", "reviewers": "paths",
        "api_base": "gateway", "caption_model": "gateway", "synth_model": "gateway",
        "refine_model": "gateway", "filter_model": "gateway", "judge_model": "gateway",
        "parallelism": "gateway", "rate_limit": "gateway", "rate_burst": "gateway",
        "attempts": "gateway", "backoff_base_ms": "gateway", "backoff_cap_ms": "gateway",
        "cache_enabled": "gateway", "max_tokens": "gateway",
        "caption_temperature": "gateway", "synth_temperature": "gateway",
        "filter_temperature": "gateway", "refine_temperature": "gateway",
        "judge_temperature": "gateway",
        "eval_fraction": "stages", "seed": "stages", "threshold": "stages",
        "max_iterations": "stages", "expert_k": "stages", "max_hamming": "stages",
        "min_jaccard": "stages", "min_cosine": "stages", "bench_name": "stages",
    }

    @classmethod
    def from_file(cls, path: Path | str) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_values(parse_config_text(path.read_text(encoding="utf-8")))

    @classmethod
    def from_values(cls, values: dict[str, object]) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls) if f.name != "extras"}
        kwargs: dict[str, object] = {}
        extras: dict[str, object] = {}
        for dotted, value in values.items():
            name = dotted.rsplit(".", 1)[-1]
            if name in known:
                kwargs[name] = _coerce(name, value, known[name].type)
            else:
                extras[dotted] = value
        cfg = cls(**kwargs, extras=extras)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not (0.0 < self.eval_fraction < 1.0):
            raise ConfigError(f"eval_fraction must be in (0,1), got {self.eval_fraction}")
        if not (1 <= self.threshold <= 5):
            raise ConfigError(f"threshold must be in [1,5], got {self.threshold}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if not (0 <= self.max_hamming <= 64):
            raise ConfigError("max_hamming must be in [0,64]")

    def to_values(self) -> dict[str, object]:
        """Flatten back to dotted keys; the hash is taken over this form."""
        values: dict[str, object] = {}
        for f in fields(self):
            if f.name == "extras":
                continue
            section = self._SECTIONS.get(f.name, "stages")
            values[f"{section}.{f.name}"] = getattr(self, f.name)
        values.update(self.extras)
        return values

    def hash(self) -> str:
        return config_hash(self.to_values())

    def workspace_path(self) -> Path:
        return Path(self.workspace)


def _coerce(name: str, value: object, annotation: object) -> object:
    ann = str(annotation)
    try:
        if "bool" in ann:
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{name} must be a boolean, got {value!r}")
        if "float" in ann:
            return float(value)  # type: ignore[arg-type]
        if "int" in ann:
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            return int(value)  # type: ignore[arg-type]
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
