"""Run configuration: INI file + ``section.key=value`` overrides, validated by pydantic."""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Any, Iterable

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import SindyLoopError
from .loop import LoopConfig
from .simulate import SimConfig


class ConfigError(SindyLoopError):
    """Unreadable config file, unknown key or invalid value."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LoopSettings(_Section):
    tau: float = Field(0.1, gt=0)
    max_iterations: int = Field(10, ge=1)
    lambda_c: float = Field(0.1, ge=0)
    lambda_p: float = Field(0.1, ge=0)
    plateau_window: int = Field(3, ge=1)
    plateau_eps: float = Field(0.02, ge=0)
    base_candidates: int = Field(4, ge=1)
    plateau_candidates: int = Field(8, ge=1)
    base_diversity: float = Field(0.3, ge=0, le=1)
    plateau_diversity: float = Field(0.9, ge=0, le=1)
    max_terms: int = Field(8, ge=1)
    stlsq_threshold: float = Field(0.05, ge=0)
    max_sweeps: int = Field(10, ge=1)
    safeguard_margin: float = Field(0.05, ge=0)
    rejection_memory: int = Field(20, ge=0)
    complexity_normalizer: float = Field(50.0, gt=0)
    workers: int = Field(4, ge=1)


class SimSettings(_Section):
    rtol: float = Field(1e-6, gt=0)
    atol: float = Field(1e-8, gt=0)
    blowup_factor: float = Field(1e6, gt=0)
    timeout: float = Field(10.0, ge=0.1)
    max_steps: int = Field(200_000, ge=1)


class ProposerSettings(_Section):
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    api_key_env: str = "SINDYLOOP_API_KEY"
    max_tokens: int = Field(2048, ge=1)
    retries: int = Field(2, ge=0)
    backoff: float = Field(1.0, ge=0)
    timeout: float = Field(60.0, gt=0)


class GradingSettings(_Section):
    match_fraction: float = Field(0.5, gt=0, le=1)
    spurious_threshold: float = Field(0.1, ge=0)


class RunSettings(_Section):
    split: float = Field(0.7, gt=0, lt=1)
    jobs: int = Field(1, ge=1)


class RunConfig(_Section):
    loop: LoopSettings = Field(default_factory=LoopSettings)
    sim: SimSettings = Field(default_factory=SimSettings)
    proposer: ProposerSettings = Field(default_factory=ProposerSettings)
    grading: GradingSettings = Field(default_factory=GradingSettings)
    run: RunSettings = Field(default_factory=RunSettings)

    def loop_config(self) -> LoopConfig:
        return LoopConfig(**self.loop.model_dump(), sim=SimConfig(**self.sim.model_dump()))


def _parse_override(item: str) -> tuple[str, str, str]:
    key, sep, value = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    return section, name, value.strip()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Merge defaults, an optional INI file and ``section.key=value`` overrides."""
    raw: dict[str, dict[str, Any]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            raw[section] = dict(parser.items(section))
    for item in overrides:
        section, name, value = _parse_override(item)
        raw.setdefault(section, {})[name] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
