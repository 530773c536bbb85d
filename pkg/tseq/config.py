"""Sectioned YAML run configuration.

A run file has up to four sections, `prior`, `model`, `train` and `eval`, each
mapping onto the configuration dataclass of its component. Missing keys take the
dataclass defaults and unknown keys are errors. The model's task count and
sequence length always follow the prior.
"""
from dataclasses import asdict, dataclass, field, fields, replace
import logging
import os
from pathlib import Path

import yaml

from tseq.harness import EvalConfig
from tseq.model import ModelConfig
from tseq.prior import PriorConfig
from tseq.trainer import TrainConfig

from typing import Any, Dict, Optional, Union

logger = logging.getLogger(__name__)

SECTIONS = {
    "prior": PriorConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
ENV_SEED = "TSEQ_SEED"
ENV_WORKERS = "TSEQ_WORKERS"


class ConfigError(ValueError):
    pass


def _section(name: str, values: Any) -> Dict[str, Any]:
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{name}' must be a mapping, got {type(values).__name__}.")
    known = {f.name for f in fields(SECTIONS[name])}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in section '{name}': {', '.join(unknown)}.")
    return dict(values)


@dataclass
class RunConfig:
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        self.model = replace(
            self.model,
            num_tasks=self.prior.num_tasks,
            seq_len=self.prior.sequence_length,
        )

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "RunConfig":
        """Builds a config from parsed YAML.

        Raises:
            ConfigError: on unknown sections or keys and on invalid values
        """
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("A run configuration must be a mapping of sections.")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(
                f"Unknown section(s) {', '.join(unknown)}, expected {', '.join(SECTIONS)}."
            )
        sections = {name: _section(name, data.get(name)) for name in SECTIONS}

        try:
            prior = PriorConfig(**sections["prior"])
            for key, derived in (
                ("num_tasks", prior.num_tasks),
                ("seq_len", prior.sequence_length),
            ):
                value = sections["model"].pop(key, derived)
                if value != derived:
                    raise ConfigError(
                        f"model.{key} is set by the prior ({derived}), got {value}."
                    )
            model = ModelConfig(
                num_tasks=prior.num_tasks,
                seq_len=prior.sequence_length,
                **sections["model"],
            )
            return cls(
                prior,
                model,
                TrainConfig(**sections["train"]),
                EvalConfig(**sections["eval"]),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e))

    @classmethod
    def load(cls, path: Union[Path, str]) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file '{path}' not found.")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse '{path.name}': {e}")
        config = cls.from_dict(data)
        logger.info(f"Imported configuration from {path.name}.")
        return config

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        data = {name: asdict(getattr(self, name)) for name in SECTIONS}
        data["eval"]["methods"] = list(data["eval"]["methods"])
        return data

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def override(self, section: str, **values: Any) -> "RunConfig":
        """Copy with the non-None `values` replaced in `section`."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        try:
            updated = replace(getattr(self, section), **values)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e))
        return replace(self, **{section: updated})


def _env_int(name: str) -> Optional[int]:
    value = os.environ.get(name)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"Environment variable {name} must be an integer, got '{value}'.")


def env_seed() -> Optional[int]:
    return _env_int(ENV_SEED)


def env_workers() -> Optional[int]:
    return _env_int(ENV_WORKERS)
