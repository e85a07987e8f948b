"""Run configuration: JSON documents validated against the bundled schema."""

from __future__ import annotations

import dataclasses
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .metrics import MetricConfig
from .model import ModelConfig, RirmConfig, SrtConfig
from .simulate import NoiseConfig
from .swin import StmConfig
from .tomo import ScanGeometry
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_run_config", "parse_run_config", "schema", "validate"]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """The configuration document is malformed or violates the schema."""


@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files("dudotrans").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def validate(doc: dict, where: str = "config") -> None:
    """Raise :class:`ConfigError` describing the first schema violation."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        loc = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: schema error at {loc}: {err.message}")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    geometry: dict
    noise: NoiseConfig
    srt: SrtConfig
    rirm: RirmConfig
    train: TrainConfig
    metrics: MetricConfig
    variant: str = "dudotrans"
    model_seed: int = 0
    zero_init: bool = True
    source: Path | None = None

    def model_config(self, geometry: ScanGeometry, variant: str | None = None) -> ModelConfig:
        return ModelConfig(geometry=geometry, variant=variant or self.variant, srt=self.srt, rirm=self.rirm,
                           lambda1=self.train.lambda1, lambda2=self.train.lambda2, seed=self.model_seed,
                           zero_init=self.zero_init)

    def manifest_path(self) -> Path:
        if not self.train.manifest:
            raise ConfigError("train.manifest is not set")
        p = Path(self.train.manifest)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p


def _branch(cls, d: dict | None):
    d = dict(d or {})
    stm = StmConfig(**d.pop("stm", {}))
    return cls(stm=stm, **d)


def parse_run_config(doc: dict, source: Path | None = None) -> RunConfig:
    """Validate ``doc`` and build the typed configuration (defaults fill gaps)."""
    where = str(source) if source else "config"
    validate(doc, where)
    model = doc.get("model", {})
    try:
        geom = dict(doc.get("geometry", {}))
        ScanGeometry(**{"num_views": 96, **{k: tuple(v) if k == "image_size" else v for k, v in geom.items()}})
        return RunConfig(
            geometry=geom,
            noise=NoiseConfig(**doc.get("noise", {})),
            srt=_branch(SrtConfig, doc.get("srt")),
            rirm=_branch(RirmConfig, doc.get("rirm")),
            train=TrainConfig(**doc.get("train", {})),
            metrics=MetricConfig(**doc.get("metrics", {})),
            variant=model.get("variant", "dudotrans"),
            model_seed=int(model.get("seed", 0)),
            zero_init=bool(model.get("zero_init", True)),
            source=source,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return parse_run_config(doc, path)
