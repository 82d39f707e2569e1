"""Run configuration: one JSON document driving models, data and training.

The document has four optional sections (model_teacher, model_student, data,
distill) whose keys mirror the corresponding dataclass fields. Unknown keys
are an error; missing keys keep the dataclass defaults.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields

from .data import DatasetConfig
from .losses import LossWeights
from .model import ModelConfig
from .pipeline import DistillConfig

__all__ = ["ConfigError", "RunConfig", "parse_run_config", "load_run_config"]

SECTIONS = ("model_teacher", "model_student", "data", "distill")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    teacher: ModelConfig
    student: ModelConfig
    data: DatasetConfig
    distill: DistillConfig


def _reject_unknown(section: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {', '.join(unknown)}")


def _coerce(value):
    # JSON has no tuples; grid-like fields arrive as lists.
    if isinstance(value, list):
        return tuple(value)
    return value


def _build(cls, section: str, given: dict, extra=None):
    allowed = {f.name for f in fields(cls)}
    _reject_unknown(section, given, allowed)
    kwargs = {key: _coerce(val) for key, val in given.items()}
    if extra:
        kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {section}: {err}") from None


def _model_section(doc: dict, section: str, role: str) -> ModelConfig:
    given = dict(doc.get(section, {}))
    declared = given.pop("role", role)
    if declared != role:
        raise ConfigError(f"{section} must have role {role!r}, got {declared!r}")
    return _build(ModelConfig, section, given, extra={"role": role})


def _distill_section(doc: dict) -> DistillConfig:
    given = dict(doc.get("distill", {}))
    weights_doc = given.pop("weights", None)
    extra = {}
    if weights_doc is not None:
        if not isinstance(weights_doc, dict):
            raise ConfigError("distill.weights must be an object")
        extra["weights"] = _build(LossWeights, "distill.weights", weights_doc)
    return _build(DistillConfig, "distill", given, extra=extra)


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(doc).__name__}")
    _reject_unknown("run config", doc, set(SECTIONS))
    return RunConfig(
        teacher=_model_section(doc, "model_teacher", "teacher"),
        student=_model_section(doc, "model_student", "student"),
        data=_build(DatasetConfig, "data", doc.get("data", {})),
        distill=_distill_section(doc),
    )


def load_run_config(path=None) -> RunConfig:
    """Parse a config file; with no path every section takes its defaults."""
    if path is None:
        return parse_run_config({})
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    return parse_run_config(doc)
