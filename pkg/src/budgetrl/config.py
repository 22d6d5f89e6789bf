"""Experiment configuration: strict YAML parsing with line-level diagnostics."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .objective import ObjectiveConfig
from .tasks import GeneratorSpec
from .trainer import Stage, TrainerConfig

SAFE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str
    trainer: TrainerConfig
    stages: list[Stage]
    datasets: list[str] = field(default_factory=list)
    generators: list[GeneratorSpec] = field(default_factory=list)
    output_dir: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_samples: int = 8

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "trainer": self.trainer.to_dict(),
            "stages": [{"name": s.name, "domains": list(s.domains), "steps": s.steps,
                        "max_response_len": s.max_response_len} for s in self.stages],
            "datasets": list(self.datasets),
            "generators": [dataclasses.asdict(g) | {"ops": list(g.ops)} for g in self.generators],
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "eval_samples": self.eval_samples,
        }


_TOP_KEYS = {"name", "trainer", "stages", "datasets", "generators", "output_dir", "seeds", "eval_samples"}
_STAGE_KEYS = {"name", "domains", "steps", "max_response_len"}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _where(node, source: str) -> str:
    return f"{source}:{node.start_mark.line + 1}"


def _check_keys(node, allowed: set[str], context: str, source: str) -> None:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(node, source)}: {context} must be a mapping")
    for key_node, _ in node.value:
        key = key_node.value
        if key not in allowed:
            raise ConfigError(f"{_where(key_node, source)}: unknown key {key!r} in {context} "
                              f"(allowed: {', '.join(sorted(allowed))})")


def _child(node, key: str):
    for k, v in node.value:
        if k.value == key:
            return v
    return None


def _validate_tree(root, source: str) -> None:
    _check_keys(root, _TOP_KEYS, "experiment config", source)
    trainer = _child(root, "trainer")
    if trainer is not None:
        _check_keys(trainer, _field_names(TrainerConfig), "trainer", source)
        obj = _child(trainer, "objective")
        if obj is not None:
            _check_keys(obj, _field_names(ObjectiveConfig), "trainer.objective", source)
    for section, allowed in (("stages", _STAGE_KEYS), ("generators", _field_names(GeneratorSpec))):
        seq = _child(root, section)
        if seq is None:
            continue
        if not isinstance(seq, yaml.SequenceNode):
            raise ConfigError(f"{_where(seq, source)}: {section} must be a list")
        for i, item in enumerate(seq.value):
            _check_keys(item, allowed, f"{section}[{i}]", source)


def _typed(cls, data: dict, context: str):
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    for key, value in data.items():
        t = hints[key]
        if t == "int" and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(f"{context}.{key}: expected an integer, got {value!r}")
        if t == "float" and isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-5) as strings
            try:
                value = data[key] = float(value)
            except ValueError:
                pass
        if t == "float" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ConfigError(f"{context}.{key}: expected a number, got {value!r}")
        if t == "str" and not isinstance(value, str):
            raise ConfigError(f"{context}.{key}: expected a string, got {value!r}")
    try:
        return cls(**{k: (float(v) if hints[k] == "float" else v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def parse_config(data: dict, base_dir: Path, source: str = "<config>") -> ExperimentConfig:
    if "name" not in data or "stages" not in data:
        raise ConfigError(f"{source}: config needs at least 'name' and 'stages'")
    name = data["name"]
    if not isinstance(name, str) or not SAFE_NAME.match(name):
        raise ConfigError(f"{source}: name {name!r} is not filesystem-safe")
    tdata = dict(data.get("trainer") or {})
    obj = _typed(ObjectiveConfig, dict(tdata.pop("objective", {}) or {}), "trainer.objective")
    trainer = _typed(TrainerConfig, tdata, "trainer")
    trainer.objective = obj
    stages = []
    for i, s in enumerate(data["stages"] or []):
        if "name" not in s or "domains" not in s or "steps" not in s:
            raise ConfigError(f"{source}: stages[{i}] needs name, domains and steps")
        domains = s["domains"]
        if isinstance(domains, str):
            domains = [domains]
        if not isinstance(s["steps"], int) or s["steps"] < 1:
            raise ConfigError(f"{source}: stages[{i}].steps must be a positive integer")
        stages.append(Stage(str(s["name"]), tuple(domains), s["steps"], s.get("max_response_len")))
    if not stages:
        raise ConfigError(f"{source}: at least one stage is required")
    datasets = []
    for p in data.get("datasets") or []:
        path = Path(p)
        if not path.is_absolute():
            path = (base_dir / path).resolve()
        datasets.append(str(path))
    generators = []
    for i, g in enumerate(data.get("generators") or []):
        g = dict(g)
        if "ops" in g:
            g["ops"] = tuple(g["ops"])
        generators.append(_typed(GeneratorSpec, g, f"generators[{i}]"))
    if not datasets and not generators:
        raise ConfigError(f"{source}: give at least one dataset path or generator")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(f"{source}: seeds must be a non-empty list of integers")
    return ExperimentConfig(name, trainer, stages, datasets, generators, data.get("output_dir"),
                            list(seeds), int(data.get("eval_samples", 8)))


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a YAML experiment config, or the ``config`` block of a run
    manifest. Unknown keys are fatal."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    source = str(path)
    try:
        root = yaml.compose(text)
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping at the top level")
    if "manifest_version" in data:
        if data["manifest_version"] != MANIFEST_VERSION:
            raise ConfigError(f"{source}: unsupported manifest version {data['manifest_version']!r}")
        root = _child(root, "config")
        data = data["config"]
    _validate_tree(root, source)
    return parse_config(data, path.parent, source)


def manifest(cfg: ExperimentConfig, versions: dict[str, Any]) -> str:
    return json.dumps({"manifest_version": MANIFEST_VERSION, "config": cfg.to_dict(),
                       "versions": versions}, indent=2, sort_keys=True) + "\n"
