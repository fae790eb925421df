"""Run configuration file: YAML with ``data``, ``model``, ``train``, ``eval`` sections.

Precedence is command-line flag > environment > file > default. Environment
overrides use ``PROTOXFER_<SECTION>__<KEY>``, e.g. ``PROTOXFER_TRAIN__ALPHA=0.2``;
values are parsed as YAML scalars. Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

import yaml

from protoxfer.data import SyntheticSpec
from protoxfer.errors import ConfigError
from protoxfer.transfer import TrainConfig

ENV_PREFIX = "PROTOXFER_"


@dataclass
class DataSection:
    # synthetic spec is used unless target_manifest or target_folder is given
    synthetic: dict = field(default_factory=lambda: SyntheticSpec().to_dict())
    target_manifest: Optional[str] = None
    aux_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    target_folder: Optional[str] = None
    aux_folder: Optional[str] = None
    image_size: int = 224
    split_ratio: float = 0.8
    split_seed: int = 0
    target_fraction: float = 1.0


@dataclass
class ModelSection:
    stage_sizes: Optional[list[int]] = None
    split_stage: int = 3
    hidden_dim_f: int = 256
    proj_dim: int = 128
    disc_hidden: int = 128
    grl_lambda: float = 1.0
    tie_private_init: bool = True


@dataclass
class EvalSection:
    positive_class: int = 1


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def synthetic_spec(self, seed: Optional[int] = None) -> SyntheticSpec:
        spec = dict(self.data.synthetic)
        if seed is not None:
            spec["seed"] = seed
        return SyntheticSpec(**spec)


_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainConfig, "eval": EvalSection}


def _check_keys(section: str, given: dict, cls) -> None:
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def from_dict(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw or {})
    top_allowed = set(_SECTIONS) | {"output_dir"}
    unknown = sorted(set(raw) - top_allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a mapping")
        _check_keys(name, section, cls)
        if name == "data" and "synthetic" in section:
            syn = {**SyntheticSpec().to_dict(), **(section["synthetic"] or {})}
            _check_keys("data.synthetic", syn, SyntheticSpec)
            SyntheticSpec(**syn)
            section["synthetic"] = syn
        try:
            kwargs[name] = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    if "output_dir" in raw:
        kwargs["output_dir"] = str(raw["output_dir"])
    return RunConfig(**kwargs)


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, value in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(value)
    return out


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                environ=None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping")
    raw = deep_merge(raw, env_overrides(environ))
    raw = deep_merge(raw, overrides or {})
    return from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def benchmark_config(**overrides) -> RunConfig:
    """The packaged synthetic benchmark config, optionally with nested overrides."""
    from importlib.resources import files

    raw = yaml.safe_load(files("protoxfer").joinpath("configs/synthetic_benchmark.yaml").read_text())
    return from_dict(deep_merge(raw, overrides))
