"""Run configuration: every stage's parameters plus IO settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .coanalysis import CoParams
from .planes import DetectParams
from .segments import AggParams
from .visibility import VisParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    detect: DetectParams = field(default_factory=DetectParams)
    vis: VisParams = field(default_factory=VisParams)
    agg: AggParams = field(default_factory=AggParams)
    co: CoParams = field(default_factory=CoParams)
    input_dir: Optional[str] = None
    output_dir: Optional[str] = None
    cache_dir: Optional[str] = None
    threads: int = 1
    seed: int = 0
    mesh_density: float = 100.0  # points per m^2 when sampling mesh inputs
    hd_samples: int = 100_000
    label_all_planes: bool = False  # vote on every detected plane, not just the layer
    export_similarity: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "Config":
        data = dict(data)
        kwargs = {}
        try:
            for key, cls in (
                ("detect", DetectParams),
                ("vis", VisParams),
                ("agg", AggParams),
                ("co", CoParams),
            ):
                if key in data:
                    kwargs[key] = cls(**data.pop(key))
            kwargs.update(data)
            return Config(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def load(path) -> "Config":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{Path(path).name}: invalid JSON ({exc})") from exc
        return Config.from_dict(data)

    def with_overrides(self, **kwargs) -> "Config":
        """Apply flat overrides; nested parameter fields use dotted keys
        like ``vis.n_s``."""
        nested: dict = {}
        flat: dict = {}
        for key, value in kwargs.items():
            if value is None:
                continue
            if "." in key:
                group, name = key.split(".", 1)
                nested.setdefault(group, {})[name] = value
            else:
                flat[key] = value
        cfg = self
        for group, fields in nested.items():
            try:
                cfg = replace(cfg, **{group: replace(getattr(cfg, group), **fields)})
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
        try:
            return replace(cfg, **flat)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
