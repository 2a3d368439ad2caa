"""Run configuration: one YAML file per run plus dotted-key overrides."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .data import DatasetSpec, SyntheticStyleSpec
from .networks import NetworkSpec
from .structs import ConfigError, from_dict, to_dict
from .trainer import TrainConfig


@dataclass
class EvalConfig:
    references_per_input: int = 10
    seed: int = 0
    # "random_conv" or a path to a TorchScript feature extractor
    extractor: str = "random_conv"
    # "mean_color", "none" or a path to a TorchScript classifier
    oracle: str = "mean_color"
    batch_size: int = 32
    search_k: int = 5
    interpolation_steps: int = 6
    num_synthetic_test: int = 200

    def validate(self) -> None:
        if self.references_per_input < 1:
            raise ValueError("references_per_input must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.search_k < 1:
            raise ValueError("search_k must be positive")
        if self.interpolation_steps < 2:
            raise ValueError("interpolation_steps must be >= 2")
        if self.num_synthetic_test < 2:
            raise ValueError("num_synthetic_test must be >= 2")


@dataclass
class RunConfig:
    experiment: str = "default"
    out_dir: str = "runs"
    network: NetworkSpec = field(default_factory=NetworkSpec)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    synthetic: SyntheticStyleSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.experiment

    def to_dict(self) -> dict:
        return to_dict(self)


def _line_map(text: str) -> dict[str, int]:
    """Dotted key -> 1-based line number of that key in the YAML source."""
    lines: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    walk(root, "")
    return lines


def _set_dotted(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = data
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError("cannot override inside a non-mapping value", dotted)
        cur = nxt
    cur[parts[-1]] = value


def _validate_section(obj, prefix: str, lines: dict[str, int]) -> None:
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            _validate_section(value, f"{prefix}.{f.name}" if prefix else f.name, lines)
    if not hasattr(obj, "validate"):
        return
    try:
        obj.validate()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        msg = str(exc)
        names = [f.name for f in fields(obj)]
        hits = sorted((m.start(), n) for n in names
                      for m in [re.search(rf"\b{re.escape(n)}\b", msg)] if m)
        key = f"{prefix}.{hits[0][1]}" if hits else prefix
        raise ConfigError(msg, key, lines.get(key, lines.get(prefix))) from None


def build_config(data: dict | None, lines: dict[str, int] | None = None) -> RunConfig:
    lines = lines or {}
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping")
    try:
        cfg = from_dict(RunConfig, data)
    except ConfigError as exc:
        raise ConfigError(exc.message, exc.key, lines.get(exc.key)) from None
    _validate_section(cfg, "", lines)
    res = cfg.network.resolution
    if cfg.data.resolution != res:
        raise ConfigError(f"data.resolution {cfg.data.resolution} differs from network.resolution {res}",
                          "data.resolution", lines.get("data.resolution"))
    if cfg.synthetic is not None and cfg.synthetic.resolution != res:
        raise ConfigError(f"synthetic.resolution {cfg.synthetic.resolution} differs from "
                          f"network.resolution {res}", "synthetic.resolution",
                          lines.get("synthetic.resolution"))
    return cfg


def parse_config(path: str | Path | None = None, overrides: list[str] | tuple = (),
                 seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Read a YAML run config; missing keys take their defaults.

    ``overrides`` are ``dotted.key=value`` strings with YAML-typed values.
    """
    text = Path(path).read_text() if path is not None else ""
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {exc}", "", mark.line + 1 if mark else None) from None
    data = data or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    if seed is not None:
        _set_dotted(data, "train.seed", seed)
    if out_dir is not None:
        data["out_dir"] = out_dir
    return build_config(data, _line_map(text))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def echo_config(cfg: RunConfig, directory: str | Path | None = None) -> Path:
    """Write the effective config next to the run's outputs."""
    out = Path(directory) if directory is not None else cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(dump_config(cfg))
    return path
