"""Run configuration: YAML file plus ``section.key value`` command-line overrides."""
from __future__ import annotations

import ast
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import yaml

from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainSection:
    optim: str = "adam"
    lr: float = 2.5e-4
    milestones: tuple = (60, 80, 100, 150)
    gamma: float = 0.5
    batch_size: int = 1
    dataset: str = "eoeTrain"
    num_workers: int = 1
    epoch: int = 200
    weight_decay: float = 0.0


@dataclass
class TestSection:
    dataset: str = "eoeTest"
    batch_size: int = 1
    epoch: int = -1


@dataclass
class RunConfig:
    model: str = "coco"
    network: str = "small_hourglass"
    task: str = "circle_snake"
    resume: bool = False
    gpus: tuple = (0,)
    train: TrainSection = field(default_factory=TrainSection)
    test: TestSection = field(default_factory=TestSection)
    val_dataset: str = "eoeVal"
    heads: dict = field(default_factory=lambda: {"ct_hm": 4, "radius": 1, "reg": 2})
    segm_or_bbox: str = "segm"
    ct_score: float = 0.05
    save_ep: int = 5
    eval_ep: int = 5
    select_by: str = "ap50"
    per_class_metric: str = "ap"
    top_n: int = 100
    num_vertices: int = 128
    deform_iters: int = 3
    down_ratio: int = 4
    backbone_widths: tuple = (32, 64, 128)
    head_conv: int = 32
    snake_width: int = 128
    lambda_radius: float = 0.1
    lambda_off: float = 1.0
    lambda_iter: float = 1.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    proposal_jitter: float = 0.1
    seed: int = 0
    dataset_catalog: str = "datasets.json"
    model_dir: str = "model"
    result_dir: str = "result"
    tile_size: int = 512
    tile_overlap: int = 256
    downsample: int = 1
    split_ratios: tuple = (7, 1, 2)
    min_retained_fraction: float = 0.3
    pretrain: str = ""
    debug_train: bool = False
    debug_test: bool = False
    dice: bool = False
    save_images: bool = False
    rotate_reproduce: bool = False
    config_dir: str = field(default=".", metadata={"serialize": False})

    def validate(self) -> None:
        if self.save_ep < 1 or self.eval_ep < 1:
            raise ConfigError("save_ep and eval_ep must be >= 1")
        if self.segm_or_bbox not in ("segm", "bbox"):
            raise ConfigError("segm_or_bbox must be 'segm' or 'bbox'")
        if self.select_by not in ("ap50", "loss"):
            raise ConfigError("select_by must be 'ap50' or 'loss'")
        if self.train.optim != "adam":
            raise ConfigError(f"unsupported optimizer {self.train.optim!r}")
        if self.downsample != 1:
            raise ConfigError("only downsample 1 is supported")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.heads.get("ct_hm", 4), heads=dict(self.heads),
            num_vertices=self.num_vertices, deform_iters=self.deform_iters,
            down_ratio=self.down_ratio, backbone_widths=self.backbone_widths,
            head_conv=self.head_conv, snake_width=self.snake_width, ct_score=self.ct_score,
            top_n=self.top_n, lambda_radius=self.lambda_radius, lambda_off=self.lambda_off,
            focal_alpha=self.focal_alpha, focal_beta=self.focal_beta,
            lambda_iter=self.lambda_iter, proposal_jitter=self.proposal_jitter,
            lr=self.train.lr, weight_decay=self.train.weight_decay,
            milestones=self.train.milestones, gamma=self.train.gamma,
            epochs=self.train.epoch, batch_size=self.train.batch_size, seed=self.seed)

    def path(self, p: str) -> str:
        """Resolve ``p`` against the directory of the config file."""
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.config_dir, p))

    @property
    def eval_mode(self) -> str:
        return "segm" if self.segm_or_bbox == "segm" else "circle"


_SECTIONS = {"train": TrainSection, "test": TestSection}


def _parse_scalar(text: Any) -> Any:
    if not isinstance(text, str):
        return text
    s = text.strip()
    if s.startswith("(") and s.endswith(")"):
        try:
            return tuple(ast.literal_eval(s))
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"cannot parse tuple {text!r}") from exc
    return text


def _coerce(name: str, value: Any, default: Any) -> Any:
    value = _parse_scalar(value)
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        if isinstance(value, (int, float)):
            return (value,)
        raise ConfigError(f"{name}: expected a tuple, got {value!r}")
    if isinstance(default, dict):
        if isinstance(value, str):
            try:
                value = ast.literal_eval(value)
            except (ValueError, SyntaxError) as exc:
                raise ConfigError(f"{name}: cannot parse mapping {value!r}") from exc
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected a mapping, got {value!r}")
        return dict(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{name}: expected a number, got {value!r}") from exc
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError as exc:
                raise ConfigError(f"{name}: expected an integer, got {value!r}") from exc
        if not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    return "" if value is None else str(value)


def _apply(cfg: RunConfig, key: str, value: Any) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        name = parts[0]
        if name in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            for k, v in value.items():
                _apply(cfg, f"{name}.{k}", v)
            return
        fields = {f.name: f for f in dataclasses.fields(RunConfig)
                  if f.metadata.get("serialize", True)}
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, name, _coerce(key, value, getattr(cfg, name)))
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        section = getattr(cfg, parts[0])
        names = {f.name for f in dataclasses.fields(section)}
        if parts[1] not in names:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, parts[1], _coerce(key, value, getattr(section, parts[1])))
    else:
        raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str, config_dir: str = ".") -> RunConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    cfg = RunConfig(config_dir=config_dir)
    for k, v in data.items():
        _apply(cfg, str(k), v)
    return cfg


def apply_overrides(cfg: RunConfig, tokens: Sequence[str]) -> RunConfig:
    """Apply trailing ``key value`` pairs, e.g. ``train.batch_size 16``."""
    if len(tokens) % 2:
        raise ConfigError(f"overrides must come in key/value pairs, got {list(tokens)}")
    for key, raw in zip(tokens[::2], tokens[1::2]):
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        _apply(cfg, key, value)
    return cfg


def load_config(path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        with open(path) as fh:
            cfg = parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))
    apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        inner = ", ".join(_fmt(v) for v in value)
        return f"({inner},)" if len(value) == 1 else f"({inner})"
    if isinstance(value, dict):
        return "{" + ", ".join(f"'{k}': {_fmt(v)}" for k, v in value.items()) + "}"
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    return repr(value)


def dump_config(cfg: RunConfig) -> str:
    """Serialize in the same YAML subset :func:`parse_config` reads."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        if not f.metadata.get("serialize", True):
            continue
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            lines.append(f"{f.name}:")
            for sf in dataclasses.fields(value):
                lines.append(f"    {sf.name}: {_fmt(getattr(value, sf.name))}")
        else:
            lines.append(f"{f.name}: {_fmt(value)}")
    return "\n".join(lines) + "\n"
