"""Experiment configuration: YAML in, validated dataclasses out."""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import EYEPACS_LIKE_8, LabeledSamples, SkewSpec, generate_skewed, ingest
from .errors import ConfigError, ICLError
from .losses import LossConfig
from .model import BackboneSpec
from .trainer import LEARNERS, VARIANTS, TrainPlan

__all__ = ["DataConfig", "ModelConfig", "ExperimentConfig", "load_config", "template"]


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | folder | table
    path: str | None = None
    label_column: str = "label"
    delimiter: str = ","
    class_proportions: list[float] = field(default_factory=lambda: list(EYEPACS_LIKE_8))
    total_samples: int = 4000
    feature_dim: int = 16
    image_shape: list[int] | None = None
    difficulty: float = 2.0
    modes_per_class: int = 2
    data_seed: int = 0
    initial_classes: int = 4
    per_step: int = 1
    test_fraction: float = 0.2
    split_seed: int = 0

    def load(self, memory_budget: int) -> LabeledSamples:
        if self.source == "synthetic":
            spec = SkewSpec(
                class_proportions=tuple(self.class_proportions),
                total_samples=self.total_samples,
                feature_dim=self.feature_dim,
                image_shape=tuple(self.image_shape) if self.image_shape else None,
                difficulty=self.difficulty,
                modes_per_class=self.modes_per_class,
                budget=memory_budget,
            )
            return generate_skewed(spec, seed=self.data_seed)
        fmt = {"format": self.source, "label_column": self.label_column, "delimiter": self.delimiter}
        return ingest(self.path, fmt)


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    split: int = 1
    d: int = 16
    branch_init: str = "copy"
    init_temperature: float = 1.0

    def backbone(self, input_shape) -> BackboneSpec:
        return BackboneSpec(
            input_shape=tuple(input_shape),
            kind=self.kind,
            hidden=tuple(self.hidden),
            split=self.split,
            d=self.d,
            branch_init=self.branch_init,
        )


_TRAIN_FIELDS = [f for f in dataclasses.fields(TrainPlan) if f.name not in ("seed", "loss")]


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    learner: str = "proposed"
    variant: str = "full"
    out: str = "runs/experiment"

    def plan(self, seed: int) -> TrainPlan:
        return TrainPlan(seed=seed, loss=self.loss, **self.train)

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": {f.name: self.train.get(f.name, f.default) for f in _TRAIN_FIELDS},
            "loss": asdict(self.loss),
            "seeds": list(self.seeds),
            "learner": self.learner,
            "variant": self.variant,
            "out": self.out,
        }

    def with_overrides(self, *, seeds=None, out=None, learner=None, variant=None) -> "ExperimentConfig":
        raw = self.to_dict()
        for key, value in (("seeds", seeds), ("out", out), ("learner", learner), ("variant", variant)):
            if value is not None:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)

    def check_output_writable(self) -> Path:
        out = Path(self.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError("out", f"cannot create {out}: {exc.strerror}") from exc
        if not os.access(out, os.W_OK):
            raise ConfigError("out", f"{out} is not writable")
        return out

    @classmethod
    def from_dict(cls, raw: Any) -> "ExperimentConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(str(key), "unknown key")
        data = _section(DataConfig, raw.get("data"), "data")
        if data.source not in ("synthetic", "folder", "table"):
            raise ConfigError("data.source", f"expected synthetic, folder or table, got {data.source!r}")
        if data.source != "synthetic" and not data.path:
            raise ConfigError("data.path", f"required when data.source is {data.source!r}")
        if data.initial_classes < 1 or data.per_step < 1:
            raise ConfigError("data.initial_classes" if data.initial_classes < 1 else "data.per_step", "must be >= 1")
        if not 0 < data.test_fraction < 1:
            raise ConfigError("data.test_fraction", "must lie in (0, 1)")
        model = _section(ModelConfig, raw.get("model"), "model")
        if not model.init_temperature > 0:
            raise ConfigError("model.init_temperature", "must be > 0")
        _build(lambda: model.backbone((1, 8, 8) if model.kind == "conv" else (1,)), "model", asdict(model))
        loss = _section(LossConfig, raw.get("loss"), "loss")
        train_raw = raw.get("train") or {}
        if not isinstance(train_raw, dict):
            raise ConfigError("train", "must be a mapping")
        train = {}
        for f in _TRAIN_FIELDS:
            if f.name in train_raw:
                train[f.name] = _coerce(train_raw[f.name], f.default, f"train.{f.name}")
        for key in train_raw:
            if key not in train:
                raise ConfigError(f"train.{key}", "unknown key")
        _build(lambda: TrainPlan(seed=0, loss=loss, **train), "train", train)
        seeds = raw.get("seeds", [0, 1, 2])
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            seeds = [seeds]
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("seeds", "need a non-empty list of integers")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds", "seeds must be integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds", "duplicate seeds")
        learner = raw.get("learner", "proposed")
        if learner not in LEARNERS:
            raise ConfigError("learner", f"unknown learner {learner!r}; expected one of {list(LEARNERS)}")
        variant = raw.get("variant", "full")
        if variant not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
        out = raw.get("out", "runs/experiment")
        if not isinstance(out, str) or not out:
            raise ConfigError("out", "must be a non-empty path string")
        return cls(data, model, train, loss, seeds, learner, variant, out)


def _coerce(value, default, name: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return list(value)
    return value


def _section(cls, raw, name: str):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if default is None and key == "image_shape" and value is not None:
            default = []
        if default is None and key == "grad_clip" and value is not None:
            default = 0.0
        kwargs[key] = _coerce(value, default, f"{name}.{key}")
    return _build(lambda: cls(**kwargs), name, kwargs)


def _build(factory, section: str, keys):
    try:
        return factory()
    except ICLError as exc:
        raise ConfigError(_guess_field(section, str(exc), keys), str(exc)) from exc


def _guess_field(section: str, message: str, keys) -> str:
    for key in sorted(keys, key=len, reverse=True):
        if re.search(rf"\b{re.escape(key)}\b", message):
            return f"{section}.{key}"
    return section


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"invalid YAML: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


_COMMENTS = {
    "data": "Dataset source and incremental protocol.",
    "data.source": "synthetic | folder (class sub-folders) | table (delimited text)",
    "data.path": "dataset root or table file; unused for synthetic",
    "data.label_column": "table only",
    "data.delimiter": "table only",
    "data.class_proportions": "synthetic only; must sum to 1",
    "data.image_shape": "synthetic only; e.g. [1, 16, 16] for images, null for vectors",
    "data.difficulty": "within-class noise scale; higher means more class overlap",
    "data.data_seed": "seed of the synthetic generator (fixed across run seeds)",
    "data.initial_classes": "classes in the first step",
    "data.per_step": "classes added at every later step",
    "data.split_seed": "per-class train/test split seed (fixed across run seeds)",
    "model": "Backbone: the first `split` hidden layers are shared, the rest form each branch.",
    "model.kind": "mlp | conv",
    "model.d": "output dimension of each branch",
    "model.branch_init": "copy (previous branch) | random",
    "train": "Optimisation; one epoch is one NEW pass plus one OLD pass.",
    "train.lr": "initial learning rate, cosine-decayed to lr_min",
    "train.alternation": "epoch | batch",
    "train.grad_clip": "null disables gradient-norm clipping",
    "train.augment": "flip and padded crop; image inputs only",
    "train.memory_budget": "exemplars kept per old class",
    "loss": "Loss weights and class-balancing parameters.",
    "loss.lambda1": "auxiliary term",
    "loss.lambda2": "distillation, NEW objective",
    "loss.lambda3": "margin, NEW objective",
    "loss.lambda4": "distillation, OLD objective",
    "loss.lambda5": "margin, OLD objective",
    "loss.top_k": "hardest new classes in the margin term",
    "seeds": "one run per seed; each seed fixes class order and initialisation",
    "learner": " | ".join(LEARNERS),
    "variant": " | ".join(VARIANTS),
    "out": "run directory",
}


def template() -> str:
    """Default configuration as commented YAML."""
    lines = ["# iclkit experiment configuration. Omitted keys take the values shown here."]
    for key, value in ExperimentConfig().to_dict().items():
        if isinstance(value, dict):
            lines.append("")
            if key in _COMMENTS:
                lines.append(f"# {_COMMENTS[key]}")
            lines.append(f"{key}:")
            for sub, v in value.items():
                line = f"  {sub}: {_dump(v)}"
                note = _COMMENTS.get(f"{key}.{sub}")
                lines.append(f"{line}  # {note}" if note else line)
        else:
            line = f"{key}: {_dump(value)}"
            note = _COMMENTS.get(key)
            lines.append(f"{line}  # {note}" if note else line)
    return "\n".join(lines) + "\n"


def _dump(value) -> str:
    return yaml.safe_dump(value, default_flow_style=True, width=1000).strip().removesuffix("\n...").strip()
