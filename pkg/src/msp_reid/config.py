"""Run configuration: a YAML file of nested sections plus ``--set a.b=v`` overrides.

Every key is validated; unknown keys are rejected.
"""

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigurationError


@dataclass
class SyntheticSection:
    num_identities: int = 32
    clothes_per_identity: int = 3
    hairstyles_per_identity: int = 3
    images_per_combination: int = 6
    image_size: list[int] = field(default_factory=lambda: [64, 32])
    noise_std: float = 0.03
    seed: int = 0
    num_cameras: int = 3
    num_test_identities: int = 16


@dataclass
class DatasetSection:
    source: str = "synthetic"  # synthetic | directory
    path: Optional[str] = None
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass
class ModelSection:
    backbone: str = "tiny_cnn"
    input_size: list[int] = field(default_factory=lambda: [64, 32])
    embed_dim: int = 64
    rpa_enabled: bool = True
    pretrained: bool = False
    last_stride: int = 1
    gate_scale: str = "unit"  # unit | area


@dataclass
class LossSection:
    lambda_tri: float = 1.0
    lambda_att: float = 1.0
    lambda_cal: float = 0.5
    lambda_neg: float = 1.0
    epsilon: float = 1e-6
    margin: float = 0.3


@dataclass
class CpreSection:
    enabled: bool = True
    keep_min: float = 0.1
    keep_max: float = 0.3
    mode: str = "bernoulli"  # bernoulli | patch
    fill: float = 0.0
    mix: str = "half"  # half | bernoulli
    dilation_radius: Optional[int] = None  # None: 2 px at 384 rows, scaled with image height


@dataclass
class HsoaSection:
    enabled: bool = True
    styles: list[str] = field(default_factory=lambda: ["short", "medium", "long"])
    synthesizer: str = "stub"  # stub | files
    synth_root: Optional[str] = None
    face_tolerance: int = 0


@dataclass
class OptimSection:
    type: str = "adam"
    lr: float = 3.5e-4
    weight_decay: float = 5e-4


@dataclass
class ScheduleSection:
    epochs: int = 60
    milestones: list[int] = field(default_factory=lambda: [20, 40])
    gamma: float = 0.1


@dataclass
class SamplerSection:
    P: int = 4
    K: int = 16
    passes: int = 1  # identity-coverage passes per epoch


@dataclass
class EvalSection:
    every: int = 5
    feature: str = "post_bn"  # post_bn (BNNeck inference convention) | pre_bn
    single_shot_trials: int = 0
    batch_size: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    strict: bool = False
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    cpre: CpreSection = field(default_factory=CpreSection)
    hsoa: HsoaSection = field(default_factory=HsoaSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_hash(self) -> str:
        """Hash of everything that shapes the parameter tensors."""
        blob = json.dumps(self.to_dict()["model"], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_CHOICES = {
    "dataset.source": {"synthetic", "directory"},
    "model.backbone": {"tiny_cnn", "resnet50"},
    "model.gate_scale": {"unit", "area"},
    "cpre.mode": {"bernoulli", "patch"},
    "cpre.mix": {"half", "bernoulli"},
    "hsoa.synthesizer": {"stub", "files"},
    "optim.type": {"adam"},
    "eval.feature": {"pre_bn", "post_bn"},
}


def _coerce(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected a mapping")
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_coerce(v, inner, f"{path}[]") for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigurationError(f"{path}: {value!r} not in {sorted(_CHOICES[path])}")
        return value
    raise ConfigurationError(f"{path}: unsupported type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = prefix or "<root>"
        raise ConfigurationError(f"unknown config keys under {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        path = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(value, hints[name], path)
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> RunConfig:
    c = cfg.cpre
    if not 0 <= c.keep_min <= c.keep_max <= 1:
        raise ConfigurationError(f"cpre keep range [{c.keep_min}, {c.keep_max}] invalid")
    if c.dilation_radius is not None and c.dilation_radius < 0:
        raise ConfigurationError("cpre.dilation_radius must be >= 0")
    if cfg.sampler.P < 1 or cfg.sampler.K < 1 or cfg.sampler.passes < 1:
        raise ConfigurationError("sampler.P, sampler.K and sampler.passes must be >= 1")
    if cfg.schedule.epochs < 1 or cfg.eval.every < 1:
        raise ConfigurationError("schedule.epochs and eval.every must be >= 1")
    if len(cfg.model.input_size) != 2 or len(cfg.dataset.synthetic.image_size) != 2:
        raise ConfigurationError("sizes must be [height, width]")
    if cfg.dataset.source == "directory" and not cfg.dataset.path:
        raise ConfigurationError("dataset.path is required for a directory source")
    if cfg.hsoa.synthesizer == "files" and not cfg.hsoa.synth_root:
        raise ConfigurationError("hsoa.synth_root is required for the files synthesizer")
    for name in ("lambda_tri", "lambda_att", "lambda_cal", "lambda_neg", "margin"):
        if getattr(cfg.loss, name) < 0:
            raise ConfigurationError(f"loss.{name} must be >= 0")
    if cfg.loss.epsilon <= 0:
        raise ConfigurationError("loss.epsilon must be > 0")
    from .structures import HairstyleLabel

    for s in cfg.hsoa.styles:
        try:
            style = HairstyleLabel.parse(s)
        except (KeyError, ValueError):
            raise ConfigurationError(f"hsoa.styles: unknown style {s!r}") from None
        if style is HairstyleLabel.ORIGINAL:
            raise ConfigurationError("hsoa.styles cannot contain 'original'")
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    return _validate(_build(RunConfig, data or {}))


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: Optional[str | Path] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
    return config_from_dict(apply_overrides(data, overrides or []))


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# Ablation rows: which of HSOA / CPRE / RPA are on.
ABLATION_PRESETS = {
    "baseline": (False, False, False),
    "hsoa": (True, False, False),
    "cpre": (False, True, False),
    "rpa": (False, False, True),
    "hsoa_cpre": (True, True, False),
    "hsoa_rpa": (True, False, True),
    "cpre_rpa": (False, True, True),
    "msp": (True, True, True),
}


def ablation_overrides(preset: str) -> list[str]:
    if preset not in ABLATION_PRESETS:
        raise ConfigurationError(f"unknown ablation preset {preset!r}")
    hsoa, cpre, rpa = ABLATION_PRESETS[preset]
    return [f"hsoa.enabled={str(hsoa).lower()}", f"cpre.enabled={str(cpre).lower()}",
            f"model.rpa_enabled={str(rpa).lower()}"]
