"""Experiment configuration: a flat, typed key-value text format.

Grammar (one statement per line)::

    # comment                    ignored, as are blank lines
    [section]                    following keys belong to ``section``
    key = <json value>           number, "string", true/false, null, [array]
    section.key = <json value>   dotted keys work anywhere

Every key must exist in the schema below; unknown keys are rejected with
their full dotted path. Values are type-checked against the field type.
"""

from __future__ import annotations

import json
import types
import typing
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError


@dataclass
class DatasetSpec:
    kind: str = "gaussian"  # gaussian | gmm | phantom | file | frames
    n: int = 10_000
    seed: Optional[int] = None
    dim: int = 16
    mean: Optional[list] = None
    variances: Optional[Union[float, list]] = None
    cov: Optional[list] = None
    weights: Optional[list] = None
    means: Optional[list] = None
    covs: Optional[list] = None
    path: str = ""
    size: int = 16
    sector_angle: float = 75.0
    apex: list = field(default_factory=lambda: [0.5, 0.02])
    grain: float = 0.6
    smoothness: float = 3.0
    intensity_weights: list = field(default_factory=lambda: [0.35, 0.4, 0.25])
    intensity_means: list = field(default_factory=lambda: [0.2, 0.5, 0.8])
    intensity_variances: list = field(default_factory=lambda: [0.004, 0.006, 0.003])
    structure_seed: int = 0
    background: float = 0.0
    frame_stride: int = 5
    resize: list = field(default_factory=lambda: [64, 64])


@dataclass
class ModelSpec:
    kind: str = "shifted"  # analytic | shifted | fitted_gaussian | neural
    shift: Union[float, list] = 0.0
    checkpoint: str = ""
    sigma_data: float = 0.5


@dataclass
class ScheduleSpec:
    kind: str = "edm"
    sigma_min: Optional[float] = None
    sigma_max: Optional[float] = None
    rho: float = 7.0
    vp_beta_d: float = 19.9
    vp_beta_min: float = 0.1


@dataclass
class SamplerSpec:
    method: str = "heun"
    steps: int = 18
    n: int = 10_000
    step_list: list = field(default_factory=lambda: [2, 5, 10, 50])


@dataclass
class GuidanceSpec:
    enabled: bool = False
    weight_first_order: float = 5.0
    weight_correction: float = 0.0
    dg_scale: float = 2.0
    discriminator: str = "analytic"  # or a checkpoint path


@dataclass
class MetricSpec:
    extractor: str = "raw_pixels"
    downsample: int = 1
    dim: int = 64
    feature_seed: int = 0
    n: int = 10_000
    pin_subsample: bool = True
    split_seed: int = 0
    mode: str = "vary_real"
    repeats: int = 10
    sub_seeds: Optional[list] = None
    generated: str = ""


@dataclass
class TrainingSpec:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 512
    dropout: float = 0.05
    hidden: list = field(default_factory=lambda: [64, 64])
    generated: str = ""
    select_epoch: bool = False
    selection_n: int = 2000


@dataclass
class ShiftSpec:
    classifiers: list = field(default_factory=lambda: ["linear"])
    augment: list = field(default_factory=lambda: [False])
    epochs: int = 50
    lr: float = 1e-4
    split: float = 0.9
    n_real: int = 10_000
    n_gen: int = 10_000
    seeds: list = field(default_factory=lambda: [0])
    batch_size: int = 64


@dataclass
class ReportSpec:
    runs: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    seed: int = 0
    output: str = ""
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    metric: MetricSpec = field(default_factory=MetricSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    report: ReportSpec = field(default_factory=ReportSpec)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse the key-value text into a nested dict (no schema checks)."""
    out: dict = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]") or not line[1:-1].strip():
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        path = f"{section}.{key}" if section else key
        try:
            parsed = json.loads(_strip_comment(value.strip()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{where}: cannot parse value for {path}: {exc.msg}") from exc
        node = out
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{where}: {p} is both a value and a section")
        if leaf in node:
            raise ConfigError(f"{where}: duplicate key {path}")
        node[leaf] = parsed
    return out


def _strip_comment(value: str) -> str:
    in_str = False
    for i, ch in enumerate(value):
        if ch == '"' and (i == 0 or value[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return value[:i].strip()
    return value


def _type_ok(value, tp) -> bool:
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        return any(_type_ok(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    if tp is list or origin is list:
        return isinstance(value, list)
    return isinstance(value, tp)


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        tp, value = hints[f.name], data[f.name]
        if is_dataclass(tp):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{f.name} must be a section")
            kwargs[f.name] = _build(tp, value, f"{prefix}{f.name}.")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"unknown config section {prefix}{f.name}")
            if not _type_ok(value, tp):
                raise ConfigError(f"{prefix}{f.name}: value {value!r} has the wrong type")
            if tp is float or (typing.get_origin(tp) is Union and float in typing.get_args(tp)):
                value = float(value) if isinstance(value, int) else value
            kwargs[f.name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(parse_text(text, str(path)))


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialise back to the text format (round-trips through load)."""
    lines = []
    top = {k: v for k, v in cfg.to_dict().items() if not isinstance(v, dict)}
    for k, v in top.items():
        lines.append(f"{k} = {json.dumps(v)}")
    for k, v in cfg.to_dict().items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines.extend(f"{kk} = {json.dumps(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"


_CHOICES = {
    "dataset.kind": ("gaussian", "gmm", "phantom", "file", "frames"),
    "model.kind": ("analytic", "shifted", "fitted_gaussian", "neural"),
    "schedule.kind": ("edm", "vp", "ve"),
    "sampler.method": ("heun", "euler"),
    "metric.extractor": ("raw_pixels", "random_projection", "random_conv"),
    "metric.mode": ("vary_real", "vary_generated"),
}

_POSITIVE = (
    "dataset.n", "dataset.dim", "dataset.size", "dataset.frame_stride", "sampler.steps", "sampler.n",
    "metric.n", "metric.downsample", "metric.dim", "training.epochs", "training.batch_size",
    "shift.epochs", "shift.n_real", "shift.n_gen", "shift.batch_size", "training.selection_n",
)


def _get(cfg, path):
    obj = cfg
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def validate(cfg: ExperimentConfig) -> None:
    for path, choices in _CHOICES.items():
        if _get(cfg, path) not in choices:
            raise ConfigError(f"{path} must be one of {choices}, got {_get(cfg, path)!r}")
    for path in _POSITIVE:
        if _get(cfg, path) < 1:
            raise ConfigError(f"{path} must be >= 1, got {_get(cfg, path)}")
    if cfg.metric.repeats < 2:
        raise ConfigError("metric.repeats must be >= 2")
    if not 0.0 <= cfg.training.dropout < 1.0:
        raise ConfigError("training.dropout must lie in [0, 1)")
    if not 0.0 < cfg.shift.split < 1.0:
        raise ConfigError("shift.split must lie in (0, 1)")
    for s in cfg.sampler.step_list:
        if not isinstance(s, int) or isinstance(s, bool) or s < 1:
            raise ConfigError(f"sampler.step_list entries must be positive integers, got {s!r}")
    for name in ("weight_first_order", "weight_correction", "dg_scale"):
        if getattr(cfg.guidance, name) < 0:
            raise ConfigError(f"guidance.{name} must be non-negative")
    if cfg.model.kind == "neural" and not cfg.model.checkpoint:
        raise ConfigError("model.checkpoint is required when model.kind = \"neural\"")
    if cfg.dataset.kind in ("file", "frames") and not cfg.dataset.path:
        raise ConfigError(f"dataset.path is required when dataset.kind = {cfg.dataset.kind!r}")


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit sub-seed for a named purpose."""
    state = np.random.SeedSequence([master % 2**63, zlib.crc32(label.encode())]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1] >> 1)
