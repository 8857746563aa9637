"""Experiment configuration: nested dataclasses loaded strictly from TOML.

Unknown keys anywhere in a config file are an error. A handful of named
presets ship with the package and can be used wherever a path is
accepted (``--config default``).
"""

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

import tomli

from .degrade import DegradationConfig
from .distill import DistillConfig

__all__ = [
    "ConfigError",
    "ScheduleConfig",
    "NetConfig",
    "TargetConfig",
    "PatchConfig",
    "TeacherConfig",
    "FakeConfig",
    "TrainConfig",
    "EvalConfig",
    "AblationConfig",
    "ExperimentConfig",
    "PRESETS",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
]

TASKS = ("oracle_1d", "oracle_2d", "patch_restore")


class ConfigError(ValueError):
    """Raised for unreadable, malformed or inconsistent configuration."""


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    weight_kind: str = "constant"


@dataclass
class NetConfig:
    hidden_dims: tuple = (64, 64)
    activation: str = "silu"
    time_embed_dim: int = 0
    cond_embed_dim: int = 0


@dataclass
class TargetConfig:
    """Gaussian-mixture target for the oracle tasks.

    ``covs`` may hold full matrices or per-component diagonals.
    """

    weights: tuple = (0.5, 0.5)
    means: tuple = ((-0.3, 0.0), (0.3, 0.0))
    covs: tuple = ((0.0025, 0.0025), (0.0025, 0.0025))
    lq_noise: float = 0.1


@dataclass
class PatchConfig:
    size: int = 16
    num_labels: int = 4
    pool_size: int = 4096
    eval_size: int = 512
    corpus: str = ""
    degradation: DegradationConfig = field(default_factory=DegradationConfig)


@dataclass
class TeacherConfig:
    kind: str = "oracle"
    net: NetConfig = field(default_factory=lambda: NetConfig((128, 128), "silu", 16, 0))
    input_scale: float = 1.0
    steps: int = 8000
    batch_size: int = 256
    lr: float = 1e-3
    label_dropout: float = 0.1
    cache_dir: str = ""


@dataclass
class FakeConfig:
    """Fake-score network; ``init="teacher"`` copies (or, in oracle mode,
    pretrains on the target) a teacher-equivalent network."""

    init: str = "teacher"
    net: NetConfig = field(default_factory=lambda: NetConfig((128, 128), "silu", 16, 0))


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr_schedule: str = "cosine"
    lr_floor: float = 0.05
    eval_every: int = 0
    checkpoint_every: int = 0


@dataclass
class EvalConfig:
    samples: int = 10000
    mmd_bandwidth: float = 0.05


@dataclass
class AblationConfig:
    no_score: bool = False
    no_dynamic: bool = False
    no_condition: bool = False
    no_condition_mode: str = "retrain"


@dataclass
class ExperimentConfig:
    task: str = "oracle_2d"
    seed: int = 0
    output_dir: str = "runs/default"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    generator: NetConfig = field(default_factory=lambda: NetConfig((64, 64), "silu", 0, 0))
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    fake: FakeConfig = field(default_factory=FakeConfig)
    distill: DistillConfig = field(
        default_factory=lambda: DistillConfig(
            z_dim=2,
            gen_in_scale=8.0,
            gen_out_scale=0.125,
            fake_in_scale=4.0,
            fake_t_range="dynamic",
            fake_updates=3,
        )
    )
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        validate(self)

    @property
    def is_oracle(self):
        return self.task != "patch_restore"

    def effective_distill(self):
        """Distillation settings with the ablation switches applied."""
        d = self.distill
        changes = {}
        if self.ablation.no_score:
            changes["lam"] = 0.0
        if self.ablation.no_dynamic:
            changes["dynamic"] = False
        if self.ablation.no_condition and self.ablation.no_condition_mode == "retrain":
            changes["null_label"] = True
            changes["null_label_index"] = null_label_index(self)
        return dataclasses.replace(d, **changes) if changes else d

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"train.steps": 10})``."""
        data = config_to_dict(self)
        for path, value in changes.items():
            node = data
            keys = path.split(".")
            for k in keys[:-1]:
                node = node[k]
            if keys[-1] not in node:
                raise ConfigError(f"unknown key {path!r}")
            node[keys[-1]] = value
        return config_from_dict(data)


def num_labels(cfg):
    """Number of distinct condition labels in the data (the null label excluded)."""
    return cfg.patch.num_labels if cfg.task == "patch_restore" else 1


def null_label_index(cfg):
    # networks reserve one extra label slot for the null condition
    return num_labels(cfg) if cfg.task == "patch_restore" else 0


def data_dims(cfg):
    """``(hq_dim, lq_dim)`` of flattened samples."""
    if cfg.task == "patch_restore":
        r = cfg.patch.degradation.downsample_factor
        return cfg.patch.size**2, (cfg.patch.size // r) ** 2
    d = 1 if cfg.task == "oracle_1d" else 2
    return d, d


def validate(cfg):
    if cfg.task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {cfg.task!r}")
    if cfg.teacher.kind not in ("oracle", "network"):
        raise ConfigError("teacher.kind must be 'oracle' or 'network'")
    if cfg.task == "patch_restore" and cfg.teacher.kind == "oracle":
        raise ConfigError("patch_restore has no analytic target; use teacher.kind = 'network'")
    if cfg.fake.init not in ("teacher", "random"):
        raise ConfigError("fake.init must be 'teacher' or 'random'")
    if cfg.train.lr_schedule not in ("constant", "cosine"):
        raise ConfigError("train.lr_schedule must be 'constant' or 'cosine'")
    if cfg.ablation.no_condition_mode not in ("retrain", "eval"):
        raise ConfigError("ablation.no_condition_mode must be 'retrain' or 'eval'")
    if cfg.train.steps < 0 or cfg.train.batch_size < 1:
        raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
    if cfg.eval.samples < 2:
        raise ConfigError("eval.samples must be >= 2")
    if cfg.task == "patch_restore":
        p = cfg.patch
        r = p.degradation.downsample_factor
        if p.size % r or (p.size // r) % 8:
            raise ConfigError("patch.size / downsample_factor must be a multiple of 8")
    else:
        D = data_dims(cfg)[0]
        means = [list(m) if isinstance(m, (list, tuple)) else [m] for m in cfg.target.means]
        if any(len(m) != D for m in means):
            raise ConfigError(f"target means must be {D}-dimensional for {cfg.task}")
    return cfg


# ----------------------------------------------------------------------------
# dict <-> dataclass


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in [{path}]" if path else ""
        raise ConfigError(f"unknown key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints.get(name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, sub)
        else:
            kwargs[name] = _freeze(value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{path or 'config'}]: {exc}") from exc


def config_from_dict(data):
    """Build a config from a (possibly partial) nested dict.

    Missing keys fall back to the experiment defaults, so a ``[distill]``
    table only needs the entries it changes.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a table")
    merged = _merge(config_to_dict(ExperimentConfig()), copy.deepcopy(data))
    return _build(ExperimentConfig, merged, "")


def config_to_dict(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = config_to_dict(value) if dataclasses.is_dataclass(value) else _thaw(value)
    return out


def config_hash(cfg):
    """SHA-256 of the canonical JSON form; stable across key order and formatting.

    Where results are written or cached (``output_dir``, ``teacher.cache_dir``)
    does not change them, so those fields are left out.
    """
    d = config_to_dict(cfg)
    d.pop("output_dir", None)
    d["teacher"].pop("cache_dir", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ----------------------------------------------------------------------------
# presets


def _preset_oracle_1d():
    return {
        "task": "oracle_1d",
        "output_dir": "runs/oracle_1d",
        "target": {"weights": [1.0], "means": [[0.3]], "covs": [[0.0025]], "lq_noise": 0.1},
        "generator": {"hidden_dims": [64, 64], "activation": "silu"},
        "distill": {"z_dim": 1},
    }


def _preset_patch():
    return {
        "task": "patch_restore",
        "output_dir": "runs/patch",
        "generator": {"hidden_dims": [256, 256], "activation": "silu", "cond_embed_dim": 8},
        "teacher": {
            "kind": "network",
            "net": {"hidden_dims": [256, 256], "activation": "silu", "time_embed_dim": 32, "cond_embed_dim": 8},
            "steps": 20000,
            "batch_size": 64,
        },
        "fake": {
            "net": {"hidden_dims": [256, 256], "activation": "silu", "time_embed_dim": 32, "cond_embed_dim": 8},
        },
        "distill": {
            "z_dim": 16,
            "skip": "upsample",
            "skip_factor": 2,
            "gen_in_scale": 1.0,
            "gen_out_scale": 1.0,
            "fake_in_scale": 1.0,
            "fake_updates": 1,
        },
        "train": {"steps": 10000},
        "eval": {"samples": 512},
    }


PRESETS = {
    "default": lambda: {},
    "oracle_2d": lambda: {"output_dir": "runs/oracle_2d"},
    "oracle_1d": _preset_oracle_1d,
    "patch": _preset_patch,
}


def load_config(source, overrides=None):
    """Load a preset name or a TOML file path into an :class:`ExperimentConfig`.

    Raises
    ------
    ConfigError
        If the file is missing or unparsable, or holds unknown keys.
    """
    if isinstance(source, ExperimentConfig):
        cfg = source
    elif source in PRESETS and not os.path.exists(source):
        cfg = config_from_dict(PRESETS[source]())
    else:
        try:
            with open(source, "rb") as fh:
                data = tomli.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {source}") from exc
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
        base = data.pop("preset", None)
        if base is not None:
            if base not in PRESETS:
                raise ConfigError(f"unknown preset {base!r}")
            data = _merge(PRESETS[base](), data)
        cfg = config_from_dict(data)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out
