"""Experiment configuration: schema, JSON round-trip, dotted overrides, defaults."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LambdaSet

VARIANTS = ("fcn", "cyclegan_translate", "stargan_translate", "sgan_s", "uncond", "in_cond", "out_cond")
DA_VARIANTS = ("sgan_s", "uncond", "in_cond", "out_cond")
DECAY_INTERVALS = ("per_epoch", "per_n_iterations", "none")


class ConfigError(ValueError):
    """Schema violation in a config file or override."""


@dataclass
class OptimSpec:
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    decay_factor: float = 0.995
    decay_interval: str = "per_n_iterations"
    decay_iterations: int = 1500

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.decay_interval not in DECAY_INTERVALS:
            raise ConfigError(f"decay_interval must be one of {DECAY_INTERVALS}")
        if self.decay_interval == "per_n_iterations" and self.decay_iterations < 1:
            raise ConfigError("decay_iterations must be >= 1")


@dataclass
class ExperimentConfig:
    variant: str
    source: str = "mnist_thin"
    target: str | None = "mnist_m"
    resolution: int = 64
    image_channels: int = 3
    lambdas: LambdaSet = field(default_factory=LambdaSet)
    optimizer: dict[str, OptimSpec] = field(default_factory=dict)
    batch_size: int = 32
    max_epochs: int = 500
    max_iterations: int | None = None
    patience: int = 50
    d_steps_per_g_step: int = 5
    dropout: float = 0.2
    seed: int = 0
    output_dir: str = "runs/default"
    data_root: str | None = None
    dataset_seed: int = 0
    train_limit: int | None = None
    val_limit: int | None = None
    test_limit: int | None = None
    target_limit: int | None = None
    sample_every: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.resolution % 16:
            raise ConfigError("resolution must be divisible by 16")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        _reject_unknown(data, cls, "")
        for key in ("lambdas", "optimizer"):
            if not isinstance(data.get(key, {}), dict):
                raise ConfigError(f"{key} must be an object")
        _check_scalar_types(data, cls, "")
        try:
            lambdas = LambdaSet(**data.pop("lambdas", {}))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        optim = {}
        for group, spec in data.pop("optimizer", {}).items():
            if not isinstance(spec, dict):
                raise ConfigError(f"optimizer.{group} must be an object")
            _reject_unknown(spec, OptimSpec, f"optimizer.{group}.")
            _check_scalar_types(spec, OptimSpec, f"optimizer.{group}.")
            optim[group] = OptimSpec(**spec)
        try:
            return cls(lambdas=lambdas, optimizer=optim, **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(apply_overrides(data, overrides or []))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())


def _reject_unknown(data: dict, schema, prefix: str) -> None:
    allowed = {f.name for f in dataclasses.fields(schema)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
    if schema is ExperimentConfig and isinstance(data.get("lambdas"), dict):
        _reject_unknown(data["lambdas"], LambdaSet, "lambdas.")


_SCALARS = {"int": (int,), "float": (int, float), "str": (str,)}


def _check_scalar_types(data: dict, schema, prefix: str) -> None:
    """Reject values whose JSON type does not fit a scalar field's annotation."""
    for f in dataclasses.fields(schema):
        if f.name not in data:
            continue
        options = [t.strip() for t in str(f.type).split("|")]
        value = data[f.name]
        if value is None and "None" in options:
            continue
        allowed = tuple(t for o in options for t in _SCALARS.get(o, ()))
        if not allowed or not all(o in _SCALARS or o == "None" for o in options):
            continue
        if isinstance(value, bool) or not isinstance(value, allowed):
            raise ConfigError(f"{prefix}{f.name} must be {' or '.join(options)}, got {value!r}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are JSON-decoded when possible.

    Every path must already exist in the config (optimizer groups excepted:
    a new group may be created), so typos fail loudly.
    """
    data = copy.deepcopy(data)
    defaults = ExperimentConfig(variant=data.get("variant", "fcn"), patience=0).to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node, ref = data, defaults
        for i, part in enumerate(parts[:-1]):
            in_optim = i == 1 and parts[0] == "optimizer"
            if not in_optim and (not isinstance(ref, dict) or part not in ref):
                raise ConfigError(f"unknown config key {key!r}")
            node = node.setdefault(part, {})
            ref = ref.get(part, {}) if not in_optim else dataclasses.asdict(OptimSpec())
        leaf = parts[-1]
        if not isinstance(ref, dict) or leaf not in ref:
            if not (parts[0] == "optimizer" and len(parts) == 2):
                raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = _parse_value(raw)
    return data


@dataclass
class DataConfig:
    """Which synthetic datasets to materialize, and where."""

    datasets: list[str] = field(default_factory=lambda: ["mnist", "mnist_m", "mnist_thin"])
    resolution: int = 64
    seed: int = 0
    data_root: str | None = None
    limit: int | None = None
    mnist_root: str | None = None
    bsds_root: str | None = None

    def __post_init__(self):
        from .data import DATASETS

        unknown = [d for d in self.datasets if d not in DATASETS]
        if unknown:
            raise ConfigError(f"unknown dataset(s) {unknown}; expected {DATASETS}")

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        _reject_unknown(data, cls, "")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def load_any(path: str | Path, overrides: list[str] | None = None) -> "ExperimentConfig | DataConfig":
    """Parse a config file as an experiment (has ``variant``) or a dataset config."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if "variant" in data:
        return ExperimentConfig.from_dict(apply_overrides(data, overrides or []))
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or key not in {f.name for f in dataclasses.fields(DataConfig)}:
            raise ConfigError(f"unknown config key {key!r}")
        data[key] = _parse_value(raw)
    return DataConfig.from_dict(data)


# --------------------------------------------------------------------------- defaults

def _da_optim() -> dict[str, OptimSpec]:
    spec = OptimSpec(1e-4, 0.5, 0.999, 0.995, "per_n_iterations", 1500)
    return {"generator": spec, "critic": spec, "feature_critic": spec}


_GP = {"out_cond": 2.0, "sgan_s": 10.0, "uncond": 5.0, "in_cond": 1.0}


def default_config(name: str, output_root: str = "runs") -> ExperimentConfig:
    """Reference hyper-parameters for one experiment (``fcn_target`` is the target upper bound)."""
    if name in ("fcn", "fcn_target"):
        src = "mnist_thin" if name == "fcn" else "mnist_m"
        return ExperimentConfig(
            variant="fcn", source=src, target="mnist_m", batch_size=32, max_epochs=500,
            patience=50, d_steps_per_g_step=1, dropout=0.2,
            lambdas=LambdaSet(rf=0.0, dom=0.0, cyc=0.0, segm=1.0, dom_f=0.0, gp=0.0),
            optimizer={"segmenter": OptimSpec(1e-3, 0.9, 0.999, 0.995, "per_epoch")},
            output_dir=f"{output_root}/{name}")
    if name == "cyclegan_translate":
        return ExperimentConfig(
            variant=name, source="mnist", target="mnist_m", batch_size=1, max_epochs=200,
            patience=200, d_steps_per_g_step=1, dropout=0.0,
            lambdas=LambdaSet(rf=1.0, dom=0.0, cyc=10.0, segm=0.0, dom_f=0.0, gp=0.0),
            optimizer={g: OptimSpec(2e-4, 0.5, 0.999, 1.0, "none")
                       for g in ("generator", "critic")},
            sample_every=1000, output_dir=f"{output_root}/{name}")
    if name == "stargan_translate":
        return ExperimentConfig(
            variant=name, source="mnist", target="mnist_m", batch_size=32, max_epochs=500,
            max_iterations=200_000, patience=500, d_steps_per_g_step=5, dropout=0.0,
            lambdas=LambdaSet(rf=1.0, dom=1.0, cyc=10.0, segm=0.0, dom_f=0.0, gp=10.0),
            optimizer={g: OptimSpec(1e-4, 0.5, 0.999, 1.0, "none") for g in ("generator", "critic")},
            sample_every=1000, output_dir=f"{output_root}/{name}")
    if name in DA_VARIANTS:
        return ExperimentConfig(
            variant=name, source="mnist_thin", target="mnist_m", batch_size=32, max_epochs=500,
            patience=50, d_steps_per_g_step=5, dropout=0.2,
            lambdas=LambdaSet(rf=1.0, dom=1.0, cyc=10.0, segm=10.0, dom_f=1.0, gp=_GP[name]),
            optimizer=_da_optim(), output_dir=f"{output_root}/{name}")
    raise ConfigError(f"no default config named {name!r}")


def smoke_config(name: str, output_root: str = "runs") -> ExperimentConfig:
    """Tiny-subset variant of :func:`default_config` that finishes in minutes on a CPU."""
    cfg = default_config(name, output_root)
    cfg.output_dir = f"{output_root}/smoke_{name}"
    cfg.train_limit, cfg.val_limit, cfg.test_limit, cfg.target_limit = 128, 64, 256, 128
    cfg.batch_size = 16 if cfg.variant != "cyclegan_translate" else 4
    cfg.max_epochs, cfg.patience = 2, 2
    if cfg.max_iterations is not None:
        cfg.max_iterations = 40
    cfg.sample_every = 0
    for spec in cfg.optimizer.values():
        if spec.decay_interval == "per_n_iterations":
            spec.decay_iterations = 10
    return cfg


DEFAULT_NAMES = ("fcn", "fcn_target", "cyclegan_translate", "stargan_translate",
                 "sgan_s", "uncond", "in_cond", "out_cond")


def emit_default_configs(directory: str | Path, output_root: str = "runs") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("mnist", "mnist_m", "mnist_thin"):
        path = directory / f"data_{name}.json"
        DataConfig(datasets=[name]).save(path)
        written.append(path)
    for name in DEFAULT_NAMES:
        for prefix, make in (("", default_config), ("smoke_", smoke_config)):
            path = directory / f"{prefix}{name}.json"
            make(name, output_root).save(path)
            written.append(path)
    return written
