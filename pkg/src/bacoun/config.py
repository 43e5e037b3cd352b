"""Experiment configuration: JSON in, validated frozen dataclasses out."""

import dataclasses
import hashlib
import json
import math
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bayes import HmcConfig
from .datasets import DEFAULT_GMM_MEANS
from .errors import ConfigError


def _check(ok, name, msg):
    if not ok:
        raise ConfigError(f"{name}: {msg}")


def _positive(name, v):
    _check(v > 0, name, f"must be positive, got {v}")


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "gmm"
    means: tuple = DEFAULT_GMM_MEANS
    # std of every cluster; covariance sigma*I with sigma = 3 means std sqrt(3)
    sigma: float = math.sqrt(3.0)
    points_per_cluster: int = 500
    points_per_class: int = 2000
    noise: float = 0.05
    csv_path: str = ""
    label_column: str = "quality"
    positive_classes: tuple = (5, 7)
    test_fraction: float = 0.2
    # OOD points for non-2-D data: one coordinate replaced by N(ood_mean, ood_std^2)
    ood_dim: int = 0
    ood_mean: float = 10.0
    ood_std: float = 1.0

    def __post_init__(self):
        _check(self.kind in ("gmm", "moons", "csv"), "dataset.kind",
               f"expected gmm, moons or csv, got {self.kind!r}")
        _check(len(self.means) > 0, "dataset.means", "need at least one mean")
        _check(self.sigma >= 0, "dataset.sigma", "must be nonnegative")
        _positive("dataset.points_per_cluster", self.points_per_cluster)
        _positive("dataset.points_per_class", self.points_per_class)
        _check(self.noise >= 0, "dataset.noise", "must be nonnegative")
        _check(0 < self.test_fraction < 1, "dataset.test_fraction", "must lie in (0, 1)")
        _check(self.ood_dim >= 0, "dataset.ood_dim", "must be nonnegative")
        _check(self.ood_std >= 0, "dataset.ood_std", "must be nonnegative")
        _check(self.kind != "csv" or self.csv_path, "dataset.csv_path", "required for csv data")


@dataclass(frozen=True)
class FlowSection:
    n_layers: int = 5
    hidden_dims: tuple = (64, 64)
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    l2: float = 1e-4

    def __post_init__(self):
        _positive("flow.n_layers", self.n_layers)
        _check(len(self.hidden_dims) > 0 and min(self.hidden_dims) > 0, "flow.hidden_dims",
               "need positive widths")
        _check(self.epochs >= 0, "flow.epochs", "must be nonnegative")
        _positive("flow.batch_size", self.batch_size)
        _positive("flow.learning_rate", self.learning_rate)
        _check(self.l2 >= 0, "flow.l2", "must be nonnegative")


@dataclass(frozen=True)
class ShellSection:
    inner_radius: float = 3.0
    outer_radius: float = 3.1
    n_points: int = 2000

    def __post_init__(self):
        _positive("shell.inner_radius", self.inner_radius)
        _check(self.outer_radius > self.inner_radius, "shell.outer_radius",
               "must exceed inner_radius")
        _positive("shell.n_points", self.n_points)


@dataclass(frozen=True)
class ClassifierSection:
    hidden_dims: tuple = (64, 64, 64, 1024)
    leaky_slope: float = 0.01
    dropout_rate: float = 0.1
    l2: float = 1e-2
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1e-3

    def __post_init__(self):
        _check(len(self.hidden_dims) > 0 and min(self.hidden_dims) > 0,
               "classifier.hidden_dims", "need positive widths")
        _check(0 <= self.dropout_rate < 1, "classifier.dropout_rate", "must lie in [0, 1)")
        _check(self.l2 >= 0, "classifier.l2", "must be nonnegative")
        _check(self.epochs >= 0, "classifier.epochs", "must be nonnegative")
        _positive("classifier.batch_size", self.batch_size)
        _positive("classifier.learning_rate", self.learning_rate)


@dataclass(frozen=True)
class HmcSection:
    total_iterations: int = 1000
    burn_in: int = 100
    leapfrog_steps: int = 30
    step_size: float = 0.01
    adapt: bool = True

    def __post_init__(self):
        try:
            self.to_hmc(0)
        except ValueError as exc:
            raise ConfigError(f"hmc: {exc}") from None

    def to_hmc(self, seed):
        return HmcConfig(self.total_iterations, self.burn_in, self.leapfrog_steps,
                         self.step_size, seed, self.adapt)


@dataclass(frozen=True)
class InferenceSection:
    method: str = "hmc"
    prior_std: float = 3.0
    posterior_samples: int = 200
    vi_iterations: int = 2000
    vi_learning_rate: float = 1e-2
    vi_mc_samples: int = 8

    def __post_init__(self):
        _check(self.method in ("hmc", "vi"), "inference.method",
               f"expected hmc or vi, got {self.method!r}")
        _positive("inference.prior_std", self.prior_std)
        _positive("inference.posterior_samples", self.posterior_samples)
        _positive("inference.vi_iterations", self.vi_iterations)
        _positive("inference.vi_learning_rate", self.vi_learning_rate)
        _positive("inference.vi_mc_samples", self.vi_mc_samples)


@dataclass(frozen=True)
class BaselineSection:
    nlm: bool = True
    mc_dropout: bool = True
    mcd_hidden_dims: tuple = (512, 512, 512, 512)
    mcd_dropout_rate: float = 0.2
    mcd_l2: float = 1e-4
    mcd_forward_passes: int = 200

    def __post_init__(self):
        _check(0 < self.mcd_dropout_rate < 1, "baselines.mcd_dropout_rate",
               "must lie in (0, 1)")
        _check(self.mcd_l2 >= 0, "baselines.mcd_l2", "must be nonnegative")
        _positive("baselines.mcd_forward_passes", self.mcd_forward_passes)


@dataclass(frozen=True)
class RegionSection:
    in_radius: float = 1.0
    in_count: int = 100
    middle_radius: float = 0.5
    middle_count: int = 100
    out_low: float = 15.0
    out_high: float = 17.5
    out_resolution: int = 10

    def __post_init__(self):
        _positive("regions.in_radius", self.in_radius)
        _positive("regions.in_count", self.in_count)
        _positive("regions.middle_radius", self.middle_radius)
        _positive("regions.middle_count", self.middle_count)
        _check(self.out_high > self.out_low, "regions.out_high", "must exceed out_low")
        _check(self.out_resolution >= 1, "regions.out_resolution", "must be at least 1")


@dataclass(frozen=True)
class GridSection:
    low: tuple = (-8.0, -8.0)
    high: tuple = (8.0, 8.0)
    resolution: int = 50

    def __post_init__(self):
        _check(self.resolution >= 2, "grid.resolution", "must be at least 2")
        _check(len(self.low) == len(self.high), "grid.high", "length must match grid.low")
        _check(all(h > lo for lo, h in zip(self.low, self.high)), "grid.high",
               "every bound must exceed grid.low")


@dataclass(frozen=True)
class PathologySection:
    enabled: bool = True
    ridge: float = 1e-2
    heldout_boundary: int = 300

    def __post_init__(self):
        _check(self.ridge >= 0, "pathology.ridge", "must be nonnegative")
        _positive("pathology.heldout_boundary", self.heldout_boundary)


@dataclass(frozen=True)
class OutlierSection:
    enabled: bool = False
    n_outliers: int = 200
    noise: float = 3.0
    k: int = 200
    flow_epochs: int = 100
    flow_l2: float = 1e-4

    def __post_init__(self):
        _check(self.n_outliers >= 0, "outliers.n_outliers", "must be nonnegative")
        _check(self.noise >= 0, "outliers.noise", "must be nonnegative")
        _check(self.k >= 0, "outliers.k", "must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    flow: FlowSection = field(default_factory=FlowSection)
    shell: ShellSection = field(default_factory=ShellSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    hmc: HmcSection = field(default_factory=HmcSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    regions: RegionSection = field(default_factory=RegionSection)
    grid: GridSection = field(default_factory=GridSection)
    pathology: PathologySection = field(default_factory=PathologySection)
    outliers: OutlierSection = field(default_factory=OutlierSection)

    def __post_init__(self):
        _check(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def canonical(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def stage_rng(self, stage):
        return stage_rng(self.seed, stage)


def stage_rng(seed, stage):
    """Independent generator for a named stage, derived from the master seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(stage.encode()),))
    return np.random.default_rng(ss)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, name):
    """Convert a JSON value to the type of ``default``, naming the key on failure."""
    if isinstance(default, bool):
        _check(isinstance(value, bool), name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        _check(isinstance(value, int) and not isinstance(value, bool), name,
               f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        _check(isinstance(value, (int, float)) and not isinstance(value, bool), name,
               f"expected a number, got {value!r}")
        _check(math.isfinite(value), name, "must be finite")
        return float(value)
    if isinstance(default, str):
        _check(isinstance(value, str), name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        _check(isinstance(value, list), name, f"expected a list, got {value!r}")
        return _to_tuple(value, name)
    raise ConfigError(f"{name}: unsupported value {value!r}")


def _to_tuple(value, name):
    out = []
    for v in value:
        if isinstance(v, list):
            out.append(_to_tuple(v, name))
        else:
            _check(isinstance(v, (int, float)) and not isinstance(v, bool), name,
                   f"list entries must be numbers, got {v!r}")
            out.append(v)
    return tuple(out)


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = prefix + "." if prefix else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    hints = typing.get_type_hints(cls)
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        name = prefix + "." + key if prefix else key
        if dataclasses.is_dataclass(hints[key]):
            kwargs[key] = _build(hints[key], value, name)
        else:
            kwargs[key] = _coerce(value, getattr(defaults, key), name)
    return cls(**kwargs)


def config_from_dict(data):
    return _build(ExperimentConfig, data, "")


def load_config(path):
    """Read and validate a JSON experiment config; missing keys take defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
