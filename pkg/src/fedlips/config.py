"""Experiment configuration: schema, defaults, parsing, validation.

Configs are YAML (JSON parses too). Unknown keys are rejected by name, the
three required keys are dataset, method and seed, and every other field has
the documented default. The resolved config can be serialized back out and
reparses to an identical value, which is what the CLI writes next to the
run artifacts.
"""

from __future__ import annotations

import dataclasses

from dataclasses import dataclass, field

import numpy as np
import yaml

METHODS = ("separate", "fedavg", "fedbn", "lips")
ARCHS = ("mlp", "vgg_mini", "resnet_mini")
DATASET_KINDS = ("synthetic", "cifar10")
CRITERIA = ("sensitivity", "magnitude", "random")
REINIT_MODES = ("zero", "original_init")


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


@dataclass
class LipsConfig:
    tau0: float = 0.5
    k: int = 5
    criterion: str = "sensitivity"
    reinit: str = "zero"
    hold_mask: bool = False
    scope: list[str] | None = None  # default: all middle non-BN layers


@dataclass
class DatasetConfig:
    kind: str
    # synthetic
    num_classes: int = 10
    dim: int | None = None
    image_shape: list[int] | None = None  # (C, H, W); inputs reshaped for conv archs
    n_per_class: int = 500
    class_separation: float = 3.0
    noise: float = 1.0
    # cifar10
    directory: str | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    method: str
    seed: int
    arch: str = "mlp"
    n_clients: int = 100
    samples_per_client: int = 100
    test_per_client: int = 100
    alpha: float = 0.1
    rounds: int = 300
    local_epochs: int = 5
    batch_size: int = 100
    lr: float = 0.1
    lips: LipsConfig = field(default_factory=LipsConfig)
    fix_round: int | None = None
    # variant switch for the fixed-middle ablation: when True, middle layers
    # keep receiving local gradient updates past fix_round and only their
    # aggregation/distribution stops.
    fix_local_updates: bool = False
    # fraction of clients drawn uniformly each round; 1.0 = full participation
    participation_fraction: float = 1.0
    metrics_t0: int = 2
    output_dir: str | None = None
    parallel_workers: int = 1


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}{where}")
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        if name == "dataset":
            if not isinstance(value, dict) or "kind" not in value:
                raise ConfigError("dataset must be a mapping with a 'kind' key")
            kwargs[name] = _build(DatasetConfig, value, sub)
        elif name == "lips":
            kwargs[name] = _build(LipsConfig, value or {}, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    ds = cfg.dataset
    _require(ds.kind in DATASET_KINDS, f"dataset.kind must be one of {DATASET_KINDS}, got {ds.kind!r}")
    if ds.kind == "synthetic":
        _require(ds.num_classes > 0, "dataset.num_classes must be positive")
        _require(ds.n_per_class > 0, "dataset.n_per_class must be positive")
        _require(ds.class_separation > 0, "dataset.class_separation must be positive")
        _require(ds.noise >= 0, "dataset.noise must be non-negative")
        if ds.image_shape is not None:
            _require(len(ds.image_shape) == 3 and min(ds.image_shape) > 0,
                     "dataset.image_shape must be three positive sizes (C, H, W)")
            flat = int(np.prod(ds.image_shape))
            if ds.dim is None:
                ds.dim = flat
            _require(ds.dim == flat,
                     f"dataset.dim {ds.dim} inconsistent with image_shape product {flat}")
        _require(ds.dim is not None and ds.dim > 0,
                 "dataset.dim (or image_shape) is required for synthetic data")
    else:
        _require(ds.directory is not None, "dataset.directory is required for cifar10")

    _require(cfg.method in METHODS, f"method must be one of {METHODS}, got {cfg.method!r}")
    _require(isinstance(cfg.seed, int), "seed must be an integer")
    _require(cfg.arch in ARCHS, f"arch must be one of {ARCHS}, got {cfg.arch!r}")
    for name in ("n_clients", "samples_per_client", "test_per_client",
                 "local_epochs", "batch_size", "parallel_workers"):
        _require(getattr(cfg, name) >= 1, f"{name} must be positive")
    _require(cfg.rounds >= 0, "rounds must be non-negative")
    _require(cfg.alpha > 0, "alpha must be positive")
    _require(cfg.lr >= 0, "lr must be non-negative")

    lp = cfg.lips
    _require(0.0 <= lp.tau0 < 1.0, f"lips.tau0 must be in [0, 1), got {lp.tau0}")
    _require(lp.k >= 1, "lips.k must be >= 1")
    _require(lp.criterion in CRITERIA, f"lips.criterion must be one of {CRITERIA}")
    _require(lp.reinit in REINIT_MODES, f"lips.reinit must be one of {REINIT_MODES}")

    _require(0.0 < cfg.participation_fraction <= 1.0,
             f"participation_fraction must be in (0, 1], got {cfg.participation_fraction}")
    if cfg.fix_round is not None:
        _require(cfg.fix_round >= 1, "fix_round must be >= 1 when set")
    _require(cfg.metrics_t0 >= 1, "metrics_t0 must be >= 1")
    # rounds == 0 is the degenerate empty run; the reference round is never reached
    if cfg.rounds > 0:
        _require(cfg.metrics_t0 < cfg.rounds, "metrics_t0 must be < rounds")
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a YAML/JSON config document."""
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    for key in ("dataset", "method", "seed"):
        if key not in raw:
            raise ConfigError(f"missing required config key {key!r}")
    return validate(_build(ExperimentConfig, raw, ""))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)
