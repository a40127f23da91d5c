import numpy as np
import pytest
import yaml

from fedlips.config import parse_config


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Vector-norm relative error, robust to near-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def make_cfg(**overrides):
    """Small synthetic-mlp experiment config; overrides are raw config keys."""
    raw = {
        "dataset": {"kind": "synthetic", "num_classes": 4, "dim": 6,
                    "n_per_class": 100, "class_separation": 3.0},
        "method": "fedbn",
        "seed": 0,
        "arch": "mlp",
        "n_clients": 4,
        "samples_per_client": 30,
        "test_per_client": 10,
        "alpha": 0.5,
        "rounds": 4,
        "local_epochs": 1,
        "batch_size": 10,
        "lr": 0.1,
        "metrics_t0": 2,
    }
    for key, value in overrides.items():
        if key == "dataset" and isinstance(value, dict) and "kind" in value:
            raw[key] = value  # a full dataset block replaces the default one
        elif isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return parse_config(yaml.safe_dump(raw))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
