"""Transient sparsity: sensitivity scoring, decayed ratio, masks, reinit.

A mask event zeroes (or resets to build-time values) the lowest-ranked
fraction tau of each in-scope layer's weights, once, right after a client
has received the aggregated model. The mask is then discarded: subsequent
local training is dense unless the hold-mask variant re-applies it after
every optimizer step. Scope is always a subset of the middle non-BN layers;
first/last layers, biases and batch-norm blocks are never touched.
"""

from __future__ import annotations

import math

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, ROLE_MIDDLE

CRITERIA = ("sensitivity", "magnitude", "random")
REINIT_MODES = ("zero", "original_init")


@dataclass
class SparsityMask:
    """Per-layer binary vectors aligned to flat weights; 0 marks a zeroed slot."""

    masks: dict[str, np.ndarray]
    tau_used: float
    criterion: str

    def zero_count(self, name: str) -> int:
        return int((self.masks[name] == 0).sum())


def sensitivity_scores(w_current: dict[str, np.ndarray],
                       delta_w: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-parameter score |delta_w * w| from the last completed local update."""
    if set(w_current) != set(delta_w):
        raise ValueError(
            f"weight/delta layer sets differ: {sorted(set(w_current) ^ set(delta_w))}")
    scores = {}
    for name, w in w_current.items():
        d = delta_w[name]
        if w.shape != d.shape:
            raise ValueError(f"layer {name}: weights {w.shape} vs delta {d.shape}")
        scores[name] = np.abs(d * w)
    return scores


def decayed_tau(t: int, tau0: float, total_rounds: int) -> float:
    """Linearly decayed sparsity ratio tau0 * (1 - t / T)."""
    if not 0.0 <= tau0 < 1.0:
        raise ValueError(f"tau0 must be in [0, 1), got {tau0}")
    if total_rounds < 1:
        raise ValueError(f"total_rounds must be >= 1, got {total_rounds}")
    if t < 0 or t > total_rounds:
        raise ValueError(f"round {t} outside [0, {total_rounds}]")
    return tau0 * (1.0 - t / total_rounds)


def _validate_scope(model: ModelParams, scope) -> list[str]:
    for name in scope:
        layer = model.layer(name)
        if layer.kind == "batchnorm":
            raise ValueError(f"mask scope may not contain batch-norm layer {name!r}")
        if layer.role != ROLE_MIDDLE:
            raise ValueError(f"mask scope may not contain {layer.role} layer {name!r}")
    return list(scope)


def select_mask(values: dict[str, np.ndarray], tau: float, criterion: str,
                scope, rng: np.random.Generator, model: ModelParams) -> SparsityMask:
    """Build per-layer masks zeroing floor(tau * n) slots per in-scope layer.

    values carries the ranking input: sensitivity scores for 'sensitivity',
    the current flat weights for 'magnitude'; it is ignored for 'random'.
    Ties break toward the lower flat index.
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must be in [0, 1), got {tau}")
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    scope = _validate_scope(model, scope)
    masks = {}
    for name in scope:
        n = model.layer(name).weights.size
        z = math.floor(tau * n)
        mask = np.ones(n, dtype=np.uint8)
        if z > 0:
            if criterion == "random":
                zero_idx = rng.choice(n, size=z, replace=False)
            else:
                vec = values[name]
                if vec.shape != (n,):
                    raise ValueError(f"layer {name}: ranking vector {vec.shape} vs size {n}")
                key = np.abs(vec) if criterion == "magnitude" else vec
                zero_idx = np.argsort(key, kind="stable")[:z]
            mask[zero_idx] = 0
        masks[name] = mask
    return SparsityMask(masks, tau, criterion)


def apply_mask(model: ModelParams, mask: SparsityMask, reinit: str = "zero",
               init_snapshot: dict[str, np.ndarray] | None = None) -> ModelParams:
    """Overwrite masked slots with 0 or their build-time values; everything
    else, including biases and BN blocks, is carried over bit-identical."""
    if reinit not in REINIT_MODES:
        raise ValueError(f"unknown reinit mode {reinit!r}; expected one of {REINIT_MODES}")
    if reinit == "original_init" and init_snapshot is None:
        raise ValueError("reinit='original_init' requires the build-time snapshot")
    new_layers = []
    for layer in model.layers:
        if layer.name not in mask.masks:
            new_layers.append(layer)
            continue
        m = mask.masks[layer.name]
        if m.size != layer.weights.size:
            raise ValueError(
                f"mask for {layer.name} has {m.size} slots, layer has {layer.weights.size}")
        w = layer.weights.copy()
        flat = w.ravel()
        sel = m == 0
        if reinit == "zero":
            flat[sel] = 0.0
        else:
            if layer.name not in init_snapshot:
                raise ValueError(f"init snapshot missing layer {layer.name!r}")
            flat[sel] = init_snapshot[layer.name].ravel()[sel]
        new_layers.append(
            type(layer)(name=layer.name, kind=layer.kind, role=layer.role,
                        shareable=layer.shareable, weights=w, bias=layer.bias,
                        running_mean=layer.running_mean, running_var=layer.running_var))
    return model.with_layers(new_layers)
