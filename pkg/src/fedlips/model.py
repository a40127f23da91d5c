"""Named-layer models: construction, forward/backward, SGD, checkpoints.

Three desk-scale architectures are provided. Every parameterized layer has a
stable name, a kind (linear / conv / batchnorm) and a role flag; the first
and last roles mark the trainable layers that stay outside sparsification,
and ``shareable`` is False exactly for the batch-norm blocks that BN-local
aggregation policies keep on the client.

Architecture tables (all convs are 3x3, stride 1, pad 1):

  mlp          fc1 (first) -> relu -> fc2 (middle) -> relu -> fc3 (last)
               hidden widths 64, 64
  vgg_mini     conv1 (first) -> bn1 -> relu -> conv2 -> bn2 -> relu -> pool
               -> conv3 -> bn3 -> relu -> conv4 -> bn4 -> relu -> pool
               -> flatten -> fc (last); widths 16, 16, 32, 32
  resnet_mini  stem (first) -> bn_stem -> relu
               -> two identity-skip blocks (b{1,2}c{1,2} + bn, width 16)
               -> global average pool -> fc (last)

Models are immutable by convention: every update returns a new ModelParams.
"""

from __future__ import annotations

import functools
import json

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nm

ROLE_FIRST = "first"
ROLE_MIDDLE = "middle"
ROLE_LAST = "last"

_MLP_HIDDEN = (64, 64)
_VGG_WIDTHS = (16, 16, 32, 32)
_RESNET_WIDTH = 16


@dataclass
class LayerParams:
    """One named parameter block. For batchnorm, weights/bias hold gamma/beta."""

    name: str
    kind: str  # linear | conv | batchnorm
    role: str  # first | middle | last
    shareable: bool
    weights: np.ndarray
    bias: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def clone(self) -> "LayerParams":
        return replace(
            self,
            weights=self.weights.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            running_mean=None if self.running_mean is None else self.running_mean.copy(),
            running_var=None if self.running_var is None else self.running_var.copy(),
        )


@dataclass
class ModelParams:
    arch_id: str
    input_shape: tuple
    num_classes: int
    layers: list[LayerParams]

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        names = [l.name for l in self.layers]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate layer names in {self.arch_id}: {names}")
        self._by_name = {l.name: l for l in self.layers}

    def layer(self, name: str) -> LayerParams:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValueError(f"unknown layer {name!r} in arch {self.arch_id}") from None

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def weight_layers(self) -> list[LayerParams]:
        """Trainable non-BN layers, the ones cosine and masking operate on."""
        return [l for l in self.layers if l.kind != "batchnorm"]

    def middle_weight_layers(self) -> list[str]:
        return [l.name for l in self.weight_layers() if l.role == ROLE_MIDDLE]

    def bn_layers(self) -> list[LayerParams]:
        return [l for l in self.layers if l.kind == "batchnorm"]

    def with_layers(self, layers: list[LayerParams]) -> "ModelParams":
        return ModelParams(self.arch_id, self.input_shape, self.num_classes, layers)

    def clone(self) -> "ModelParams":
        return self.with_layers([l.clone() for l in self.layers])


# ---------------------------------------------------------------------------
# architecture registry
# ---------------------------------------------------------------------------
# Graph nodes: ("linear"|"conv", name[, stride, pad]) reference a named layer;
# the rest are parameter-free ops. res_save/res_add bracket an identity skip.

def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _linear_layer(rng, name, role, out_f, in_f) -> LayerParams:
    return LayerParams(name, "linear", role, True,
                       _kaiming(rng, (out_f, in_f), in_f), np.zeros(out_f))


def _conv_layer(rng, name, role, out_c, in_c, k=3) -> LayerParams:
    return LayerParams(name, "conv", role, True,
                       _kaiming(rng, (out_c, in_c, k, k), in_c * k * k), np.zeros(out_c))


def _bn_layer(name, channels) -> LayerParams:
    return LayerParams(name, "batchnorm", ROLE_MIDDLE, False,
                       np.ones(channels), np.zeros(channels),
                       np.zeros(channels), np.ones(channels))


def _build_mlp(input_shape, num_classes, rng):
    in_dim = int(np.prod(input_shape))
    h1, h2 = _MLP_HIDDEN
    layers = [
        _linear_layer(rng, "fc1", ROLE_FIRST, h1, in_dim),
        _linear_layer(rng, "fc2", ROLE_MIDDLE, h2, h1),
        _linear_layer(rng, "fc3", ROLE_LAST, num_classes, h2),
    ]
    graph = [("flatten",), ("linear", "fc1"), ("relu",),
             ("linear", "fc2"), ("relu",), ("linear", "fc3")]
    return layers, graph


def _build_vgg_mini(input_shape, num_classes, rng):
    if len(input_shape) != 3:
        raise ValueError(f"vgg_mini needs (C, H, W) inputs, got {input_shape}")
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError(f"vgg_mini needs H and W divisible by 4, got {(h, w)}")
    w1, w2, w3, w4 = _VGG_WIDTHS
    layers = [
        _conv_layer(rng, "conv1", ROLE_FIRST, w1, c), _bn_layer("bn1", w1),
        _conv_layer(rng, "conv2", ROLE_MIDDLE, w2, w1), _bn_layer("bn2", w2),
        _conv_layer(rng, "conv3", ROLE_MIDDLE, w3, w2), _bn_layer("bn3", w3),
        _conv_layer(rng, "conv4", ROLE_MIDDLE, w4, w3), _bn_layer("bn4", w4),
        _linear_layer(rng, "fc", ROLE_LAST, num_classes, w4 * (h // 4) * (w // 4)),
    ]
    graph = [
        ("conv", "conv1", 1, 1), ("bn", "bn1"), ("relu",),
        ("conv", "conv2", 1, 1), ("bn", "bn2"), ("relu",), ("maxpool",),
        ("conv", "conv3", 1, 1), ("bn", "bn3"), ("relu",),
        ("conv", "conv4", 1, 1), ("bn", "bn4"), ("relu",), ("maxpool",),
        ("flatten",), ("linear", "fc"),
    ]
    return layers, graph


def _build_resnet_mini(input_shape, num_classes, rng):
    if len(input_shape) != 3:
        raise ValueError(f"resnet_mini needs (C, H, W) inputs, got {input_shape}")
    c = input_shape[0]
    wd = _RESNET_WIDTH
    layers = [_conv_layer(rng, "stem", ROLE_FIRST, wd, c), _bn_layer("bn_stem", wd)]
    graph = [("conv", "stem", 1, 1), ("bn", "bn_stem"), ("relu",)]
    for b in (1, 2):
        for cv in (1, 2):
            layers.append(_conv_layer(rng, f"b{b}c{cv}", ROLE_MIDDLE, wd, wd))
            layers.append(_bn_layer(f"b{b}n{cv}", wd))
        graph += [("res_save",),
                  ("conv", f"b{b}c1", 1, 1), ("bn", f"b{b}n1"), ("relu",),
                  ("conv", f"b{b}c2", 1, 1), ("bn", f"b{b}n2"),
                  ("res_add",), ("relu",)]
    layers.append(_linear_layer(rng, "fc", ROLE_LAST, num_classes, wd))
    graph += [("gap",), ("linear", "fc")]
    return layers, graph


_ARCHS = {
    "mlp": _build_mlp,
    "vgg_mini": _build_vgg_mini,
    "resnet_mini": _build_resnet_mini,
}


@functools.lru_cache(maxsize=None)
def arch_graph(arch_id: str, input_shape: tuple, num_classes: int) -> tuple:
    _, graph = _ARCHS[arch_id](tuple(input_shape), num_classes, np.random.default_rng(0))
    return tuple(graph)


def build_model(arch: str, input_shape: Sequence[int], num_classes: int, seed: int) -> ModelParams:
    """Deterministically initialize a model: Kaiming fan-in weights, zero
    biases, identity batch-norm."""
    if arch not in _ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {sorted(_ARCHS)}")
    rng = np.random.default_rng(seed)
    layers, _ = _ARCHS[arch](tuple(input_shape), num_classes, rng)
    return ModelParams(arch, tuple(input_shape), num_classes, layers)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _forward(model: ModelParams, x: np.ndarray, mode: str):
    """Run the graph; returns (logits, tape, bn_updates)."""
    graph = arch_graph(model.arch_id, model.input_shape, model.num_classes)
    tape = []
    bn_updates: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    skip_stack: list[np.ndarray] = []
    for op in graph:
        kind = op[0]
        if kind == "flatten":
            tape.append(("flatten", x.shape))
            x = x.reshape(x.shape[0], -1)
        elif kind == "linear":
            layer = model.layer(op[1])
            tape.append(("linear", layer.name, x))
            x = nm.linear_forward(x, layer.weights, layer.bias)
        elif kind == "conv":
            layer = model.layer(op[1])
            y, cols = nm._conv2d_gemm(x, layer.weights, layer.bias, op[2], op[3])
            tape.append(("conv", layer.name, x, op[2], op[3], cols))
            x = y
        elif kind == "bn":
            layer = model.layer(op[1])
            tape.append(("bn", layer.name, x))
            x, rm, rv = nm.batchnorm_forward(
                x, layer.weights, layer.bias, layer.running_mean, layer.running_var, mode)
            if mode == "train":
                bn_updates[layer.name] = (rm, rv)
        elif kind == "relu":
            tape.append(("relu", x))
            x = nm.relu_forward(x)
        elif kind == "maxpool":
            tape.append(("maxpool", x))
            x = nm.maxpool2d_forward(x)
        elif kind == "gap":
            tape.append(("gap", x))
            x = nm.global_avgpool_forward(x)
        elif kind == "res_save":
            tape.append(("res_save",))
            skip_stack.append(x)
        elif kind == "res_add":
            tape.append(("res_add",))
            x = x + skip_stack.pop()
        else:
            raise ValueError(f"unknown graph op {kind!r}")
    return x, tape, bn_updates


def predict(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Eval-mode logits (batch norm uses running statistics)."""
    logits, _, _ = _forward(model, np.asarray(inputs, dtype=np.float64), "eval")
    return logits


def forward_backward(model: ModelParams, inputs: np.ndarray, labels: np.ndarray):
    """Train-mode loss, per-layer gradients, per-layer weight-grad norms, and
    the batch-norm running-stat updates (returned, never applied in place).

    Returns (loss, grads, grad_norms, bn_updates) with grads[name] = (dw, db).
    """
    if len(inputs) == 0:
        raise ValueError("forward_backward: empty batch")
    logits, tape, bn_updates = _forward(model, np.asarray(inputs, dtype=np.float64), "train")
    loss, g = nm.softmax_cross_entropy(logits, labels)

    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    skip_grads: list[np.ndarray] = []
    for pos in range(len(tape) - 1, -1, -1):
        entry = tape[pos]
        kind = entry[0]
        if kind == "flatten":
            g = g.reshape(entry[1])
        elif kind == "linear":
            _, name, x = entry
            g, dw, db = nm.linear_backward(g, x, model.layer(name).weights)
            grads[name] = (dw, db)
        elif kind == "conv":
            _, name, x, stride, pad, cols = entry
            g, dw, db = nm.conv2d_backward(g, x, model.layer(name).weights, stride, pad,
                                           cols, need_dx=pos > 0)
            grads[name] = (dw, db)
        elif kind == "bn":
            _, name, x = entry
            g, dgamma, dbeta = nm.batchnorm_backward(g, x, model.layer(name).weights)
            grads[name] = (dgamma, dbeta)
        elif kind == "relu":
            g = nm.relu_backward(g, entry[1])
        elif kind == "maxpool":
            g = nm.maxpool2d_backward(g, entry[1])
        elif kind == "gap":
            g = nm.global_avgpool_backward(g, entry[1])
        elif kind == "res_add":
            skip_grads.append(g)
        elif kind == "res_save":
            g = g + skip_grads.pop()

    grad_norms = {name: float(np.linalg.norm(dw)) for name, (dw, _) in grads.items()}
    return loss, grads, grad_norms, bn_updates


def sgd_step(model: ModelParams, grads: dict, lr: float) -> ModelParams:
    """w' = w - lr * g on every trainable block; running stats untouched."""
    if set(grads) != set(model.layer_names()):
        missing = set(model.layer_names()) ^ set(grads)
        raise ValueError(f"gradients misaligned with model layers: {sorted(missing)}")
    new_layers = []
    for layer in model.layers:
        dw, db = grads[layer.name]
        if dw.shape != layer.weights.shape:
            raise ValueError(
                f"gradient shape {dw.shape} misaligned with layer {layer.name} {layer.weights.shape}")
        new_layers.append(replace(
            layer,
            weights=layer.weights - lr * dw,
            bias=None if layer.bias is None else layer.bias - lr * db,
        ))
    return model.with_layers(new_layers)


def apply_bn_updates(model: ModelParams, bn_updates: dict) -> ModelParams:
    """Fold returned running-stat updates into a new model value."""
    new_layers = []
    for layer in model.layers:
        if layer.name in bn_updates:
            rm, rv = bn_updates[layer.name]
            new_layers.append(replace(layer, running_mean=rm, running_var=rv))
        else:
            new_layers.append(layer)
    return model.with_layers(new_layers)


def layer_weight_vector(model: ModelParams, layer_name: str) -> np.ndarray:
    """Row-major flat copy of a layer's weight block (bias excluded)."""
    return model.layer(layer_name).weights.ravel().copy()


def weight_vectors(model: ModelParams) -> dict[str, np.ndarray]:
    return {l.name: layer_weight_vector(model, l.name) for l in model.weight_layers()}


# ---------------------------------------------------------------------------
# checkpoint file: npz with a JSON layer manifest; round-trips bitwise
# ---------------------------------------------------------------------------

def save_model(model: ModelParams, path) -> None:
    meta = {
        "arch_id": model.arch_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": [
            {"name": l.name, "kind": l.kind, "role": l.role, "shareable": l.shareable}
            for l in model.layers
        ],
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for l in model.layers:
        arrays[f"{l.name}.weights"] = l.weights
        if l.bias is not None:
            arrays[f"{l.name}.bias"] = l.bias
        if l.running_mean is not None:
            arrays[f"{l.name}.running_mean"] = l.running_mean
            arrays[f"{l.name}.running_var"] = l.running_var
    np.savez(path, **arrays)


def load_model(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        layers = []
        for entry in meta["layers"]:
            name = entry["name"]
            layers.append(LayerParams(
                name=name, kind=entry["kind"], role=entry["role"],
                shareable=entry["shareable"],
                weights=data[f"{name}.weights"],
                bias=data[f"{name}.bias"] if f"{name}.bias" in data else None,
                running_mean=data[f"{name}.running_mean"] if f"{name}.running_mean" in data else None,
                running_var=data[f"{name}.running_var"] if f"{name}.running_var" in data else None,
            ))
    return ModelParams(meta["arch_id"], tuple(meta["input_shape"]), meta["num_classes"], layers)
