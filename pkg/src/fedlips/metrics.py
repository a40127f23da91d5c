"""Round diagnostics: cosine drift, gradient norms, accuracy, CSV export.

Every completed round appends one record: the uniform average of client test
accuracies, the cosine of each weight layer of the post-aggregation global
model against its reference-round state (absent until the reference round has
been reached), and the per-layer mean of the clients' per-step weight-gradient
norms. Exports are plain CSV with 17-significant-digit floats so a reload
reproduces the values exactly.
"""

from __future__ import annotations

import json
import os

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, predict, weight_vectors

ACCURACY_CSV = "accuracy.csv"
COSINE_CSV = "cosine.csv"
GRADNORM_CSV = "gradnorm.csv"
SUMMARY_JSON = "summary.json"


@dataclass
class RoundRecord:
    round: int
    mean_accuracy: float
    cosine: dict[str, float] | None  # None before the reference round
    grad_norms: dict[str, float]


@dataclass
class MetricsLog:
    records: list[RoundRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def final(self) -> RoundRecord | None:
        return self.records[-1] if self.records else None


def layer_cosine(w_t: np.ndarray, w_ref: np.ndarray) -> float:
    """cos = dot(w_t, w_ref) / (|w_t| * |w_ref|); zero norms are undefined."""
    if w_t.shape != w_ref.shape:
        raise ValueError(f"cosine operands differ in length: {w_t.shape} vs {w_ref.shape}")
    nt = np.linalg.norm(w_t)
    nr = np.linalg.norm(w_ref)
    if nt == 0.0 or nr == 0.0:
        raise ValueError("cosine undefined for zero-norm vector")
    return float(np.dot(w_t, w_ref) / (nt * nr))


def evaluate_accuracy(model: ModelParams, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions in eval mode (running BN stats)."""
    if len(inputs) == 0:
        raise ValueError("cannot evaluate on an empty test split")
    logits = predict(model, inputs)
    return float((logits.argmax(axis=1) == labels).mean())


def record_round(log: MetricsLog, round_t: int, accuracies: list[float],
                 global_model: ModelParams, ref_snapshot: dict[str, np.ndarray] | None,
                 per_client_grad_norms: list[dict[str, float]]) -> MetricsLog:
    """Append one round: uniform accuracy mean, cosine vs the reference
    snapshot, and the unweighted client mean of per-layer gradient norms."""
    cosine = None
    if ref_snapshot is not None:
        current = weight_vectors(global_model)
        cosine = {name: layer_cosine(current[name], ref_snapshot[name])
                  for name in current}
    names = [l.name for l in global_model.weight_layers()]
    grad_norms = {
        name: float(np.mean([gn[name] for gn in per_client_grad_norms]))
        for name in names
    } if per_client_grad_norms else {}
    log.records.append(RoundRecord(
        round=round_t,
        mean_accuracy=float(np.mean(accuracies)),
        cosine=cosine,
        grad_norms=grad_norms,
    ))
    return log


def _fmt(x: float) -> str:
    return format(x, ".17g")


def export_csv(log: MetricsLog, directory) -> list[str]:
    """Write accuracy.csv, cosine.csv and gradnorm.csv; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []

    path = os.path.join(directory, ACCURACY_CSV)
    with open(path, "w", newline="\n") as fh:
        fh.write("round,mean_accuracy\n")
        for rec in log.records:
            fh.write(f"{rec.round},{_fmt(rec.mean_accuracy)}\n")
    paths.append(path)

    path = os.path.join(directory, COSINE_CSV)
    with open(path, "w", newline="\n") as fh:
        fh.write("round,layer,cosine\n")
        for rec in log.records:
            if rec.cosine is None:
                continue
            for layer, value in rec.cosine.items():
                fh.write(f"{rec.round},{layer},{_fmt(value)}\n")
    paths.append(path)

    path = os.path.join(directory, GRADNORM_CSV)
    with open(path, "w", newline="\n") as fh:
        fh.write("round,layer,mean_grad_norm\n")
        for rec in log.records:
            for layer, value in rec.grad_norms.items():
                fh.write(f"{rec.round},{layer},{_fmt(value)}\n")
    paths.append(path)
    return paths


def summary(log: MetricsLog) -> dict:
    final = log.final()
    return {
        "final_mean_accuracy": None if final is None else final.mean_accuracy,
        "final_cosine": {} if final is None or final.cosine is None else final.cosine,
    }


def export_summary(log: MetricsLog, directory) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, SUMMARY_JSON)
    with open(path, "w") as fh:
        json.dump(summary(log), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
