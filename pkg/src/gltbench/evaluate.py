"""Stratified accuracy/precision reporting and invariance diagnostics.

Metric conventions, also declared in every report header:
- precision of a class nobody predicted is counted as 0 (the class stays in
  the denominator), which penalizes collapsed predictors;
- a class stratum's precision averages per-class precisions over that
  stratum's classes only, computed on the full split;
- an attribute stratum restricts the sample set first and computes the mean
  per-class precision inside it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import Dataset
from .errors import ConfigError
from .nn import ModelParams, forward, logit_adjust, softmax
from .splits import Split, Strata, MANY_C, MEDIUM_C, FEW_C, MANY_A, MEDIUM_A, FEW_A

CLASS_STRATA = (MANY_C, MEDIUM_C, FEW_C)
ATTR_STRATA = (MANY_A, MEDIUM_A, FEW_A)

PRECISION_RULES = {
    "zero_prediction_precision": 0.0,
    "class_stratum_precision": "mean over the stratum's classes, full split",
    "attr_stratum_precision": "mean per-class precision within the stratum's samples",
}


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ConfigError("predictions and labels must align")
    if len(labels) == 0:
        return 0.0
    return float((predictions == labels).mean())


def per_class_precision(predictions, labels, n_classes: int) -> np.ndarray:
    """Precision of each class; classes with no predictions get 0."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = np.zeros(n_classes)
    for k in range(n_classes):
        pred_k = predictions == k
        if pred_k.any():
            out[k] = (labels[pred_k] == k).mean()
    return out


def mean_per_class_precision(predictions, labels, n_classes: int) -> float:
    return float(per_class_precision(predictions, labels, n_classes).mean())


def predict(params: ModelParams, X: np.ndarray, adjust_prior=None,
            tau: float = 1.0) -> np.ndarray:
    """Argmax predictions, optionally with post-hoc logit adjustment."""
    _, logits, _ = forward(params, X)
    if adjust_prior is not None:
        logits = logit_adjust(logits, adjust_prior, tau)
    return logits.argmax(axis=1)


@dataclass(eq=False)
class Report:
    """Stratified metric table for one (protocol, split) evaluation."""

    protocol: str
    split_name: str
    cells: dict  # stratum -> {"accuracy", "precision", "n"}
    overall: dict  # {"accuracy", "precision", "n"}
    diagnostics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    rules: dict = field(default_factory=lambda: dict(PRECISION_RULES))

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "split": self.split_name,
                "cells": self.cells, "overall": self.overall,
                "diagnostics": self.diagnostics, "provenance": self.provenance,
                "rules": self.rules}

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(protocol=d["protocol"], split_name=d["split"], cells=d["cells"],
                   overall=d["overall"], diagnostics=d.get("diagnostics", {}),
                   provenance=d.get("provenance", {}), rules=d.get("rules", {}))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "Report":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save_csv(self, path) -> None:
        """Accuracy | Precision cells, one row per stratum plus the overall row."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["protocol", "split", "stratum", "accuracy", "precision", "n"])
            for stratum in list(CLASS_STRATA) + list(ATTR_STRATA):
                if stratum in self.cells:
                    c = self.cells[stratum]
                    w.writerow([self.protocol, self.split_name, stratum,
                                f"{c['accuracy']:.6f}", f"{c['precision']:.6f}", c["n"]])
            w.writerow([self.protocol, self.split_name, "Overall",
                        f"{self.overall['accuracy']:.6f}",
                        f"{self.overall['precision']:.6f}", self.overall["n"]])


def stratified_report(predictions, dataset: Dataset, split: Split,
                      strata: Optional[Strata], n_classes: Optional[int] = None,
                      diagnostics: Optional[dict] = None,
                      provenance: Optional[dict] = None) -> Report:
    """Metrics overall, per class stratum and (when clusters exist) per
    attribute stratum."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = dataset.y[split.sample_ids]
    K = n_classes or dataset.n_classes
    if predictions.shape != labels.shape:
        raise ConfigError("predictions must align with the split")

    cells = {}
    overall = {"accuracy": accuracy(predictions, labels),
               "precision": mean_per_class_precision(predictions, labels, K),
               "n": int(len(labels))}
    if strata is not None:
        prec_all = per_class_precision(predictions, labels, K)
        for name in CLASS_STRATA:
            classes = [k for k, s in strata.class_stratum.items() if s == name]
            if not classes:
                continue
            mask = np.isin(labels, classes)
            cells[name] = {
                "accuracy": accuracy(predictions[mask], labels[mask]) if mask.any() else 0.0,
                "precision": float(prec_all[classes].mean()),
                "n": int(mask.sum()),
            }
        if strata.attr_stratum and strata.cluster_labels is not None:
            clusters = np.array([strata.cluster_labels[int(i)]
                                 for i in split.sample_ids], dtype=np.int64)
            stratum_of = np.array([
                ATTR_STRATA.index(strata.attr_stratum[(int(y), int(c))])
                for y, c in zip(labels, clusters)])
            for si, name in enumerate(ATTR_STRATA):
                mask = stratum_of == si
                if not mask.any():
                    continue
                cells[name] = {
                    "accuracy": accuracy(predictions[mask], labels[mask]),
                    "precision": mean_per_class_precision(predictions[mask],
                                                          labels[mask], K),
                    "n": int(mask.sum()),
                }
    return Report(protocol=split.protocol_tag, split_name=split.name, cells=cells,
                  overall=overall, diagnostics=diagnostics or {},
                  provenance=provenance or {})


def center_invariance(params: ModelParams, dataset: Dataset, environments) -> float:
    """Mean over classes of the distance between per-environment feature means.

    For more than two environments, the mean pairwise L2 distance. Scores a
    trained backbone on how stable its class centers are when the attribute
    mix changes; identical environments give exactly 0.
    """
    per_env_means = []
    for env in environments:
        means = {}
        for k, ids in env.per_class.items():
            Z, _, _ = forward(params, dataset.X[np.asarray(ids, dtype=np.int64)]
                              .astype(np.float64))
            means[k] = Z.mean(axis=0)
        per_env_means.append(means)
    classes = sorted(per_env_means[0])
    dists = []
    for k in classes:
        pair = []
        for i in range(len(per_env_means)):
            for j in range(i + 1, len(per_env_means)):
                pair.append(np.linalg.norm(per_env_means[i][k] - per_env_means[j][k]))
        dists.append(np.mean(pair))
    return float(np.mean(dists))


def confidence_center_correlation(params: ModelParams, X: np.ndarray,
                                  y: np.ndarray) -> float:
    """Pearson r between ground-truth confidence and the cosine similarity of
    each sample's penultimate feature to its class's mean feature."""
    Z, logits, _ = forward(params, np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    P = softmax(logits)
    p_gt = P[np.arange(len(y)), y]
    K = int(y.max()) + 1
    means = np.zeros((K, Z.shape[1]))
    for k in range(K):
        mask = y == k
        if mask.any():
            means[k] = Z[mask].mean(axis=0)
    m = means[y]
    denom = np.linalg.norm(Z, axis=1) * np.linalg.norm(m, axis=1)
    cos = (Z * m).sum(axis=1) / np.maximum(denom, 1e-12)
    return pearson(p_gt, cos)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)
