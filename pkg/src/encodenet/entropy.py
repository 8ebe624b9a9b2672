"""Prediction entropy, representative selection, and conversion pairs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EntropyError

NORMALIZATION_TOL = 1e-5


def prediction_entropy(probabilities, axis=-1):
    """Shannon entropy in nats, with 0 * ln 0 taken as 0.

    Accepts one distribution or a batch along ``axis``.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p < 0):
        raise EntropyError("probabilities must be non-negative")
    totals = p.sum(axis=axis)
    if np.any(np.abs(totals - 1) > NORMALIZATION_TOL):
        raise EntropyError("probabilities must sum to 1 (within 1e-5)")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=axis)
    # Clamp the rounding-level negatives a one-hot row can produce.
    return np.maximum(h, 0.0) if np.ndim(h) else max(float(h), 0.0)


@dataclass(frozen=True)
class EntropyRecord:
    image_index: int
    label: int
    cluster: int
    entropy: float
    predicted_class: int


def score_dataset(net, data, assignments, batch_size=256):
    """One EntropyRecord per image from eval-mode softmax outputs.

    ``assignments`` gives each image's cluster within its class (from
    :func:`cluster_all_classes`).
    """
    from .trainer import predict_proba

    assignments = np.asarray(assignments)
    if assignments.shape != (len(data),):
        raise EntropyError(f"{assignments.shape[0] if assignments.ndim else 0} assignments for {len(data)} images")
    missing = np.flatnonzero(assignments < 0)
    if len(missing):
        raise EntropyError(f"image {int(missing[0])} has no cluster assignment")
    probs = predict_proba(net, data.images)
    ent = prediction_entropy(probs)
    pred = probs.argmax(axis=1)
    return [
        EntropyRecord(i, int(data.labels[i]), int(assignments[i]), float(ent[i]), int(pred[i]))
        for i in range(len(data))
    ]


@dataclass(frozen=True)
class RepresentativeMap:
    """(class, cluster) -> index of the lowest-entropy member, plus its entropy."""

    index: dict
    entropy: dict

    def __getitem__(self, cell):
        return self.index[cell]

    def __contains__(self, cell):
        return cell in self.index

    def cells(self):
        return sorted(self.index)

    def to_json(self):
        return {
            "cells": [
                {"class": c, "cluster": k, "image_index": self.index[(c, k)], "entropy": self.entropy[(c, k)]}
                for c, k in self.cells()
            ]
        }

    @classmethod
    def from_json(cls, doc):
        index, entropy = {}, {}
        for row in doc["cells"]:
            cell = (int(row["class"]), int(row["cluster"]))
            index[cell] = int(row["image_index"])
            entropy[cell] = float(row["entropy"])
        return cls(index, entropy)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def select_representatives(records, cells=None):
    """Minimum-entropy record per cell; ties go to the lowest image_index.

    ``cells`` optionally lists cells that must be present; an empty one is
    an error.
    """
    best = {}
    for r in records:
        cell = (r.label, r.cluster)
        cur = best.get(cell)
        if cur is None or (r.entropy, r.image_index) < (cur.entropy, cur.image_index):
            best[cell] = r
    if cells is not None:
        empty = [c for c in cells if c not in best]
        if empty:
            raise EntropyError(f"cell {empty[0]} has no members")
    return RepresentativeMap({c: r.image_index for c, r in best.items()}, {c: r.entropy for c, r in best.items()})


@dataclass(frozen=True)
class ConversionPairs:
    """(input index, target index) pairs into one image set."""

    inputs: np.ndarray
    targets: np.ndarray
    data: object

    def __len__(self):
        return len(self.inputs)

    def input_images(self):
        return self.data.images[self.inputs]

    def target_images(self):
        return self.data.images[self.targets]


def build_conversion_pairs(data, assignments, reps):
    """Map every image to the representative of its (class, cluster)."""
    assignments = np.asarray(assignments)
    targets = np.empty(len(data), dtype=np.int64)
    for i in range(len(data)):
        cell = (int(data.labels[i]), int(assignments[i]))
        if cell not in reps:
            raise EntropyError(f"no representative for cell {cell} (image {i})")
        targets[i] = reps[cell]
    return ConversionPairs(np.arange(len(data), dtype=np.int64), targets, data)


def identity_pairs(data):
    idx = np.arange(len(data), dtype=np.int64)
    return ConversionPairs(idx, idx.copy(), data)


def verify_pairs(pairs, records=None, reps=None):
    """Exhaustive soundness check: class preservation and cell minimality.

    Returns a dict of violation counts (all zero when sound).
    """
    labels = pairs.data.labels
    class_violations = int((labels[pairs.inputs] != labels[pairs.targets]).sum())
    minimality = 0
    target_mismatch = 0
    if records is not None and reps is not None:
        cell_min = {}
        for r in records:
            cell = (r.label, r.cluster)
            cell_min[cell] = min(cell_min.get(cell, np.inf), r.entropy)
        by_index = {r.image_index: r for r in records}
        for i, t in zip(pairs.inputs, pairs.targets):
            r = by_index[int(i)]
            cell = (r.label, r.cluster)
            if reps[cell] != int(t):
                target_mismatch += 1
            if by_index[int(t)].entropy > cell_min[cell]:
                minimality += 1
    return {"pairs": len(pairs), "class_violations": class_violations,
            "minimality_violations": minimality, "target_mismatches": target_mismatch}


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_index", "class", "cluster", "entropy", "predicted_class"])
        for r in records:
            w.writerow([r.image_index, r.label, r.cluster, repr(r.entropy), r.predicted_class])


def read_records_csv(path):
    with open(path, newline="") as fh:
        return [
            EntropyRecord(int(r["image_index"]), int(r["class"]), int(r["cluster"]), float(r["entropy"]),
                          int(r["predicted_class"]))
            for r in csv.DictReader(fh)
        ]


def write_pairs_csv(pairs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["input_index", "target_index"])
        for i, t in zip(pairs.inputs, pairs.targets):
            w.writerow([int(i), int(t)])


def read_pairs_csv(path, data):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ConversionPairs(np.array([int(r["input_index"]) for r in rows], dtype=np.int64),
                           np.array([int(r["target_index"]) for r in rows], dtype=np.int64), data)
