"""Per-vertex position and velocity errors between garment sequences."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import StructuralError, ValidationError


@dataclass
class ErrorCurve:
    values: np.ndarray
    label: str = ""
    sequence: str = ""
    frames: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.frames is None:
            self.frames = np.arange(len(self.values))
        self.frames = np.asarray(self.frames, dtype=np.int64)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValidationError("error curves must be finite and non-negative")

    def mean(self):
        return float(self.values.mean())

    def max(self):
        return float(self.values.max())


def _vertices(mesh):
    return np.asarray(getattr(mesh, "vertices", mesh), dtype=np.float64)


def _check_pair(pred, gt):
    if hasattr(pred, "faces") and hasattr(gt, "faces"):
        if pred.faces.shape != gt.faces.shape or not np.array_equal(pred.faces, gt.faces):
            raise StructuralError("meshes do not share topology")
    a, b = _vertices(pred), _vertices(gt)
    if a.shape != b.shape:
        raise StructuralError(f"vertex arrays differ in shape: {a.shape} vs {b.shape}")
    return a, b


def position_error(pred, gt, reduce="mean"):
    """Mean (or max) Euclidean distance between corresponding vertices."""
    a, b = _check_pair(pred, gt)
    d = np.linalg.norm(a - b, axis=1)
    if reduce == "mean":
        return float(d.mean())
    if reduce == "max":
        return float(d.max())
    raise ValidationError(f"unknown reduction {reduce!r}")


def position_curve(pred_seq, gt_seq, label="", sequence="", reduce="mean"):
    if len(pred_seq) != len(gt_seq):
        raise StructuralError("sequences differ in length")
    return ErrorCurve([position_error(p, g, reduce) for p, g in zip(pred_seq, gt_seq)], label, sequence)


def velocity_error(pred_seq, gt_seq, label="", sequence="", reduce="mean"):
    """Per-frame discrepancy of finite-difference vertex velocities.

    Entry ``n - 1`` of the result is, for frame ``n >= 1``, the mean over
    vertices of ``|(pred_n - pred_{n-1}) - (gt_n - gt_{n-1})|``.
    """
    if len(pred_seq) != len(gt_seq):
        raise StructuralError(f"sequence lengths differ: {len(pred_seq)} vs {len(gt_seq)}")
    if len(pred_seq) < 2:
        raise StructuralError("velocity error needs at least two frames")
    pairs = [_check_pair(p, g) for p, g in zip(pred_seq, gt_seq)]
    pred = np.stack([p for p, _ in pairs])
    gt = np.stack([g for _, g in pairs])
    d = np.linalg.norm(np.diff(pred, axis=0) - np.diff(gt, axis=0), axis=2)
    values = d.mean(axis=1) if reduce == "mean" else d.max(axis=1)
    return ErrorCurve(values, label, sequence, np.arange(1, len(pred_seq)))


def report(curves, out_path, overwrite=False):
    """Write a per-frame CSV (one column per curve label) and a JSON summary.

    The CSV ends with a ``mean`` row; the summary file sits next to it with a
    ``.json`` suffix and lists mean and max per label.
    """
    curves = list(curves)
    if not curves:
        raise ValidationError("no curves to report")
    out_path = Path(out_path)
    summary_path = out_path.with_suffix(".json")
    if not overwrite and (out_path.exists() or summary_path.exists()):
        raise ValidationError(f"{out_path} exists; pass overwrite=True to replace it")
    labels = [c.label or f"curve{i}" for i, c in enumerate(curves)]
    if len(set(labels)) != len(labels):
        raise ValidationError("curve labels must be unique")
    frames = sorted(set(int(f) for c in curves for f in c.frames))
    lookup = [dict(zip(c.frames.tolist(), c.values.tolist())) for c in curves]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + labels)
        for f in frames:
            w.writerow([f] + [repr(col[f]) if f in col else "" for col in lookup])
        w.writerow(["mean"] + [repr(c.mean()) for c in curves])
    summary = {
        label: {"mean": c.mean(), "max": c.max(), "frames": len(c.values), "sequence": c.sequence}
        for label, c in zip(labels, curves)
    }
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def read_report(path):
    """Parse a CSV written by `report` back into ``{label: {frame: value}}``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    out = {label: {} for label in labels}
    for row in rows[1:]:
        if row[0] == "mean":
            continue
        for label, cell in zip(labels, row[1:]):
            if cell:
                out[label][int(row[0])] = float(cell)
    return out
