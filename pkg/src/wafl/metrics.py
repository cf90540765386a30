"""Confusion matrices, one-vs-rest per-class metrics and model convergence error."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural
from .errors import InsufficientDataError

N_CLASSES = neural.N_CLASSES
TENSORS = tuple(neural.TENSOR_SHAPES)  # fc1.weight, fc1.bias, fc2.weight, fc2.bias
ALL = "all"


def confusion_from_predictions(true, pred, n_classes=N_CLASSES) -> np.ndarray:
    """Rows are true labels, columns predicted labels."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    flat = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def confusion(params, pixels, labels, chunk=5000) -> np.ndarray:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    pred = np.concatenate([neural.predict(params, pixels[i:i + chunk])
                           for i in range(0, len(labels), chunk)])
    return confusion_from_predictions(labels, pred)


@dataclass(frozen=True)
class MicroMetrics:
    cls: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: bool = False
    node_id: int = -1
    epoch: int = -1


def _ratio(num, den):
    return (num / den, False) if den > 0 else (0.0, True)


def micro_metrics(matrix, *, node_id=-1, epoch=-1) -> list[MicroMetrics]:
    """One-vs-rest accuracy, precision, recall and F1 for every class.

    A zero denominator yields 0.0 and sets ``undefined`` on the record.
    """
    m = np.asarray(matrix, dtype=np.int64)
    total = int(m.sum())
    out = []
    for c in range(m.shape[0]):
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c, :].sum()) - tp
        tn = total - tp - fp - fn
        precision, p_undef = _ratio(tp, tp + fp)
        recall, r_undef = _ratio(tp, tp + fn)
        f1, f_undef = _ratio(2 * precision * recall, precision + recall)
        out.append(MicroMetrics(
            cls=c,
            accuracy=(tp + tn) / total if total else 0.0,
            precision=precision,
            recall=recall,
            f1=f1,
            undefined=p_undef or r_undef or f_undef,
            node_id=node_id,
            epoch=epoch,
        ))
    return out


def overall_accuracy(matrix) -> float:
    """Fraction of correctly classified samples (trace over total)."""
    m = np.asarray(matrix)
    return float(np.trace(m) / m.sum())


# -- convergence ----------------------------------------------------------------

def select(vectors, tensor=ALL) -> np.ndarray:
    """Restrict ``(N, 101770)`` node vectors to one named tensor, or keep all."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if tensor == ALL:
        return vectors
    return vectors[..., neural.TENSOR_SLICES[tensor]]


def mean_params(snapshot, tensor=ALL) -> np.ndarray:
    """Coordinate-wise mean over nodes."""
    vecs = select(_vectors(snapshot), tensor)
    if vecs.shape[0] < 1:
        raise ValueError("snapshot holds no nodes")
    return vecs.mean(axis=0)


def param_distance(a, b) -> float:
    """``sqrt(sum((a - b)**2)) / len(a)``; the length factor sits outside the root."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)) / a.size)


def convergence_error(snapshot, tensor=ALL) -> float:
    """Mean distance of each node's tensor from the across-node mean tensor."""
    vecs = select(_vectors(snapshot), tensor)
    centre = vecs.mean(axis=0)
    return float(np.mean([param_distance(v, centre) for v in vecs]))


def convergence_errors(snapshot) -> dict:
    """Convergence error for each tensor and for the whole vector."""
    return {name: convergence_error(snapshot, name) for name in TENSORS + (ALL,)}


def _vectors(snapshot):
    return getattr(snapshot, "vectors", snapshot)


# -- windowed summary -----------------------------------------------------------

FIELDS = ("accuracy", "precision", "recall", "f1")


def summarize_window(records, last_k_epochs=100, include_undefined=True, fields=FIELDS) -> dict:
    """Mean and population std of each metric in ``fields`` over the last ``last_k_epochs`` epochs.

    ``records`` is an iterable of :class:`MicroMetrics` (or dicts with the
    same keys). The window is ``epoch > last_epoch - last_k_epochs``; the
    stream must reach back to the window start.
    """
    rows = [r if isinstance(r, dict) else r.__dict__ for r in records]
    if not rows:
        raise InsufficientDataError("no metric records")
    epochs = np.array([int(r["epoch"]) for r in rows])
    last, first = int(epochs.max()), int(epochs.min())
    start = last - last_k_epochs + 1
    if first > start:
        raise InsufficientDataError(
            f"window of {last_k_epochs} epochs needs records from epoch {start}, earliest is {first}")
    window = [r for r, e in zip(rows, epochs) if e >= start]
    out = {"epochs": (start, last), "count": len(window)}
    for name in fields:
        vals = [float(r[name]) for r in window
                if include_undefined or name == "accuracy" or not _as_bool(r.get("undefined", False))]
        out[name] = _mean_std(vals)
    return out


def _mean_std(vals):
    """Population mean and std with exactly rounded sums."""
    if not vals:
        return float("nan"), float("nan")
    mean = math.fsum(vals) / len(vals)
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))


def _as_bool(v):
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes")
    return bool(v)


# -- files ----------------------------------------------------------------------

METRIC_COLUMNS = ["epoch", "node", "class", "accuracy", "precision", "recall", "f1", "undefined_flag"]
CONVERGENCE_COLUMNS = ["epoch", "tensor", "E"]


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.epoch, r.node_id, r.cls, repr(r.accuracy), repr(r.precision),
                        repr(r.recall), repr(r.f1), int(r.undefined)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]), "node_id": int(r["node"]), "cls": int(r["class"]),
             "accuracy": float(r["accuracy"]), "precision": float(r["precision"]),
             "recall": float(r["recall"]), "f1": float(r["f1"]),
             "undefined": r["undefined_flag"] == "1"} for r in rows]


def write_convergence_csv(path, rows):
    """``rows``: iterable of ``(epoch, {tensor: E})``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONVERGENCE_COLUMNS)
        for epoch, errors in rows:
            for name, value in errors.items():
                w.writerow([epoch, name, repr(value)])


def read_convergence_csv(path) -> dict:
    """``{tensor: {epoch: E}}``."""
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["tensor"], {})[int(r["epoch"])] = float(r["E"])
    return out


def write_confusions_json(path, confusions):
    """``confusions``: iterable of ``(epoch, node, matrix)``."""
    doc = [{"epoch": int(e), "node": int(n), "matrix": np.asarray(m).tolist()} for e, n, m in confusions]
    Path(path).write_text(json.dumps(doc))
