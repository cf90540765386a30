"""MNIST IDX loading and label-skewed (Non-IID) partitioning."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(raw, fields, path):
    size = 4 * fields
    if len(raw) < size:
        raise FormatError(f"{path}: truncated header, {len(raw)} of {size} bytes", offset=len(raw))
    return struct.unpack(f">{fields}I", raw[:size])


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file (raw or gzip) into an ``(count, 784)`` float64 array in [0, 1]."""
    raw = _read_bytes(path)
    magic, = _header(raw, 1, path)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: magic 0x{magic:08x} is not an image file (0x{IMAGE_MAGIC:08x})", offset=0)
    _, count, rows, cols = _header(raw, 4, path)
    if (rows, cols) != (28, 28):
        raise FormatError(f"{path}: expected 28x28 images, got {rows}x{cols}", offset=8)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise FormatError(f"{path}: truncated pixel data, need {need} bytes, have {len(raw)}", offset=len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file (raw or gzip) into an int64 array of values 0..9."""
    raw = _read_bytes(path)
    magic, = _header(raw, 1, path)
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: magic 0x{magic:08x} is not a label file (0x{LABEL_MAGIC:08x})", offset=0)
    _, count = _header(raw, 2, path)
    if len(raw) < 8 + count:
        raise FormatError(f"{path}: truncated labels, need {8 + count} bytes, have {len(raw)}", offset=len(raw))
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label byte {labels[bad[0]]} > 9", offset=8 + int(bad[0]))
    return labels


def _resolve(directory, stem):
    directory = Path(directory)
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"neither {stem} nor {stem}.gz found in {directory}")


def load_mnist(directory, split="train"):
    """``(pixels, labels)`` for the ``train`` or ``test`` split in ``directory``."""
    images, labels = {"train": (TRAIN_IMAGES, TRAIN_LABELS),
                      "test": (TEST_IMAGES, TEST_LABELS)}[split]
    x = load_idx_images(_resolve(directory, images))
    y = load_idx_labels(_resolve(directory, labels))
    if len(x) != len(y):
        raise FormatError(f"{len(x)} images but {len(y)} labels in {directory}")
    return x, y


@dataclass(frozen=True)
class PartitionConfig:
    n_nodes: int = 10
    dominance: float = 0.9
    seed: int = 0

    def validate(self):
        if not 0.0 < self.dominance < 1.0:
            raise ConfigError(f"dominance must lie in (0, 1), got {self.dominance}")
        if self.n_nodes < 2:
            raise ConfigError("need at least two nodes")


@dataclass(frozen=True)
class NodePartition:
    node_id: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def partition_noniid(labels, cfg: PartitionConfig) -> list[NodePartition]:
    """Split sample indices so node ``l`` holds ``floor(dominance * count_l)`` samples of label ``l``.

    The rest of each label is shuffled and dealt to the other nodes in
    near-equal chunks (sizes differ by at most one; which nodes get the
    extra sample is random). Indices refer to positions in ``labels``.
    """
    cfg.validate()
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) != cfg.n_nodes or not np.array_equal(classes, np.arange(cfg.n_nodes)):
        raise ConfigError(
            f"n_nodes={cfg.n_nodes} must equal the number of distinct labels "
            f"(found {classes.tolist()})")
    rng = np.random.default_rng(cfg.seed)
    shards = [[] for _ in range(cfg.n_nodes)]
    for label in range(cfg.n_nodes):
        idx = rng.permutation(np.flatnonzero(labels == label))
        keep = int(np.floor(cfg.dominance * len(idx)))
        shards[label].append(idx[:keep])
        others = np.array([k for k in range(cfg.n_nodes) if k != label])
        rest = idx[keep:]
        base, extra = divmod(len(rest), len(others))
        sizes = np.full(len(others), base)
        sizes[rng.permutation(len(others))[:extra]] += 1
        start = 0
        for node, size in zip(others, sizes):
            shards[node].append(rest[start:start + size])
            start += size
    return [NodePartition(n, np.sort(np.concatenate(parts)).astype(np.int64))
            for n, parts in enumerate(shards)]


def label_table(labels, partitions) -> np.ndarray:
    """Per-node, per-label sample counts, shape ``(n_nodes, n_labels)``."""
    labels = np.asarray(labels)
    n_labels = int(labels.max()) + 1
    return np.array([np.bincount(labels[p.indices], minlength=n_labels) for p in partitions])


def format_label_table(table) -> str:
    n_labels = table.shape[1]
    head = ["Node"] + [f"L{j}" for j in range(n_labels)] + ["Summary"]
    rows = [head]
    for n, row in enumerate(table):
        rows.append([str(n)] + [str(int(v)) for v in row] + [str(int(row.sum()))])
    totals = table.sum(axis=0)
    rows.append(["Summary"] + [str(int(v)) for v in totals] + [str(int(totals.sum()))])
    width = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, width)) for r in rows)


def save_partition(path, partitions, cfg: PartitionConfig, *, source=None):
    doc = {
        "seed": cfg.seed,
        "dominance": cfg.dominance,
        "nodes": [{"node_id": int(p.node_id), "indices": p.indices.tolist()} for p in partitions],
    }
    if source is not None:
        doc["source"] = source
    Path(path).write_text(json.dumps(doc))


def load_partition(path):
    """Returns ``(partitions, doc)`` from a partition manifest."""
    try:
        doc = json.loads(Path(path).read_text())
        parts = [NodePartition(int(n["node_id"]), np.asarray(n["indices"], dtype=np.int64))
                 for n in doc["nodes"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad partition manifest: {exc}") from exc
    return parts, doc
