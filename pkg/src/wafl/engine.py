"""Per-epoch orchestration of contact-driven model exchange and local training.

Each protocol epoch works on a frozen snapshot of every node's parameters
taken at the end of the previous epoch. A node with at least one neighbor
mixes its own vector with the neighbors' snapshot vectors and then makes
one full mini-batch pass over its local data; an isolated node does
nothing. Because neighbors are read only from the snapshot, the result
does not depend on the order (or parallelism) in which nodes are updated.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import metrics, neural
from .contact import ContactTrace, neighbors
from .errors import ConfigError

log = logging.getLogger(__name__)

MODES = ("wafl", "self_train", "federated")


@dataclass
class NodeState:
    node_id: int
    params: neural.MlpParams
    optimizer: neural.AdamState
    rng: np.random.Generator
    pixels: np.ndarray
    labels: np.ndarray

    def train_epoch(self, hyper: neural.TrainHyper) -> float:
        return neural.train_one_epoch(self.params, self.optimizer, self.pixels, self.labels, hyper, self.rng)


def node_rng(run_seed: int, node_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(run_seed), int(node_id)]))


def make_nodes(pixels, labels, partitions, seed: int) -> list[NodeState]:
    """Fresh nodes with seeded random initial parameters and their local shards."""
    nodes = []
    for i, part in enumerate(sorted(partitions, key=lambda p: p.node_id)):
        if part.node_id != i:
            raise ConfigError(f"partition node ids must be 0..N-1, got {part.node_id} at position {i}")
        if len(part.indices) == 0:
            raise ConfigError(f"node {i} has an empty partition")
        rng = node_rng(seed, i)
        nodes.append(NodeState(
            node_id=i,
            params=neural.init_params(rng),
            optimizer=neural.AdamState(),
            rng=rng,
            pixels=np.ascontiguousarray(pixels[part.indices]),
            labels=np.asarray(labels)[part.indices],
        ))
    return nodes


@dataclass(frozen=True, eq=False)
class EpochSnapshot:
    """Parameter vectors of all nodes at an epoch boundary, shape ``(N, 101770)``."""

    epoch: int
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.array(self.vectors, dtype=np.float64)
        vecs.flags.writeable = False
        object.__setattr__(self, "vectors", vecs)


def take_snapshot(nodes, epoch: int) -> EpochSnapshot:
    return EpochSnapshot(epoch, np.stack([n.params.vector for n in nodes]))


def _for_each(fn, items, workers=1, order=None):
    items = list(items) if order is None else [items[i] for i in order]
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def pretrain(nodes, epochs: int, hyper: neural.TrainHyper, workers=1):
    """Purely local training for ``epochs`` epochs per node; no communication."""
    def run(node):
        for _ in range(epochs):
            node.train_epoch(hyper)
    _for_each(run, nodes, workers)
    return nodes


def aggregate(own, neighbor_params, lam: float) -> np.ndarray:
    """``own + lam * sum_k(neighbor_k - own) / (len(neighbors) + 1)``.

    Evaluated as ``(1 - lam*k/(k+1)) * own + lam/(k+1) * sum_k(neighbor_k)``
    so that a single neighbor with ``lam == 2`` is copied exactly and
    ``lam == 1`` gives the exact midpoint.
    """
    own = np.asarray(own, dtype=np.float64)
    k = len(neighbor_params)
    if k == 0:
        return own.copy()
    acc = np.zeros_like(own)
    for other in neighbor_params:
        other = np.asarray(other, dtype=np.float64)
        if other.shape != own.shape:
            raise ValueError(f"length mismatch: {other.shape} vs {own.shape}")
        acc += other
    w_nbr = lam / (k + 1)
    w_own = 1.0 - lam * k / (k + 1)
    return w_own * own + w_nbr * acc


def federated_aggregate(vectors, lam: float) -> np.ndarray:
    """Every node moves ``lam`` of the way to the unweighted mean of all nodes."""
    vecs = np.asarray(vectors, dtype=np.float64)
    centre = vecs.mean(axis=0)
    return vecs + lam * (centre - vecs)


def wafl_epoch(nodes, trace: ContactTrace, trace_epoch: int, lam: float,
               hyper: neural.TrainHyper, workers=1, order=None) -> EpochSnapshot:
    """One protocol epoch driven by the contacts at ``trace_epoch``.

    Returns the snapshot the neighbors were read from. ``order`` permutes
    the node processing order and must not change the outcome.
    """
    snap = take_snapshot(nodes, trace_epoch)

    def step(node):
        nbrs = sorted(neighbors(trace, trace_epoch, node.node_id))
        if not nbrs:
            return False
        node.params.vector[:] = aggregate(snap.vectors[node.node_id], snap.vectors[nbrs], lam)
        node.train_epoch(hyper)
        return True

    _for_each(step, nodes, workers, order)
    return snap


def self_train_epoch(nodes, hyper: neural.TrainHyper, workers=1):
    _for_each(lambda n: n.train_epoch(hyper), nodes, workers)
    return nodes


def federated_round(nodes, lam: float, hyper: neural.TrainHyper, workers=1):
    """Virtual server round: pull every node toward the global mean, then train locally."""
    mixed = federated_aggregate(take_snapshot(nodes, -1).vectors, lam)

    def step(node):
        node.params.vector[:] = mixed[node.node_id]
        node.train_epoch(hyper)

    _for_each(step, nodes, workers)
    return nodes


# -- experiment runner ------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    mode: str = "wafl"
    lam: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 32
    pretrain_epochs: int = 50
    total_epochs: int = 5000
    seed: int = 0
    eval_stride: int = 1
    snapshot_stride: int = 0
    workers: int = 1

    def validate(self):
        if self.mode == "ipls":
            raise ConfigError("mode 'ipls' is not implemented: its partition and responsibility "
                              "algorithm is underspecified in the source material")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "self_train" and not 0.0 < self.lam <= 2.0:
            raise ConfigError(f"lam must lie in (0, 2], got {self.lam}")
        if self.pretrain_epochs < 0 or self.total_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.eval_stride < 1:
            raise ConfigError("eval_stride must be >= 1")
        if self.snapshot_stride < 0 or self.workers < 1:
            raise ConfigError("snapshot_stride must be >= 0 and workers >= 1")
        self.hyper()

    def hyper(self) -> neural.TrainHyper:
        try:
            return neural.TrainHyper(learning_rate=self.learning_rate, batch_size=self.batch_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class NodeEvaluation:
    node_id: int
    confusion: np.ndarray
    accuracy: float
    micro: tuple


@dataclass(frozen=True)
class MetricsRecord:
    """Everything measured at the end of one epoch.

    ``nodes`` is empty on epochs skipped by the evaluation stride;
    ``convergence`` is always filled.
    """

    epoch: int
    phase: str
    convergence: dict
    nodes: tuple = ()
    active: int = 0

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([n.accuracy for n in self.nodes]))


@dataclass
class ExperimentData:
    train_pixels: np.ndarray
    train_labels: np.ndarray
    partitions: list
    test_pixels: np.ndarray
    test_labels: np.ndarray
    trace: Optional[ContactTrace] = None


def check_inputs(cfg: RunConfig, data: ExperimentData):
    """Reject inconsistent configurations before any training happens."""
    cfg.validate()
    n = len(data.partitions)
    if n < 1:
        raise ConfigError("no partitions")
    if len(data.test_labels) == 0:
        raise ConfigError("empty test set")
    if cfg.mode == "wafl":
        if data.trace is None:
            raise ConfigError("wafl mode needs a contact trace")
        if data.trace.n_nodes != n:
            raise ConfigError(f"trace has {data.trace.n_nodes} nodes but there are {n} partitions")
        if data.trace.n_epochs < cfg.total_epochs:
            raise ConfigError(f"trace covers {data.trace.n_epochs} epochs, run needs {cfg.total_epochs}")


def evaluate(nodes, pixels, labels, epoch, workers=1) -> tuple:
    def one(node):
        cm = metrics.confusion(node.params, pixels, labels)
        return NodeEvaluation(node.node_id, cm, metrics.overall_accuracy(cm),
                              tuple(metrics.micro_metrics(cm, node_id=node.node_id, epoch=epoch)))
    return tuple(_for_each(one, nodes, workers))


def pretrained_nodes(cfg: RunConfig, data: ExperimentData) -> list[NodeState]:
    """Initialise and pre-train nodes; the result can seed several runs of one seed."""
    nodes = make_nodes(data.train_pixels, data.train_labels, data.partitions, cfg.seed)
    return pretrain(nodes, cfg.pretrain_epochs, cfg.hyper(), cfg.workers)


def run_experiment(cfg: RunConfig, data: ExperimentData, *, pretrained=None,
                   snapshot_dir=None) -> Iterator[MetricsRecord]:
    """Pre-train, then run ``cfg.total_epochs`` protocol epochs, yielding one record per epoch.

    The first record is the post-pre-training state (epoch ==
    ``pretrain_epochs``); protocol epoch ``k`` (1-based) is reported as
    epoch ``pretrain_epochs + k`` and uses trace epoch ``k - 1``.
    ``pretrained`` may supply nodes from :func:`pretrained_nodes` for the
    same seed, partition and learning rate; they are deep-copied.
    """
    check_inputs(cfg, data)
    hyper = cfg.hyper()
    if pretrained is None:
        nodes = pretrained_nodes(cfg, data)
    else:
        if len(pretrained) != len(data.partitions):
            raise ConfigError("pretrained node count does not match partitions")
        nodes = copy.deepcopy(pretrained)
    if snapshot_dir is not None:
        Path(snapshot_dir).mkdir(parents=True, exist_ok=True)

    def record(epoch, k, active):
        conv = metrics.convergence_errors(take_snapshot(nodes, epoch))
        evals = ()
        if k % cfg.eval_stride == 0 or k == cfg.total_epochs:
            evals = evaluate(nodes, data.test_pixels, data.test_labels, epoch, cfg.workers)
        if snapshot_dir is not None and cfg.snapshot_stride and k % cfg.snapshot_stride == 0:
            for node in nodes:
                neural.save_snapshot(Path(snapshot_dir) / f"epoch{epoch:05d}_node{node.node_id:02d}.bin",
                                     node.params, epoch=epoch, node_id=node.node_id)
        return MetricsRecord(epoch, "pretrain" if k == 0 else cfg.mode, conv, evals, active)

    base = cfg.pretrain_epochs
    yield record(base, 0, 0)
    for k in range(1, cfg.total_epochs + 1):
        if cfg.mode == "wafl":
            wafl_epoch(nodes, data.trace, k - 1, cfg.lam, hyper, cfg.workers)
            active = int(data.trace.adjacency[k - 1].any(axis=1).sum())
        elif cfg.mode == "federated":
            federated_round(nodes, cfg.lam, hyper, cfg.workers)
            active = len(nodes)
        else:
            self_train_epoch(nodes, hyper, cfg.workers)
            active = len(nodes)
        rec = record(base + k, k, active)
        if rec.nodes:
            log.info("epoch %d %s mean accuracy %.4f", rec.epoch, cfg.mode, rec.mean_accuracy)
        yield rec
