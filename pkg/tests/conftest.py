import dataclasses
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from wafl import dataset

MNIST_DIR = Path(os.environ.get("WAFL_MNIST_DIR", Path(__file__).resolve().parents[1] / "data" / "mnist"))


def _have_mnist():
    try:
        dataset._resolve(MNIST_DIR, dataset.TRAIN_LABELS)
        dataset._resolve(MNIST_DIR, dataset.TEST_IMAGES)
    except FileNotFoundError:
        return False
    return True


needs_mnist = pytest.mark.skipif(not _have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist_train():
    if not _have_mnist():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return dataset.load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    if not _have_mnist():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return dataset.load_mnist(MNIST_DIR, "test")


def write_images(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    path.write_bytes(struct.pack(">IIII", 0x803, len(pixels), 28, 28) + pixels.tobytes())


def write_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) + labels.tobytes())


@pytest.fixture
def fake_mnist(tmp_path):
    """Tiny IDX set: noise plus one bright marker pixel per class, so it is learnable."""
    root = tmp_path / "mnist"
    root.mkdir()
    rng = np.random.default_rng(0)
    for stem, n in (("train", 400), ("t10k", 100)):
        labels = np.arange(n) % 10
        pixels = rng.integers(0, 60, size=(n, 784))
        pixels[np.arange(n), labels * 70] = 255
        write_images(root / f"{stem}-images-idx3-ubyte", pixels)
        write_labels(root / f"{stem}-labels-idx1-ubyte", labels)
    return root


# -- desk-scale runs shared by the acceptance and desk test modules ----------------

DESK_SEEDS = (0, 1, 2)
DESK_SUBSET = 10_000
DESK_PRETRAIN = 50
DESK_EPOCHS = 300
DESK_STRIDE = 10
DESK_MODES = ("wafl", "self_train", "federated")


@pytest.fixture(scope="session")
def desk_runs(mnist_train, mnist_test):
    """Per seed: a shared pre-training, then line-topology WAFL, self-training and federated runs.

    10 nodes, 90% label dominance on the first 10,000 training samples,
    lam = 1, lr = 0.001, evaluated on the full test set every 10 epochs.
    """
    from wafl import contact, engine

    x, y = mnist_train[0][:DESK_SUBSET], mnist_train[1][:DESK_SUBSET]
    trace = contact.build_static_topology("line", 10, DESK_EPOCHS)
    out = {}
    for seed in DESK_SEEDS:
        parts = dataset.partition_noniid(y, dataset.PartitionConfig(n_nodes=10, dominance=0.9, seed=seed))
        data = engine.ExperimentData(x, y, parts, *mnist_test, trace)
        base = engine.RunConfig(pretrain_epochs=DESK_PRETRAIN, total_epochs=DESK_EPOCHS, seed=seed,
                                eval_stride=DESK_STRIDE)
        pre = engine.pretrained_nodes(base, data)
        runs = {}
        for mode in DESK_MODES:
            cfg = dataclasses.replace(base, mode=mode)
            runs[mode] = list(engine.run_experiment(cfg, data, pretrained=pre))
        out[seed] = {"data": data, "pretrained": pre, "runs": runs}
    return out


# -- acceptance summary -----------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``record(key, title, ok, detail)`` stores a verdict for the end-of-session summary."""
    def record(key, title, ok, detail=""):
        _ACCEPTANCE[key] = (title, bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
