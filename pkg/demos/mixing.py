# Model mixing between neighbors, and what it does to a small network.
# Needs MNIST in data/mnist. Takes about a minute.

import copy
import dataclasses

import numpy as np

from wafl import contact, dataset, engine, metrics, neural

# one neighbor: lam = 1 meets in the middle, lam = 2 swaps models outright
a, b = np.array([0.0, 4.0]), np.array([2.0, 0.0])
print(engine.aggregate(a, [b], 1.0))   # [1. 2.]
print(engine.aggregate(a, [b], 2.0))   # [2. 0.]
print(engine.aggregate(a, [], 1.0))    # alone: unchanged

# a small experiment: 2000 training images, 10 nodes on a line
x, y = dataset.load_mnist("data/mnist", "train")
tx, ty = dataset.load_mnist("data/mnist", "test")
x, y = x[:2000], y[:2000]
parts = dataset.partition_noniid(y, dataset.PartitionConfig(seed=0))
data = engine.ExperimentData(x, y, parts, tx[:2000], ty[:2000], contact.generate("static_line", n_epochs=40))

cfg = engine.RunConfig(pretrain_epochs=20, total_epochs=40, eval_stride=10)
pre = engine.pretrained_nodes(cfg, data)  # shared starting point for all three modes

for mode in ("wafl", "self_train", "federated"):
    run = dataclasses.replace(cfg, mode=mode)
    recs = list(engine.run_experiment(run, data, pretrained=copy.deepcopy(pre)))
    accs = [round(r.mean_accuracy, 3) for r in recs if r.nodes]
    print(f"{mode:10s} accuracy {accs}  fc2.weight spread "
          f"{recs[0].convergence['fc2.weight']:.2e} -> {recs[-1].convergence['fc2.weight']:.2e}")

# the spread itself: mean distance of each node from the average model
vecs = np.stack([n.params.vector for n in pre])
print(metrics.convergence_errors(vecs))
print(neural.N_PARAMS, "parameters per node")
