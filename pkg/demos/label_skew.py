# Label-skewed shards: node n keeps 90% of digit n, the rest is spread thin.
# Needs MNIST in data/mnist (scripts/fetch_mnist.sh).

from wafl import dataset

x, y = dataset.load_mnist("data/mnist", "train")
print(x.shape, x.dtype, x.min(), x.max())  # (60000, 784) float64 0.0 1.0

parts = dataset.partition_noniid(y, dataset.PartitionConfig(n_nodes=10, dominance=0.9, seed=0))
table = dataset.label_table(y, parts)
print(dataset.format_label_table(table))

# the dominant digit dwarfs everything else on each node
for n, row in enumerate(table):
    print(n, f"{row[n] / row.sum():.3f} of node {n} is digit {n}")

# at 80% the skew is milder
parts80 = dataset.partition_noniid(y, dataset.PartitionConfig(dominance=0.8, seed=0))
print(dataset.label_table(y, parts80)[0])
