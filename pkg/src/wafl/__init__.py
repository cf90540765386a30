"""Deterministic simulator for decentralized model averaging over opportunistic contacts.

Modules:

- ``contact``: static topologies and mobility-driven contact traces
- ``dataset``: MNIST IDX loading and label-skewed partitioning
- ``neural``: a 784-128-10 MLP with Adam, all in numpy
- ``engine``: per-epoch exchange, aggregation and local training
- ``metrics``: confusion matrices, micro metrics, convergence error
- ``cli``: command line front end (``python -m wafl``)
"""

__version__ = "0.1.0"
