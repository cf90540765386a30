# Contact patterns: who can talk to whom at each epoch.
# Run from the repository root:  python demos/contact_patterns.py

import numpy as np

from wafl import contact

# static topologies never change; the line links node i to node i+1
line = contact.generate("static_line", n_nodes=10, n_epochs=100)
print(line.pairs(0))                  # [(0, 1), (1, 2), ..., (8, 9)]
print(contact.neighbors(line, 0, 4))  # {3, 5}

# the tree and the ring-with-hub are fixed shapes too
for kind in ("static_tree", "static_ringstar", "static_dense"):
    t = contact.generate(kind, n_nodes=10, n_epochs=1)
    print(kind, len(t.pairs(0)), "links")

# random waypoint: nodes walk between random points in a square and meet
# whenever they come within radio range
rwp = contact.generate("rwp", n_nodes=10, n_epochs=5000, seed=1, area_size=500)
counts = rwp.edge_counts()
print("rwp 500:", counts.mean(), "links per epoch on average")

# a bigger area means fewer meetings
for area in (1000, 2000):
    sparse = contact.generate("rwp", n_nodes=10, n_epochs=5000, seed=1, area_size=area)
    print(f"rwp {area}:", sparse.edge_counts().mean(), "links per epoch,",
          int((sparse.edge_counts() == 0).sum()), "silent epochs")

# the position log is kept, so any epoch can be re-checked by hand
e = 1234
d = np.linalg.norm(rwp.positions[e, 0] - rwp.positions[e, 1])
print("nodes 0 and 1 at epoch", e, "are", round(d, 1), "apart, linked:", bool(rwp.adjacency[e, 0, 1]))

# community structure: each node lives in a few home communities and
# occasionally travels between them; travellers are out of reach
cse = contact.generate("cse", n_nodes=10, n_epochs=5000, seed=1, memberships_per_node=2)
print("homes of node 0:", cse.memberships[0])
print("node 0 in transit", int((cse.residency[:, 0] < 0).sum()), "epochs out of 5000")

# traces round-trip through JSON
contact.save_trace(cse, "/tmp/cse_trace.json")
assert contact.load_trace("/tmp/cse_trace.json") == cse
