#!/usr/bin/env python3
"""The interaction-graph branch step by step: project a feature volume onto
a few lattice nodes, reason over them, and paint the result back."""

import numpy as np

from voxseg import (
    GraphBranch,
    InteractionGraph,
    graph_reason,
    project_adaptive,
    project_naive,
    reproject,
)
from voxseg.tensor import Tensor

rng = np.random.default_rng(7)

graph = InteractionGraph.create(grid_shape=(2, 2, 2), node_dim=3, volume_extents=(6, 6, 6))
features = Tensor(rng.normal(size=(3, 6, 6, 6)))

# with freshly created (zero) offsets the two projections agree
naive = project_naive(features, graph)
adaptive = project_adaptive(features, graph)
print("projected:", naive.values.shape,
      "max naive/adaptive gap:", np.abs(naive.values.numpy() - adaptive.values.numpy()).max())

# one graph convolution: sigmoid((I - A) X W)
reasoned = graph_reason(adaptive, graph)
print("reasoned rows:\n", np.round(reasoned.values.numpy(), 3))

# back to voxel space; each voxel is a convex mix of its surrounding nodes
volume = reproject(reasoned, graph, (6, 6, 6))
print("reprojected:", volume.shape,
      "range:", (volume.numpy().min().round(3), volume.numpy().max().round(3)))

# the full branch bundles channel mixing + projection + reasoning + reprojection
branch = GraphBranch.create(in_channels=5, node_dim=4, out_channels=2,
                            grid_shape=(2, 2, 2), volume_extents=(6, 6, 6), rng=rng)
out = branch.forward(Tensor(rng.normal(size=(5, 6, 6, 6))), (6, 6, 6))
print("branch output:", out.shape)
