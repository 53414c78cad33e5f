"""Feature-interaction graph: projection, graph reasoning, re-projection.

A small set of K feature nodes is anchored on a regular lattice spanning a
feature volume.  Each node aggregates the volume over a fixed 27-offset
neighborhood, either at the undeformed neighbor positions or at positions
displaced by a learned affine function of the node's own feature (adaptive
sampling).  One graph-convolution step with a Laplacian-smoothed adjacency,
sigma((I - A) X W), reasons over the nodes, and re-projection interpolates
node features back onto a voxel grid.

All learned quantities are tape-trainable leaves; every operation here is
differentiable end to end, including through the sampling coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, NumericError, ShapeError
from .kernels import conv1x1, resize_trilinear, trilinear_sample
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    matmul,
    parameter,
    reshape,
    sigmoid,
    tensor_sum,
    transpose,
)


@dataclass
class ProjectedFeatures:
    """K rows of node features in interaction space, shape (K, node_dim)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"projected features must have rank 2, got {self.values.ndim}")

    @property
    def k_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def node_dim(self) -> int:
        return self.values.shape[1]


def _lattice_offsets() -> np.ndarray:
    # the 27 voxel offsets in {-1, 0, 1}^3, row-major (z, y, x)
    axes = (-1.0, 0.0, 1.0)
    return np.array([(z, y, x) for z in axes for y in axes for x in axes])


def _anchor_lattice(grid_shape: tuple, extents: tuple) -> np.ndarray:
    # anchor i along an axis sits at the center of cell i of a grid_shape
    # partition of the extent: (i + 0.5) * extent / grid - 0.5
    coords = [
        (np.arange(g) + 0.5) * (e / g) - 0.5 for g, e in zip(grid_shape, extents)
    ]
    mesh = np.meshgrid(*coords, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


class InteractionGraph:
    """K nodes on an anchor lattice with learned sampling and adjacency.

    Learnable leaves: adjacency (K, K), node_weights (node_dim, node_dim),
    sample_weights and neighbor_affinity (K, 27), and the per-neighbor affine
    offset parameters offset_w (K, 27, 3, node_dim) and offset_b (K, 27, 3)
    that produce voxel-unit displacements.  Anchors and the neighborhood
    offsets are fixed at construction.
    """

    def __init__(
        self,
        anchors: np.ndarray,
        grid_shape: tuple,
        node_dim: int,
        volume_extents: tuple,
        adjacency: Tensor,
        node_weights: Tensor,
        sample_weights: Tensor,
        neighbor_affinity: Tensor,
        offset_w: Tensor,
        offset_b: Tensor,
    ):
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.ndim != 2 or anchors.shape[1] != 3:
            raise ShapeError(f"anchors must have shape (K, 3), got {anchors.shape}")
        k = anchors.shape[0]
        if k < 1:
            raise ConfigError("need at least one node")
        hi = np.asarray(volume_extents, dtype=np.float64) - 1.0
        if np.any(anchors < 0.0) or np.any(anchors > hi):
            bad = int(np.flatnonzero((anchors < 0.0).any(axis=1) | (anchors > hi).any(axis=1))[0])
            raise ConfigError(
                f"anchor {bad} at {tuple(anchors[bad])} lies outside extents {tuple(volume_extents)}"
            )
        offsets = _lattice_offsets()
        m = offsets.shape[0]
        for tensor, want, label in (
            (adjacency, (k, k), "adjacency"),
            (node_weights, (node_dim, node_dim), "node_weights"),
            (sample_weights, (k, m), "sample_weights"),
            (neighbor_affinity, (k, m), "neighbor_affinity"),
            (offset_w, (k, m, 3, node_dim), "offset_w"),
            (offset_b, (k, m, 3), "offset_b"),
        ):
            if tensor.shape != want:
                raise ShapeError(f"{label} must have shape {want}, got {tensor.shape}")
            if not tensor.requires_grad:
                raise ConfigError(f"{label} must be a trainable leaf")
        self.anchors = anchors
        self.offsets = offsets
        self.grid_shape = tuple(int(g) for g in grid_shape)
        self.node_dim = int(node_dim)
        self.volume_extents = tuple(int(e) for e in volume_extents)
        self.adjacency = adjacency
        self.node_weights = node_weights
        self.sample_weights = sample_weights
        self.neighbor_affinity = neighbor_affinity
        self.offset_w = offset_w
        self.offset_b = offset_b
        # undeformed sampling positions, shape (K * 27, 3)
        self.base_positions = (anchors[:, None, :] + offsets[None, :, :]).reshape(-1, 3)

    @property
    def k_nodes(self) -> int:
        return self.anchors.shape[0]

    @property
    def neighborhood_size(self) -> int:
        return self.offsets.shape[0]

    @classmethod
    def create(
        cls,
        grid_shape: tuple,
        node_dim: int,
        volume_extents: tuple,
        tape: Tape | None = None,
        prefix: str = "graph",
    ) -> "InteractionGraph":
        """Lattice-anchored graph with neutral initial parameters.

        Adjacency starts at zero (pure residual reasoning), node_weights at
        identity, sampling weights uniform over the 27 neighbors, affinity at
        one, and the deformation parameters at zero so the adaptive projection
        initially equals the naive one.
        """
        if len(grid_shape) != 3 or any(g < 1 for g in grid_shape):
            raise ConfigError(f"grid_shape must be three positive extents, got {grid_shape}")
        if len(volume_extents) != 3 or any(e < 1 for e in volume_extents):
            raise ConfigError(f"volume_extents must be three positive extents, got {volume_extents}")
        if node_dim < 1:
            raise ConfigError(f"node_dim must be positive, got {node_dim}")
        anchors = _anchor_lattice(grid_shape, volume_extents)
        k = anchors.shape[0]
        m = _lattice_offsets().shape[0]

        def leaf(data, name):
            t = parameter(data, name=f"{prefix}.{name}")
            if tape is not None:
                tape.watch(t, t.name)
            return t

        return cls(
            anchors=anchors,
            grid_shape=grid_shape,
            node_dim=node_dim,
            volume_extents=volume_extents,
            adjacency=leaf(np.zeros((k, k)), "adjacency"),
            node_weights=leaf(np.eye(node_dim), "node_weights"),
            sample_weights=leaf(np.full((k, m), 1.0 / m), "sample_weights"),
            neighbor_affinity=leaf(np.ones((k, m)), "neighbor_affinity"),
            offset_w=leaf(np.zeros((k, m, 3, node_dim)), "offset_w"),
            offset_b=leaf(np.zeros((k, m, 3)), "offset_b"),
        )

    def _check_features(self, features: Tensor) -> None:
        if features.ndim != 4:
            raise ShapeError(f"features must have rank 4 (C, D, H, W), got {features.ndim}")
        if features.shape[0] != self.node_dim:
            raise ShapeError(
                f"features have {features.shape[0]} channels, graph expects {self.node_dim}"
            )
        if features.shape[1:] != self.volume_extents:
            raise ShapeError(
                f"features extents {features.shape[1:]} differ from graph extents "
                f"{self.volume_extents}"
            )


def _aggregate(graph: InteractionGraph, reads: Tensor) -> ProjectedFeatures:
    # reads: (K * 27, node_dim) -> weighted sum over the neighborhood
    k, m, c = graph.k_nodes, graph.neighborhood_size, graph.node_dim
    stacked = reshape(reads, (k, m, c))
    combo = reshape(graph.sample_weights * graph.neighbor_affinity, (k, m, 1))
    return ProjectedFeatures(tensor_sum(stacked * combo, axis=1))


def project_naive(features, graph: InteractionGraph) -> ProjectedFeatures:
    """Aggregate the volume at the undeformed neighbor positions of each node."""
    f = as_tensor(features)
    graph._check_features(f)
    reads = trilinear_sample(f, graph.base_positions)
    return _aggregate(graph, reads)


def project_adaptive(features, graph: InteractionGraph) -> ProjectedFeatures:
    """Aggregate at neighbor positions displaced by a learned affine of the
    node's anchor feature; gradients flow through weights and displacements."""
    f = as_tensor(features)
    graph._check_features(f)
    k, m, c = graph.k_nodes, graph.neighborhood_size, graph.node_dim
    anchor_feats = trilinear_sample(f, graph.anchors)
    try:
        scaled = graph.offset_w * reshape(anchor_feats, (k, 1, 1, c))
        delta = tensor_sum(scaled, axis=3) + graph.offset_b
    except NumericError:
        probe = np.einsum("kmdc,kc->kmd", graph.offset_w.data, anchor_feats.data)
        bad = np.flatnonzero(~np.isfinite(probe.reshape(k, -1)).all(axis=1))
        node = int(bad[0]) if bad.size else 0
        raise InputError(f"project_adaptive: non-finite displacement at node {node}") from None
    base = Tensor(graph.anchors[:, None, :] + graph.offsets[None, :, :])
    positions = reshape(base + delta, (k * m, 3))
    reads = trilinear_sample(f, positions)
    return _aggregate(graph, reads)


def graph_reason(projected: ProjectedFeatures, graph: InteractionGraph) -> ProjectedFeatures:
    """One graph convolution: sigma((I - A) X W), the identity acting as a
    residual connection over the smoothed adjacency."""
    x = projected.values
    if x.shape[0] != graph.k_nodes:
        raise ShapeError(f"projected features have {x.shape[0]} rows, graph has {graph.k_nodes}")
    if x.shape[1] != graph.node_dim:
        raise ShapeError(
            f"projected features have width {x.shape[1]}, node_weights expect {graph.node_dim}"
        )
    smoothed = Tensor(np.eye(graph.k_nodes)) - graph.adjacency
    return ProjectedFeatures(sigmoid(matmul(matmul(smoothed, x), graph.node_weights)))


def reproject(nodes: ProjectedFeatures, graph: InteractionGraph, out_shape: tuple) -> Tensor:
    """Interpolate node features from the anchor lattice onto a voxel grid.

    Each output voxel is a convex (non-negative, unit-sum) trilinear
    combination of its enclosing lattice nodes; voxels outside the lattice
    hull clamp to the nearest anchors, which realizes the nearest-anchor
    fallback.  Channel width follows the node features.
    """
    if len(out_shape) != 3 or any(n < 1 for n in out_shape):
        raise ShapeError(f"reproject: bad output extents {out_shape}")
    x = nodes.values
    if x.shape[0] != graph.k_nodes:
        raise ShapeError(f"node features have {x.shape[0]} rows, graph has {graph.k_nodes}")
    c = x.shape[1]
    gd, gh, gw = graph.grid_shape
    lattice = reshape(transpose(x, (1, 0)), (1, c, gd, gh, gw))
    vol = resize_trilinear(lattice, tuple(int(n) for n in out_shape))
    return reshape(vol, (c,) + tuple(int(n) for n in out_shape))


class GraphBranch:
    """Channel mixing into interaction space, projection, reasoning, and
    re-projection, as one differentiable unit.

    in_mix maps backbone channels to node_dim before aggregation; out_mix maps
    reasoned node features to the requested output width before re-projection.
    """

    def __init__(self, graph: InteractionGraph, in_mix: Tensor, out_mix: Tensor):
        if in_mix.shape[0] != graph.node_dim:
            raise ShapeError(
                f"in_mix produces {in_mix.shape[0]} channels, graph expects {graph.node_dim}"
            )
        if out_mix.shape[0] != graph.node_dim:
            raise ShapeError(
                f"out_mix consumes {out_mix.shape[0]} channels, graph provides {graph.node_dim}"
            )
        self.graph = graph
        self.in_mix = in_mix
        self.out_mix = out_mix

    @classmethod
    def create(
        cls,
        in_channels: int,
        node_dim: int,
        out_channels: int,
        grid_shape: tuple,
        volume_extents: tuple,
        rng: np.random.Generator,
        tape: Tape | None = None,
        prefix: str = "graph",
    ) -> "GraphBranch":
        graph = InteractionGraph.create(grid_shape, node_dim, volume_extents, tape, prefix)

        def leaf(data, name):
            t = parameter(data, name=f"{prefix}.{name}")
            if tape is not None:
                tape.watch(t, t.name)
            return t

        in_mix = leaf(rng.normal(scale=np.sqrt(2.0 / in_channels), size=(node_dim, in_channels)), "in_mix")
        out_mix = leaf(rng.normal(scale=np.sqrt(2.0 / node_dim), size=(node_dim, out_channels)), "out_mix")
        return cls(graph, in_mix, out_mix)

    def forward(self, features, out_shape: tuple, adaptive: bool = True) -> Tensor:
        mixed = conv1x1(features, self.in_mix, channel_axis=0)
        project = project_adaptive if adaptive else project_naive
        reasoned = graph_reason(project(mixed, self.graph), self.graph)
        nodes_out = ProjectedFeatures(matmul(reasoned.values, self.out_mix))
        return reproject(nodes_out, self.graph, out_shape)
