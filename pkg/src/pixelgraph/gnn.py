"""Node-feature updates on the latent graph.

The workhorse is a graph-convolution layer that computes separate messages
for a node itself (W_S h_v) and its neighbourhood (aggregated A_vu W_N h_u),
sums them and applies relu. A Laplacian-smoothing graph-reasoning layer,
relu((I - A) V W), is kept as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError
from .tensor import Tensor

AGGREGATIONS = ("sum", "mean", "max")
LAYER_TYPES = ("graph_convolution", "graph_reasoning")


@dataclass
class GcnLayer:
    """Self/neighbour split graph convolution with a choice of aggregator."""

    w_self: Tensor
    w_neigh: Tensor
    aggregation: str = "sum"

    def __post_init__(self):
        if self.w_self.ndim != 2 or self.w_self.shape[0] != self.w_self.shape[1]:
            raise ConfigError(f"W_S must be square, got {self.w_self.shape}")
        if self.w_neigh.shape != self.w_self.shape:
            raise ConfigError("W_S and W_N must share shape")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class ReasoningLayer:
    """Single learned transform for the (I - A) V W reasoning update."""

    w: Tensor

    def __post_init__(self):
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise ConfigError(f"W must be square, got {self.w.shape}")


@dataclass
class GnnStack:
    layers: list
    layer_type: str = "graph_convolution"

    def __post_init__(self):
        if self.layer_type not in LAYER_TYPES:
            raise ConfigError(f"unknown layer type {self.layer_type!r}")
        dims = {l.w_self.shape[0] if isinstance(l, GcnLayer) else l.w.shape[0]
                for l in self.layers}
        if len(dims) > 1:
            raise ConfigError(f"stack layers disagree on feature dim: {dims}")


def _check_graph(nodes: Tensor, adjacency: Tensor) -> None:
    if nodes.ndim != 2 or adjacency.ndim != 2:
        raise DimensionError("nodes must be N x D and adjacency N x N")
    if adjacency.shape != (nodes.shape[0], nodes.shape[0]):
        raise DimensionError(
            f"adjacency {adjacency.shape} does not match {nodes.shape[0]} nodes"
        )


def gcn_forward(nodes: Tensor, adjacency: Tensor, layer: GcnLayer) -> Tensor:
    """relu(W_S h_v + AGG_u[A_vu W_N h_u]) for every node v."""
    _check_graph(nodes, adjacency)
    if layer.w_self.shape[0] != nodes.shape[1]:
        raise DimensionError(
            f"layer dim {layer.w_self.shape[0]} does not match nodes {nodes.shape}"
        )
    n = nodes.shape[0]
    m_self = tc.matmul(nodes, tc.transpose(layer.w_self))
    h_n = tc.matmul(nodes, tc.transpose(layer.w_neigh))

    if layer.aggregation == "sum":
        m_neigh = tc.matmul(adjacency, h_n)
    elif layer.aggregation == "mean":
        weight = tc.tensor_sum(adjacency, axis=1)
        nonzero = weight.data > 0.0
        guard = tc.constant(np.where(nonzero, 0.0, 1.0))
        scale = tc.mul(tc.constant(nonzero.astype(np.float64)),
                       tc.div(1.0, tc.add(weight, guard)))
        rows = tc.matmul(tc.reshape(scale, (n, 1)),
                         tc.constant(np.ones((1, nodes.shape[1]))))
        m_neigh = tc.mul(tc.matmul(adjacency, h_n), rows)
    else:  # max: elementwise over per-neighbour contributions, ties -> first u
        m_neigh = None
        for u in range(n):
            mask = np.zeros((n, n))
            mask[:, u] = 1.0
            contrib = tc.matmul(tc.mul(adjacency, tc.constant(mask)), h_n)
            m_neigh = contrib if m_neigh is None else tc.maximum(m_neigh, contrib)
    return tc.relu(tc.add(m_self, m_neigh))


def graph_reasoning_forward(nodes: Tensor, adjacency: Tensor, weights: Tensor) -> Tensor:
    """Laplacian-smoothing update relu(((I - A) V) W)."""
    _check_graph(nodes, adjacency)
    if weights.ndim != 2 or weights.shape != (nodes.shape[1], nodes.shape[1]):
        raise DimensionError(f"weights must be D x D, got {weights.shape}")
    smoothed = tc.sub(nodes, tc.matmul(adjacency, nodes))
    return tc.relu(tc.matmul(smoothed, weights))


def stack_forward(nodes: Tensor, adjacency: Tensor, stack: GnnStack) -> Tensor:
    """Compose the stack's layers, reusing one adjacency throughout."""
    if not stack.layers:
        raise ConfigError("empty GNN stack")
    h = nodes
    for layer in stack.layers:
        if stack.layer_type == "graph_convolution":
            h = gcn_forward(h, adjacency, layer)
        else:
            h = graph_reasoning_forward(h, adjacency, layer.w)
    return h
