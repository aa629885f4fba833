"""Latent-graph construction: pixel-to-node projection, fusion, adjacency.

The projection matrix P (N x H*W) is generated once, from the 2D branch,
and shared by both modalities (texture prior). Features are linearly
compressed, pooled into node vectors through P, fused, and connected by
one of three adjacency sources: node-feature similarity, projection
overlap, or inverse distance between region centroids.

Shape convention, fixed here for the whole package: P rows index nodes,
columns index pixels in row-major order; pooling is V = P @ Z_flat^T and
re-projection uses Q = P^T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError, FusionError
from .geometry import CameraIntrinsics, DepthMap
from .tensor import Tensor

ASSIGNMENT_MODES = ("soft", "hard")
EDGE_SOURCES = ("node_features", "projection_matrix", "centroids")
FUSION_MODES = ("sum", "concat")


@dataclass(frozen=True)
class GraphBuildConfig:
    num_nodes: int = 8
    node_dim: int = 16
    assignment: str = "soft"
    edge_source: str = "centroids"
    fusion: str = "sum"
    epsilon: float = 1e-6
    z_max: float = 10.0  # indoor normalization bound for centroid depth

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ConfigError(f"need at least 2 nodes, got {self.num_nodes}")
        if self.assignment not in ASSIGNMENT_MODES:
            raise ConfigError(f"unknown assignment mode {self.assignment!r}")
        if self.edge_source not in EDGE_SOURCES:
            raise ConfigError(f"unknown edge source {self.edge_source!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class ProjectionMatrix:
    """Pixel-to-node assignment scores, N x (H*W).

    ``scores`` is what downstream algebra consumes. In hard mode the
    forward values are one-hot while gradients pass through the retained
    ``soft`` scores (straight-through); the KL term always reads ``soft``.
    """

    scores: Tensor
    mode: str
    spatial: tuple[int, int]
    soft: Tensor

    @property
    def num_nodes(self) -> int:
        return self.scores.shape[0]

    @property
    def num_pixels(self) -> int:
        return self.scores.shape[1]

    def validate(self, tol: float = 1e-9) -> None:
        h, w = self.spatial
        if self.scores.shape != (self.num_nodes, h * w):
            raise DimensionError("projection scores inconsistent with spatial extents")
        cols = self.scores.data.sum(axis=0)
        if np.abs(cols - 1.0).max() > tol:
            raise DimensionError("projection columns must sum to 1")
        if self.mode == "hard":
            if not np.all((self.scores.data == 0.0) | (self.scores.data == 1.0)):
                raise DimensionError("hard projection must be one-hot per column")


@dataclass
class LatentGraph:
    """Fused node features plus adjacency, and centroids when they exist."""

    nodes: Tensor           # N x D
    adjacency: Tensor       # N x N, normalized, zero diagonal
    edge_source: str
    centroids: Optional[Tensor] = None        # N x 3, differentiable path
    centroid_targets: Optional[np.ndarray] = None   # N x 3 supervision, no grad
    degenerate_nodes: Optional[np.ndarray] = None   # N bool


def generate_projection(x: Tensor, weights: Tensor) -> ProjectionMatrix:
    """Soft assignment scores from a 1x1 convolution over the feature map.

    Realized as a matrix product on flattened pixels; softmax runs over the
    node axis so every pixel carries a distribution across nodes.
    """
    if x.ndim != 3:
        raise DimensionError(f"feature map must be C,H,W, got {x.shape}")
    c, h, w = x.shape
    if weights.ndim != 2 or weights.shape[1] != c:
        raise DimensionError(f"projection weights must be N x {c}, got {weights.shape}")
    if weights.shape[0] < 2:
        raise ConfigError(f"need at least 2 nodes, got {weights.shape[0]}")
    logits = tc.matmul(weights, tc.reshape(x, (c, h * w)))
    scores = tc.softmax(logits, axis=0)
    return ProjectionMatrix(scores=scores, mode="soft", spatial=(h, w), soft=scores)


def harden(p: ProjectionMatrix) -> ProjectionMatrix:
    """One-hot argmax per pixel with straight-through gradients.

    Forward values snap to the most likely node (ties to the lowest node
    index); backward behaves as the identity on the soft scores, the usual
    straight-through choice since argmax itself has no useful gradient.
    """
    if p.mode != "soft":
        raise ConfigError("harden expects a soft projection matrix")
    soft = p.scores
    winners = np.argmax(soft.data, axis=0)
    onehot = np.zeros_like(soft.data)
    onehot[winners, np.arange(soft.shape[1])] = 1.0
    st = tc.add(soft, tc.constant(onehot - soft.data))
    return ProjectionMatrix(scores=st, mode="hard", spatial=p.spatial, soft=soft)


def transform_features(x: Tensor, weights: Tensor) -> Tensor:
    """Per-pixel linear compression C -> D channels (no nonlinearity)."""
    if x.ndim != 3:
        raise DimensionError(f"feature map must be C,H,W, got {x.shape}")
    c, h, w = x.shape
    if weights.ndim != 2 or weights.shape[1] != c:
        raise DimensionError(f"transform weights must be D x {c}, got {weights.shape}")
    if weights.shape[0] > c:
        raise ConfigError(
            f"transform must not raise dimension: D={weights.shape[0]} > C={c}"
        )
    z = tc.matmul(weights, tc.reshape(x, (c, h * w)))
    return tc.reshape(z, (weights.shape[0], h, w))


def project_nodes(z: Tensor, p: ProjectionMatrix) -> Tensor:
    """Pool pixel features into node features: V[n] = sum_i P[n,i] * z[:,i].

    Deliberately unnormalized; the KL uniformity loss, not a mass division,
    is what keeps node usage balanced.
    """
    if z.ndim != 3:
        raise DimensionError(f"feature map must be D,H,W, got {z.shape}")
    d, h, w = z.shape
    if (h, w) != p.spatial:
        raise DimensionError(
            f"feature extents {(h, w)} do not match projection extents {p.spatial}"
        )
    zflat = tc.reshape(z, (d, h * w))
    return tc.matmul(p.scores, tc.transpose(zflat))


def fuse(v2d: Tensor, v3d: Tensor, mode: str, weights: Optional[Tensor] = None) -> Tensor:
    """Merge node features from the two branches.

    Both inputs must have been pooled through the same projection matrix.
    ``sum`` adds elementwise; ``concat`` stacks to N x 2D and applies a
    learned 2D -> D reduction.
    """
    if v2d.ndim != 2 or v3d.ndim != 2 or v2d.shape[0] != v3d.shape[0]:
        raise FusionError(f"node counts differ: {v2d.shape} vs {v3d.shape}")
    if mode == "sum":
        if v2d.shape != v3d.shape:
            raise FusionError(f"sum fusion needs equal dims: {v2d.shape} vs {v3d.shape}")
        return tc.add(v2d, v3d)
    if mode == "concat":
        cat = tc.concat([v2d, v3d], axis=1)
        if weights is None or weights.shape != (cat.shape[1], v2d.shape[1]):
            raise FusionError(
                f"concat fusion needs a {cat.shape[1]} x {v2d.shape[1]} reduction map"
            )
        return tc.matmul(cat, weights)
    raise ConfigError(f"unknown fusion mode {mode!r}")


def normalize_adjacency(raw: Tensor) -> Tensor:
    """Raw symmetric similarities -> GCN-ready weights.

    Clamps negatives, zeroes the diagonal, then applies the symmetric
    normalization D^{-1/2} W D^{-1/2}; all-zero rows stay all-zero. The
    result has spectral radius at most 1.
    """
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise DimensionError(f"adjacency must be square, got {raw.shape}")
    if np.abs(raw.data - raw.data.T).max() > 1e-9:
        raise DimensionError("raw adjacency must be symmetric")
    n = raw.shape[0]
    off_diag = tc.constant(1.0 - np.eye(n))
    w = tc.mul(tc.relu(raw), off_diag)
    d = tc.tensor_sum(w, axis=1)
    nonzero = d.data > 0.0
    guard = tc.constant(np.where(nonzero, 0.0, 1.0))
    dinv = tc.mul(tc.constant(nonzero.astype(np.float64)),
                  tc.div(1.0, tc.sqrt(tc.add(d, guard))))
    col = tc.matmul(tc.reshape(dinv, (n, 1)), tc.constant(np.ones((1, n))))
    return tc.mul(tc.mul(w, col), tc.transpose(col))


def adjacency_semantic(v: Tensor) -> Tensor:
    """Edges from node-feature similarity: normalize(V V^T)."""
    if v.ndim != 2:
        raise DimensionError(f"node matrix must be N x D, got {v.shape}")
    return normalize_adjacency(tc.matmul(v, tc.transpose(v)))


def adjacency_from_projection(p: ProjectionMatrix) -> Tensor:
    """Edges from assignment overlap: normalize(P P^T)."""
    return normalize_adjacency(tc.matmul(p.scores, tc.transpose(p.scores)))


def adjacency_locality(m: Tensor, epsilon: float) -> Tensor:
    """Edges from centroid proximity: w_ij = 1 / (||m_i - m_j|| + epsilon).

    Squared distances come from the Gram matrix; tiny negative round-off is
    clamped before the square root, and the diagonal is lifted inside the
    root (then masked) so coincident centroids stay finite in both passes.
    """
    if m.ndim != 2:
        raise DimensionError(f"centroids must be N x 3, got {m.shape}")
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    n = m.shape[0]
    gram = tc.matmul(m, tc.transpose(m))
    sq = tc.reshape(tc.tensor_sum(tc.mul(m, m), axis=1), (n, 1))
    col = tc.matmul(sq, tc.constant(np.ones((1, n))))
    d2 = tc.relu(tc.sub(tc.add(col, tc.transpose(col)), tc.mul(gram, 2.0)))
    dist = tc.sqrt(tc.add(d2, tc.constant(np.eye(n))))
    inv = tc.div(1.0, tc.add(dist, epsilon))
    raw = tc.mul(inv, tc.constant(1.0 - np.eye(n)))
    return normalize_adjacency(raw)


def _resample_axis(n_out: int, n_in: int):
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resample_depth_bilinear(depth: DepthMap, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Resize depth to the feature grid, interpolating over valid pixels only."""
    ho, wo = shape
    iy0, iy1, wy = _resample_axis(ho, depth.shape[0])
    ix0, ix1, wx = _resample_axis(wo, depth.shape[1])
    wy = wy[:, None]
    wx = wx[None, :]
    acc = np.zeros((ho, wo))
    mass = np.zeros((ho, wo))
    for iy, fy in ((iy0, 1 - wy), (iy1, wy)):
        for ix, fx in ((ix0, 1 - wx), (ix1, wx)):
            v = depth.valid[iy[:, None], ix[None, :]]
            wgt = fy * fx * v
            acc += wgt * depth.z[iy[:, None], ix[None, :]]
            mass += wgt
    ok = mass > 1e-12
    z = np.where(ok, acc / np.where(ok, mass, 1.0), 0.0)
    return z, ok


def compute_centroids_oracle(p: ProjectionMatrix, depth: DepthMap,
                             intr: CameraIntrinsics, z_max: float = 10.0
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Mass-weighted region centres (u/W, v/H, z/z_max) as supervision targets.

    Runs outside the tape: this is the slow training-time target for the
    centroid regressor, never differentiated. Nodes with assignment mass
    below 1e-8 get the box centre (0.5, 0.5, 0.5) and a degeneracy flag.
    The intrinsics ride along for grid alignment conventions; the encoding
    itself uses pixel coordinates and depth only.
    """
    h, w = p.spatial
    z, zvalid = resample_depth_bilinear(depth, (h, w))
    if not zvalid.all():
        from scipy import ndimage
        if zvalid.any():
            _, (ir, ic) = ndimage.distance_transform_edt(~zvalid, return_indices=True)
            z = z[ir, ic]
        # else: depth stays 0 everywhere; centroid z collapses to 0
    u = np.tile(np.arange(w, dtype=np.float64) / w, h)
    v = np.repeat(np.arange(h, dtype=np.float64) / h, w)
    coords = np.stack([u, v, z.ravel() / z_max], axis=1)  # (H*W, 3)

    scores = p.scores.data
    mass = scores.sum(axis=1)
    degenerate = mass < 1e-8
    centroids = np.empty((p.num_nodes, 3))
    safe = np.where(degenerate, 1.0, mass)
    centroids[:] = (scores @ coords) / safe[:, None]
    centroids[degenerate] = 0.5
    return centroids, degenerate


def predict_centroids(p: ProjectionMatrix, weights: Tensor) -> Tensor:
    """Differentiable centroid estimate M_c = P @ weights, trained to M_g."""
    if weights.ndim != 2 or weights.shape != (p.num_pixels, 3):
        raise DimensionError(
            f"centroid weights must be {p.num_pixels} x 3, got {weights.shape}"
        )
    return tc.matmul(p.scores, weights)
