"""Back from the latent graph to the coordinate space.

The re-projection matrix is simply the transpose of the projection matrix:
pixel features are Q V = P^T V, restored to C channels by a linear map T'
and optionally added onto the incoming feature map as a residual.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tc
from .errors import DimensionError
from .graph_build import ProjectionMatrix
from .tensor import Tensor


@dataclass
class ReprojectionConfig:
    """Residual toggle plus the D -> C restoration weights.

    ``t_prime`` is normally its own learned C x D parameter; callers that
    want the parameter-free reading pass the transpose of the transform
    weights here instead (tied mode), which has the same shape.
    """

    t_prime: Tensor
    residual: bool = True

    def __post_init__(self):
        if self.t_prime.ndim != 2:
            raise DimensionError(f"T' must be C x D, got {self.t_prime.shape}")


def reproject(nodes: Tensor, p: ProjectionMatrix, x_in: Tensor,
              cfg: ReprojectionConfig) -> Tensor:
    """X~ = reshape(P^T V T'^T), optionally + x_in."""
    if nodes.ndim != 2 or nodes.shape[0] != p.num_nodes:
        raise DimensionError(
            f"nodes {nodes.shape} do not match projection with {p.num_nodes} nodes"
        )
    c, d = cfg.t_prime.shape
    if d != nodes.shape[1]:
        raise DimensionError(f"T' {cfg.t_prime.shape} does not match node dim {nodes.shape[1]}")
    h, w = p.spatial
    if x_in.shape != (c, h, w):
        raise DimensionError(f"input map {x_in.shape} expected {(c, h, w)}")
    z = tc.matmul(tc.transpose(p.scores), nodes)          # (H*W) x D
    x = tc.transpose(tc.matmul(z, tc.transpose(cfg.t_prime)))  # C x (H*W)
    x = tc.reshape(x, (c, h, w))
    return tc.add(x_in, x) if cfg.residual else x
