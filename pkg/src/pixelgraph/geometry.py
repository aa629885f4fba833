"""Depth-to-normal encoding: pinhole back-projection, filtered k-NN, plane fits.

A single-channel depth map becomes a three-channel map of unit surface
normals. Per pixel: back-project the depth into camera space, collect the
k nearest 3D neighbours inside an image-space window (rejecting candidates
across relative depth gaps), fit a plane by least squares, and orient the
normal toward the camera. Pixels whose fit is degenerate are masked and can
be filled from their nearest valid neighbour before entering the CNN branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateFitError, ParameterError

MAX_DEPTH_M = 100.0


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def check_principal_point(self, height: int, width: int) -> None:
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise ParameterError(
                f"principal point ({self.cx}, {self.cy}) outside image {width}x{height}"
            )


@dataclass
class DepthMap:
    """Per-pixel depth in metres with a validity mask for missing readings."""

    z: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.z.shape != self.valid.shape or self.z.ndim != 2:
            raise ParameterError(f"depth {self.z.shape} and mask {self.valid.shape} must be equal H,W")
        zv = self.z[self.valid]
        if zv.size and (zv.min() <= 0.0 or zv.max() >= MAX_DEPTH_M):
            raise ParameterError("valid depths must lie strictly inside (0, 100) metres")

    @property
    def shape(self):
        return self.z.shape


@dataclass
class PointCloud:
    """Camera-space coordinates aligned with the depth grid; metres."""

    points: np.ndarray  # H,W,3; zeros where invalid
    valid: np.ndarray

    @property
    def shape(self):
        return self.valid.shape


@dataclass
class NormalMap:
    """Per-pixel unit normal with n_z <= 0 (camera-facing) on valid pixels."""

    n: np.ndarray  # H,W,3
    valid: np.ndarray


@dataclass(frozen=True)
class NeighborhoodParams:
    """k-NN selection: neighbour count, relative depth gate, search window."""

    k: int = 9
    gamma: float = 0.05
    window_radius: int = 0  # 0 means the default ceil(sqrt(k)) + 1

    def __post_init__(self):
        if self.k < 3:
            raise ParameterError(f"k must be >= 3, got {self.k}")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        radius = self.window_radius or math.ceil(math.sqrt(self.k)) + 1
        if radius < math.ceil(math.sqrt(self.k)):
            raise ParameterError(f"window radius {radius} too small for k={self.k}")
        object.__setattr__(self, "window_radius", radius)


def back_project(depth: DepthMap, intr: CameraIntrinsics) -> PointCloud:
    """Lift each valid pixel (u, v, z) to camera space via the pinhole model."""
    h, w = depth.shape
    intr.check_principal_point(h, w)
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    x = (u - intr.cx) * depth.z / intr.fx
    y = (v - intr.cy) * depth.z / intr.fy
    points = np.stack([x, y, depth.z], axis=2)
    points[~depth.valid] = 0.0
    return PointCloud(points=points, valid=depth.valid.copy())


def gather_neighbors(cloud: PointCloud, pixel: tuple[int, int],
                     params: NeighborhoodParams) -> list[tuple[int, int]]:
    """Up to k window pixels nearest in 3D, gated by the relative depth gap.

    The centre pixel is always kept. Candidates j must satisfy
    |z_i - z_j| < gamma * z_i. Distance ties break on (row, col) so the
    result is identical regardless of evaluation order.
    """
    r0, c0 = pixel
    h, w = cloud.shape
    if not cloud.valid[r0, c0]:
        raise ParameterError(f"pixel {pixel} is invalid")
    rad = params.window_radius
    rlo, rhi = max(0, r0 - rad), min(h, r0 + rad + 1)
    clo, chi = max(0, c0 - rad), min(w, c0 + rad + 1)

    centre = cloud.points[r0, c0]
    zi = centre[2]
    window = cloud.points[rlo:rhi, clo:chi]
    wvalid = cloud.valid[rlo:rhi, clo:chi]
    gap_ok = np.abs(window[..., 2] - zi) < params.gamma * zi
    keep = wvalid & gap_ok
    keep[r0 - rlo, c0 - clo] = True

    rows, cols = np.nonzero(keep)
    d = np.linalg.norm(window[rows, cols] - centre, axis=1)
    order = sorted(range(len(rows)), key=lambda i: (d[i], rows[i], cols[i]))
    return [(int(rows[i] + rlo), int(cols[i] + clo)) for i in order[:params.k]]


_COND_LIMIT = 1e12


def fit_normal(neighbors: np.ndarray) -> np.ndarray:
    """Least-squares plane normal for a stack of 3D points.

    Solves A n = 1 in the normal-equation form n = (A^T A)^{-1} A^T 1 and
    normalizes to unit length. Near-singular Gram matrices (collinear
    neighbourhoods, planes through the camera centre) raise
    DegenerateFitError so the caller can mask the pixel. The sign is fixed
    camera-facing: n_z <= 0, and for n_z = 0 the first nonzero component
    is made positive.
    """
    pts = np.asarray(neighbors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise DegenerateFitError(f"need at least 3 points of dim 3, got {pts.shape}")
    gram = pts.T @ pts
    if np.linalg.cond(gram) > _COND_LIMIT:
        raise DegenerateFitError("near-singular normal equations")
    n = np.linalg.solve(gram, pts.sum(axis=0))
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise DegenerateFitError("zero-length normal (plane through origin)")
    n = n / norm
    if abs(n[2]) < 1e-12:
        # In-plane-of-view normal: snap n_z to exactly 0, then break the
        # sign tie by making the first significant component positive.
        n[2] = 0.0
        n /= np.linalg.norm(n)
        lead = n[np.flatnonzero(np.abs(n) > 1e-12)[0]]
        if lead < 0.0:
            n = -n
    elif n[2] > 0.0:
        n = -n
    return n


def encode_normals(depth: DepthMap, intr: CameraIntrinsics,
                   params: NeighborhoodParams = NeighborhoodParams()) -> NormalMap:
    """Full depth-to-normal encoding; per-pixel failures land in the mask."""
    cloud = back_project(depth, intr)
    h, w = depth.shape
    n = np.zeros((h, w, 3), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            if not cloud.valid[r, c]:
                continue
            idx = gather_neighbors(cloud, (r, c), params)
            if len(idx) < 3:
                continue
            pts = cloud.points[tuple(np.array(idx).T)]
            try:
                n[r, c] = fit_normal(pts)
            except DegenerateFitError:
                continue
            valid[r, c] = True
    return NormalMap(n=n, valid=valid)


def fill_invalid(normals: NormalMap) -> NormalMap:
    """Copy each masked pixel's normal from its nearest valid neighbour.

    Keeps the 3D branch input dense. The original mask is preserved so
    downstream consumers still know which pixels were estimated directly.
    A map with no valid pixel at all is filled fronto-parallel (0, 0, -1).
    """
    if normals.valid.all():
        return NormalMap(n=normals.n.copy(), valid=normals.valid.copy())
    filled = normals.n.copy()
    if not normals.valid.any():
        filled[:] = (0.0, 0.0, -1.0)
        return NormalMap(n=filled, valid=normals.valid.copy())
    _, (ir, ic) = ndimage.distance_transform_edt(~normals.valid, return_indices=True)
    hole = ~normals.valid
    filled[hole] = normals.n[ir[hole], ic[hole]]
    return NormalMap(n=filled, valid=normals.valid.copy())
