"""Synthetic indoor scenes: analytic planes and boxes rendered to RGB-D + labels.

Each scene is a room box seen from the origin (camera looks down +z, y points
down), furnished with axis-aligned boxes and a door/window cut into the
walls. Depth comes from exact ray-plane and ray-box intersections, so the
scene doubles as an oracle for the normal-estimation stage: every pixel
carries its analytic surface normal and a plane identifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import netpbm
from .errors import GenerationError
from .geometry import CameraIntrinsics, DepthMap

CLASS_NAMES = ("floor", "wall", "ceiling", "furniture", "window", "door")
FLOOR, WALL, CEILING, FURNITURE, WINDOW, DOOR = range(6)

_BASE_COLORS = np.array([
    (0.55, 0.35, 0.12),   # floor: warm brown
    (0.78, 0.78, 0.78),   # wall: grey (brightness re-sampled per scene)
    (0.90, 0.90, 0.90),   # ceiling: grey (brightness re-sampled per scene)
    (0.15, 0.25, 0.65),   # furniture: deep blue
    (0.35, 0.75, 0.95),   # window: cyan
    (0.70, 0.15, 0.55),   # door: magenta
])


def _scene_palette(rng) -> np.ndarray:
    """Per-scene colors. Wall and ceiling greys are drawn from overlapping
    ranges (either may be the brighter one), so appearance alone cannot tell
    them apart across scenes; surface orientation can.
    """
    palette = _BASE_COLORS.copy()
    wall = rng.uniform(0.66, 0.94)
    ceiling = rng.uniform(0.70, 0.98)
    while abs(ceiling - wall) < 0.07:  # keep them separable within one scene
        ceiling = rng.uniform(0.70, 0.98)
    palette[WALL] = wall
    palette[CEILING] = ceiling
    jitter = rng.uniform(-0.04, 0.04, size=(6, 3))
    jitter[[WALL, CEILING]] = 0.0
    return np.clip(palette + jitter, 0.0, 1.0)


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 64
    noise_rgb: float = 0.02
    noise_depth: float = 0.0
    max_boxes: int = 2
    max_attempts: int = 100
    focal_range: tuple[float, float] = (0.50, 0.60)  # focal length / image width
    depth_range: tuple[float, float] = (3.2, 4.8)    # back-wall distance, metres
    # Layouts are rejected until every class covers this pixel fraction;
    # disabled for thumbnails where single classes cannot physically fit.
    min_class_fraction: float = 0.015

    def class_check_active(self) -> bool:
        return self.min_class_fraction > 0 and min(self.height, self.width) >= 32


def geometry_oracle_params(size: int = 64) -> SceneParams:
    """Scene parameters for normal-estimation oracle runs.

    A narrow field of view keeps every visible plane pixel at least ~22 rows
    from its vanishing line, where adjacent-row relative depth gaps stay
    below the 5% neighbour gate; otherwise slanted floors and ceilings lose
    their off-row neighbours and the plane fit degenerates. Boxes are left
    out for the same reason (their top faces sit near the horizon).
    """
    return SceneParams(height=size, width=size, noise_rgb=0.0, max_boxes=0,
                       focal_range=(1.25, 1.35), depth_range=(3.0, 3.6))


@dataclass
class SyntheticScene:
    """RGB-D sample with labels; analytic diagnostics when generated here."""

    rgb: np.ndarray                # H,W,3 in [0,1]
    depth: DepthMap
    intrinsics: CameraIntrinsics
    labels: np.ndarray             # H,W class indices
    seed: Optional[int] = None
    gt_normals: Optional[np.ndarray] = None   # H,W,3 canonical sign
    plane_id: Optional[np.ndarray] = None     # H,W geometric surface id


def canonical_sign(n: np.ndarray) -> np.ndarray:
    """Match the normal-fit sign rule: n_z <= 0, ties by first positive."""
    n = np.array(n, dtype=np.float64)
    flat = n.reshape(-1, 3)
    flip = flat[:, 2] > 0
    zmask = flat[:, 2] == 0
    first = np.where(flat[:, 0] != 0, flat[:, 0], flat[:, 1])
    flip |= zmask & (first < 0)
    flat[flip] *= -1.0
    return flat.reshape(n.shape)


def _ray_grid(h, w, intr):
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    dx = np.broadcast_to((u - intr.cx) / intr.fx, (h, w))
    dy = np.broadcast_to((v - intr.cy) / intr.fy, (h, w))
    return dx, dy


def _box_hit(dx, dy, lo, hi):
    """First-intersection distance and face axis for a ray bundle vs an AABB."""
    t_near = np.full(dx.shape, -np.inf)
    t_far = np.full(dx.shape, np.inf)
    axis = np.zeros(dx.shape, dtype=np.int8)
    sign = np.zeros(dx.shape, dtype=np.int8)
    for ax, d in enumerate((dx, dy, np.ones_like(dx))):
        with np.errstate(divide="ignore"):
            t1 = lo[ax] / d
            t2 = hi[ax] / d
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        better = near > t_near
        t_near = np.where(better, near, t_near)
        axis = np.where(better, ax, axis)
        sign = np.where(better, np.where(d > 0, -1, 1), sign).astype(np.int8)
        t_far = np.minimum(t_far, far)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf), axis, sign


def _sample_layout(rng, params):
    room = {
        "yf": rng.uniform(1.0, 1.3),
        "yc": rng.uniform(1.0, 1.3),
        "zb": rng.uniform(*params.depth_range),
        "xw": rng.uniform(1.6, 2.3),
    }
    yf, zb, xw = room["yf"], room["zb"], room["xw"]

    boxes = []
    n_boxes = rng.integers(1, params.max_boxes + 1) if params.max_boxes else 0
    for _ in range(n_boxes):
        for _ in range(20):
            bw = rng.uniform(0.8, 1.4)
            bd = rng.uniform(0.5, 0.9)
            bh = rng.uniform(0.6, 1.1)
            cx = rng.uniform(-0.6 * xw, 0.6 * xw)
            z0 = rng.uniform(1.5, min(3.0, zb - 1.2))
            box = (cx - bw / 2, cx + bw / 2, yf - bh, yf, z0, z0 + bd)
            clear = all(
                box[1] + 0.15 < b[0] or b[1] + 0.15 < box[0]
                or box[5] + 0.15 < b[4] or b[5] + 0.15 < box[4]
                for b in boxes
            )
            if clear and abs(cx) + bw / 2 < xw - 0.1:
                boxes.append(box)
                break

    dw = rng.uniform(0.9, 1.3)
    dcx = rng.uniform(-xw + dw / 2 + 0.2, xw - dw / 2 - 0.2)
    dh = rng.uniform(0.8, 0.92) * (room["yf"] + room["yc"])
    door = (dcx - dw / 2, dcx + dw / 2, yf - dh)

    wall = rng.choice(["left", "right", "back"])
    wl = rng.uniform(1.1, 1.7)
    wy0 = -room["yc"] + rng.uniform(0.1, 0.3)
    wy1 = wy0 + rng.uniform(0.8, 1.2)
    if wall != "back" and 1.6 + wl / 2 >= zb - wl / 2 - 0.2:
        wall = "back"  # side wall too shallow for this window
    if wall == "back":
        for _ in range(20):
            wc = rng.uniform(-xw + wl / 2 + 0.2, xw - wl / 2 - 0.2)
            if wc + wl / 2 < door[0] - 0.1 or door[1] + 0.1 < wc - wl / 2:
                break
        else:
            return None
        window = ("back", wc - wl / 2, wc + wl / 2, wy0, wy1)
    else:
        wc = rng.uniform(1.6 + wl / 2, zb - wl / 2 - 0.2)
        window = (wall, wc - wl / 2, wc + wl / 2, wy0, wy1)
    return room, boxes, door, window


def _render(room, boxes, door, window, intr, h, w):
    dx, dy = _ray_grid(h, w, intr)
    dz = np.ones_like(dx)
    yf, yc, zb, xw = room["yf"], room["yc"], room["zb"], room["xw"]

    # Room shell: nearest positive boundary plane along each ray.
    with np.errstate(divide="ignore"):
        candidates = [
            (np.where(dy > 0, yf / dy, np.inf), FLOOR, (0, 1, 0), 0),
            (np.where(dy < 0, -yc / dy, np.inf), CEILING, (0, 1, 0), 1),
            (np.where(dx < 0, -xw / dx, np.inf), WALL, (1, 0, 0), 2),
            (np.where(dx > 0, xw / dx, np.inf), WALL, (1, 0, 0), 3),
            (np.full(dx.shape, zb), WALL, (0, 0, -1), 4),
        ]
    t = np.full((h, w), np.inf)
    labels = np.zeros((h, w), dtype=np.uint8)
    normals = np.zeros((h, w, 3))
    plane = np.zeros((h, w), dtype=np.int32)
    for tc_, cls, nrm, pid in candidates:
        better = tc_ < t
        t = np.where(better, tc_, t)
        labels[better] = cls
        normals[better] = nrm
        plane[better] = pid

    # Door and window rectangles re-label their carrier wall.
    px = t * dx
    py = t * dy
    pz = t * dz
    on_back = plane == 4
    d0, d1, dtop = door
    in_door = on_back & (px >= d0) & (px <= d1) & (py >= dtop)
    labels[in_door] = DOOR
    wside, w0, w1, wy0, wy1 = window
    if wside == "back":
        in_win = on_back & (px >= w0) & (px <= w1) & (py >= wy0) & (py <= wy1)
    else:
        side_pid = 2 if wside == "left" else 3
        in_win = (plane == side_pid) & (pz >= w0) & (pz <= w1) & (py >= wy0) & (py <= wy1)
    labels[in_win] = WINDOW

    # Furniture boxes occlude everything behind them.
    for bi, (x0, x1, y0, y1, z0, z1) in enumerate(boxes):
        tb, axis, sign = _box_hit(dx, dy, (x0, y0, z0), (x1, y1, z1))
        better = tb < t
        t = np.where(better, tb, t)
        labels[better] = FURNITURE
        plane[better] = 5 + 6 * bi + 2 * axis[better] + (sign[better] > 0)
        face = np.zeros((h, w, 3))
        for ax in range(3):
            face[..., ax] = np.where(axis == ax, sign, 0)
        normals[better] = face[better]

    normals = canonical_sign(normals)
    return t, labels, normals, plane


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    """Deterministic scene for a seed; layouts violating constraints are resampled."""
    rng = np.random.default_rng(seed)
    h, w = params.height, params.width
    f = w * rng.uniform(*params.focal_range)
    intr = CameraIntrinsics(fx=f, fy=f,
                            cx=(w - 1) / 2 + rng.uniform(-0.5, 0.5),
                            cy=(h - 1) / 2 + rng.uniform(-0.5, 0.5))

    required = [FLOOR, WALL, CEILING, WINDOW, DOOR]
    if params.max_boxes:
        required.append(FURNITURE)
    for _ in range(params.max_attempts):
        layout = _sample_layout(rng, params)
        if layout is None:
            continue
        room, boxes, door, window = layout
        depth, labels, normals, plane = _render(room, boxes, door, window, intr, h, w)
        if not np.isfinite(depth).all():
            continue
        if params.class_check_active():
            counts = np.bincount(labels.ravel(), minlength=6)
            if counts[required].min() < params.min_class_fraction * labels.size:
                continue
        break
    else:
        raise GenerationError(f"no admissible layout for seed {seed} "
                              f"after {params.max_attempts} attempts")

    if params.noise_depth > 0:
        depth = depth * (1.0 + params.noise_depth * rng.standard_normal(depth.shape))
        depth = np.clip(depth, 0.05, 99.0)

    rgb = _scene_palette(rng)[labels]
    phase = rng.uniform(0, 2 * np.pi, size=2)
    freq = rng.uniform(0.15, 0.45, size=2)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    texture = 0.06 * np.sin(freq[0] * uu + phase[0]) * np.cos(freq[1] * vv + phase[1])
    rgb = rgb + texture[..., None]
    if params.noise_rgb > 0:
        rgb = rgb + params.noise_rgb * rng.standard_normal(rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    return SyntheticScene(
        rgb=rgb,
        depth=DepthMap(z=depth, valid=np.ones_like(depth, dtype=bool)),
        intrinsics=intr,
        labels=labels,
        seed=seed,
        gt_normals=normals,
        plane_id=plane,
    )


def save_scene(scene: SyntheticScene, directory) -> None:
    """Write the declared on-disk layout: rgb.ppm, depth.pgm, intrinsics.txt, labels.pgm."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    netpbm.write_ppm(directory / "rgb.ppm", np.round(scene.rgb * 255.0))
    netpbm.write_depth_pgm(directory / "depth.pgm", scene.depth.z, scene.depth.valid)
    netpbm.write_intrinsics_text(directory / "intrinsics.txt",
                                 scene.intrinsics.fx, scene.intrinsics.fy,
                                 scene.intrinsics.cx, scene.intrinsics.cy)
    netpbm.write_pgm(directory / "labels.pgm", scene.labels.astype(np.uint8), 255)


def load_scene(directory) -> SyntheticScene:
    directory = Path(directory)
    rgb, _ = netpbm.read_ppm(directory / "rgb.ppm")
    z, valid = netpbm.read_depth_pgm(directory / "depth.pgm")
    intr = netpbm.read_intrinsics_text(directory / "intrinsics.txt")
    labels, _ = netpbm.read_pgm(directory / "labels.pgm")
    return SyntheticScene(
        rgb=rgb.astype(np.float64) / 255.0,
        depth=DepthMap(z=z, valid=valid),
        intrinsics=CameraIntrinsics(**intr),
        labels=labels.astype(np.int64),
    )
