"""Tip-mounted virtual camera: sphere tracing of the implicit tube surface.

The airway is the same signed-distance view the contact model uses
(distance-to-centerline minus local radius, min over segments), so the
renderer needs no mesh. Shading is a Lambertian headlight attenuated by
depth; frames are grayscale in [0,1].

Two SDF backends:

* ``exact``  - per-edge distances, accurate, used by geometry tests;
* ``grid``   - precomputed voxel grid with trilinear interpolation, the
  fast default for training rollouts. The grid is deterministic for a
  given tree+config and cached per process.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .airway import AirwayTree


@dataclass(frozen=True)
class CameraConfig:
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0        # vertical field of view
    near_clip: float = 0.3      # mm
    max_depth: float = 150.0    # mm
    falloff: float = 0.03       # depth attenuation 1/(1+falloff*depth)
    hit_eps: float = 0.02       # mm, surface convergence threshold
    max_iters: int = 80
    backend: str = "grid"       # "grid" | "exact"
    voxel: float = 1.0          # mm, grid backend resolution

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("resolution must be at least 8x8")
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError("fov must be in (0, 180) degrees")
        if self.backend not in ("grid", "exact"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass(frozen=True)
class Frame:
    values: np.ndarray   # (H,W) float32 in [0,1]
    step: int = 0

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("frame must be 2-D")

    def to_u8(self) -> np.ndarray:
        return np.clip(np.rint(self.values * 255.0), 0, 255).astype(np.uint8)

    def to_pgm(self) -> bytes:
        u8 = self.to_u8()
        h, w = u8.shape
        return f"P5\n{w} {h}\n255\n".encode() + u8.tobytes()

    @staticmethod
    def from_u8(u8: np.ndarray, step: int = 0) -> "Frame":
        return Frame(values=u8.astype(np.float32) / 255.0, step=step)


# --- numba kernels -----------------------------------------------------------

@njit(cache=True)
def _sdf_exact(px, py, pz, starts, vecs, lens2, r0, r1):
    best = 1e30
    for e in range(starts.shape[0]):
        rx = px - starts[e, 0]
        ry = py - starts[e, 1]
        rz = pz - starts[e, 2]
        t = (rx * vecs[e, 0] + ry * vecs[e, 1] + rz * vecs[e, 2]) / lens2[e]
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        dx = rx - t * vecs[e, 0]
        dy = ry - t * vecs[e, 1]
        dz = rz - t * vecs[e, 2]
        d = math.sqrt(dx * dx + dy * dy + dz * dz) - (r0[e] + t * (r1[e] - r0[e]))
        if d < best:
            best = d
    return best


@njit(cache=True)
def _sdf_grid(px, py, pz, grid, ox, oy, oz, inv_v):
    nx, ny, nz = grid.shape
    fx = (px - ox) * inv_v
    fy = (py - oy) * inv_v
    fz = (pz - oz) * inv_v
    if fx < 0.0:
        fx = 0.0
    elif fx > nx - 1.001:
        fx = nx - 1.001
    if fy < 0.0:
        fy = 0.0
    elif fy > ny - 1.001:
        fy = ny - 1.001
    if fz < 0.0:
        fz = 0.0
    elif fz > nz - 1.001:
        fz = nz - 1.001
    i = int(fx)
    j = int(fy)
    k = int(fz)
    ax = fx - i
    ay = fy - j
    az = fz - k
    c00 = grid[i, j, k] * (1 - ax) + grid[i + 1, j, k] * ax
    c10 = grid[i, j + 1, k] * (1 - ax) + grid[i + 1, j + 1, k] * ax
    c01 = grid[i, j, k + 1] * (1 - ax) + grid[i + 1, j, k + 1] * ax
    c11 = grid[i, j + 1, k + 1] * (1 - ax) + grid[i + 1, j + 1, k + 1] * ax
    c0 = c00 * (1 - ay) + c10 * ay
    c1 = c01 * (1 - ay) + c11 * ay
    return c0 * (1 - az) + c1 * az


@njit(cache=True)
def _march_exact(origin, dirs, starts, vecs, lens2, r0, r1,
                 near, max_depth, eps, iters, falloff, out_img, out_depth):
    n = dirs.shape[0]
    h = 0.1  # normal estimation step, mm
    for p in range(n):
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        t = near
        hit = False
        for _ in range(iters):
            px = origin[0] + t * dx
            py = origin[1] + t * dy
            pz = origin[2] + t * dz
            s = _sdf_exact(px, py, pz, starts, vecs, lens2, r0, r1)
            if s > -eps:
                hit = True
                break
            step = -s * 0.9
            if step < 0.02:
                step = 0.02
            t += step
            if t > max_depth:
                break
        if not hit or t > max_depth:
            out_depth[p] = max_depth
            out_img[p] = 0.0
            continue
        px = origin[0] + t * dx
        py = origin[1] + t * dy
        pz = origin[2] + t * dz
        gx = (_sdf_exact(px + h, py, pz, starts, vecs, lens2, r0, r1)
              - _sdf_exact(px - h, py, pz, starts, vecs, lens2, r0, r1))
        gy = (_sdf_exact(px, py + h, pz, starts, vecs, lens2, r0, r1)
              - _sdf_exact(px, py - h, pz, starts, vecs, lens2, r0, r1))
        gz = (_sdf_exact(px, py, pz + h, starts, vecs, lens2, r0, r1)
              - _sdf_exact(px, py, pz - h, starts, vecs, lens2, r0, r1))
        gn = math.sqrt(gx * gx + gy * gy + gz * gz)
        if gn < 1e-12:
            shade = 0.0
        else:
            # inward normal is -grad; headlight at the camera
            shade = (gx * dx + gy * dy + gz * dz) / gn
            if shade < 0.0:
                shade = 0.0
        out_depth[p] = t
        out_img[p] = shade / (1.0 + falloff * t)


@njit(cache=True)
def _march_grid(origin, dirs, grid, ox, oy, oz, inv_v,
                near, max_depth, eps, iters, falloff, out_img, out_depth):
    n = dirs.shape[0]
    h = 0.5
    for p in range(n):
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        t = near
        hit = False
        for _ in range(iters):
            px = origin[0] + t * dx
            py = origin[1] + t * dy
            pz = origin[2] + t * dz
            s = _sdf_grid(px, py, pz, grid, ox, oy, oz, inv_v)
            if s > -eps:
                hit = True
                break
            step = -s * 0.9
            if step < 0.05:
                step = 0.05
            t += step
            if t > max_depth:
                break
        if not hit or t > max_depth:
            out_depth[p] = max_depth
            out_img[p] = 0.0
            continue
        px = origin[0] + t * dx
        py = origin[1] + t * dy
        pz = origin[2] + t * dz
        gx = (_sdf_grid(px + h, py, pz, grid, ox, oy, oz, inv_v)
              - _sdf_grid(px - h, py, pz, grid, ox, oy, oz, inv_v))
        gy = (_sdf_grid(px, py + h, pz, grid, ox, oy, oz, inv_v)
              - _sdf_grid(px, py - h, pz, grid, ox, oy, oz, inv_v))
        gz = (_sdf_grid(px, py, pz + h, grid, ox, oy, oz, inv_v)
              - _sdf_grid(px, py, pz - h, grid, ox, oy, oz, inv_v))
        gn = math.sqrt(gx * gx + gy * gy + gz * gz)
        if gn < 1e-12:
            shade = 0.0
        else:
            shade = (gx * dx + gy * dy + gz * dz) / gn
            if shade < 0.0:
                shade = 0.0
        out_depth[p] = t
        out_img[p] = shade / (1.0 + falloff * t)


# --- grid construction ----------------------------------------------------------

_GRID_CACHE: dict[tuple, tuple] = {}


def _tree_key(tree: AirwayTree) -> str:
    return hashlib.sha256(tree.to_json().encode()).hexdigest()


def build_sdf_grid(tree: AirwayTree, voxel: float = 1.0,
                   sample_spacing: float = 0.5, k_near: int = 8):
    """Voxelized union-tube SDF: (grid f32, origin, voxel). Cached per tree."""
    key = (_tree_key(tree), float(voxel))
    if key in _GRID_CACHE:
        return _GRID_CACHE[key]
    samples = []
    radii = []
    for seg in tree.segments.values():
        arcs = seg.arc_positions()
        s = np.arange(0.0, arcs[-1] + sample_spacing / 2, sample_spacing)
        pts = np.stack([np.interp(s, arcs, seg.points[:, k]) for k in range(3)], axis=1)
        samples.append(pts)
        radii.append(np.interp(s, arcs, seg.radii))
    samples = np.vstack(samples)
    radii = np.concatenate(radii)
    kdt = cKDTree(samples)

    lo = tree.bbox[0] - 2 * voxel
    hi = tree.bbox[1] + 2 * voxel
    dims = np.ceil((hi - lo) / voxel).astype(int) + 1
    xs = lo[0] + voxel * np.arange(dims[0])
    ys = lo[1] + voxel * np.arange(dims[1])
    zs = lo[2] + voxel * np.arange(dims[2])
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    k = min(k_near, len(samples))
    dist, idx = kdt.query(pts, k=k, workers=-1)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    sdf = (dist - radii[idx]).min(axis=1)
    grid = sdf.reshape(dims).astype(np.float32)
    result = (grid, lo.astype(np.float64), float(voxel))
    _GRID_CACHE[key] = result
    return result


def camera_basis(forward: np.ndarray,
                 up_hint: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(right, up) for a view direction.

    With an up hint (the instrument frame's y axis) the image rolls with
    the instrument, so bend actions map to fixed image directions. Without
    one the camera is world-roll-stabilized.
    """
    f = forward / np.linalg.norm(forward)
    if up_hint is None:
        hint = np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(f, hint)
        n = np.linalg.norm(right)
        right = right / n
        up = np.cross(right, f)
        return right, up
    up = np.asarray(up_hint, dtype=np.float64)
    up = up - np.dot(up, f) * f
    n = np.linalg.norm(up)
    if n < 1e-9:
        return camera_basis(f, None)
    up /= n
    right = np.cross(f, up)
    return right, up


class LumenRenderer:
    """Renders grayscale frames from a pose inside the airway tree."""

    def __init__(self, tree: AirwayTree, config: CameraConfig | None = None):
        self.tree = tree
        self.config = config or CameraConfig()
        starts, vecs, lens, _, _, r0, r1 = tree.edge_arrays()
        self._starts = np.ascontiguousarray(starts)
        self._vecs = np.ascontiguousarray(vecs)
        self._lens2 = np.ascontiguousarray(lens * lens)
        self._r0 = np.ascontiguousarray(r0)
        self._r1 = np.ascontiguousarray(r1)
        if self.config.backend == "grid":
            self._grid, self._grid_origin, self._voxel = build_sdf_grid(
                tree, voxel=self.config.voxel)
        self._dirs_cache: dict[tuple, np.ndarray] = {}

    def _pixel_dirs(self, forward: np.ndarray) -> np.ndarray:
        cfg = self.config
        f = forward / np.linalg.norm(forward)
        right, up = camera_basis(f)
        key = (cfg.width, cfg.height, round(float(f[0]), 12), round(float(f[1]), 12),
               round(float(f[2]), 12))
        cached = self._dirs_cache.get(key)
        if cached is not None:
            return cached
        sv = np.tan(np.radians(cfg.fov_deg) / 2.0)
        su = sv * cfg.width / cfg.height
        u = ((np.arange(cfg.width) + 0.5) / cfg.width * 2.0 - 1.0) * su
        v = ((np.arange(cfg.height) + 0.5) / cfg.height * 2.0 - 1.0) * sv
        uu, vv = np.meshgrid(u, v)
        dirs = (f[None, None, :] + uu[..., None] * right[None, None, :]
                - vv[..., None] * up[None, None, :])
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        dirs = np.ascontiguousarray(dirs.reshape(-1, 3))
        if len(self._dirs_cache) > 8:
            self._dirs_cache.clear()
        self._dirs_cache[key] = dirs
        return dirs

    def render(self, position, forward, step: int = 0,
               with_depth: bool = False):
        """Pure function of (tree, pose, config); identical inputs give
        bit-identical frames. Outside-tube poses give the black frame."""
        cfg = self.config
        pos = np.asarray(position, dtype=np.float64)
        if float(self.tree.signed_distances(pos.reshape(1, 3))[0]) >= 0.0:
            img = np.zeros((cfg.height, cfg.width), dtype=np.float32)
            if with_depth:
                return Frame(img, step), np.full((cfg.height, cfg.width), cfg.max_depth)
            return Frame(img, step)
        dirs = self._pixel_dirs(np.asarray(forward, dtype=np.float64))
        n = dirs.shape[0]
        out_img = np.zeros(n, dtype=np.float64)
        out_depth = np.zeros(n, dtype=np.float64)
        if cfg.backend == "exact":
            _march_exact(pos, dirs, self._starts, self._vecs, self._lens2,
                         self._r0, self._r1, cfg.near_clip, cfg.max_depth,
                         cfg.hit_eps, cfg.max_iters, cfg.falloff, out_img, out_depth)
        else:
            _march_grid(pos, dirs, self._grid, self._grid_origin[0],
                        self._grid_origin[1], self._grid_origin[2], 1.0 / self._voxel,
                        cfg.near_clip, cfg.max_depth, cfg.hit_eps, cfg.max_iters,
                        cfg.falloff, out_img, out_depth)
        img = np.clip(out_img, 0.0, 1.0).astype(np.float32).reshape(cfg.height, cfg.width)
        frame = Frame(img, step)
        if with_depth:
            return frame, out_depth.reshape(cfg.height, cfg.width)
        return frame


class FrameStack:
    """Sliding window of the last 3 frames, oldest first; the first frame
    is replicated to fill the window after a reset."""

    def __init__(self):
        self._frames: list[Frame] = []

    def reset(self, frame: Frame) -> None:
        self._frames = [frame, frame, frame]

    def push(self, frame: Frame) -> None:
        if not self._frames:
            self.reset(frame)
            return
        self._frames = self._frames[1:] + [frame]

    def get(self) -> list[Frame]:
        if not self._frames:
            raise RuntimeError("frame stack is empty; reset first")
        return list(self._frames)

    def as_array(self) -> np.ndarray:
        return np.stack([f.values for f in self.get()])
