"""Cameras on the viewing circle and volume-to-silhouette projection.

Two projectors operate on the same geometry:

* ``project_silhouette`` is differentiable: each pixel's ray takes K
  trilinear samples through the occupancy volume and max-pools them, with
  the subgradient routed to the first maximal sample.
* ``raycast_render`` is the exact, non-differentiable counterpart used to
  build datasets and to cross-check the differentiable path: first-hit voxel
  traversal of a strictly binary volume, also producing a normalized depth map.

World conventions: the volume occupies the cube [-0.5, 0.5]^3 (one
volume-width per side), axis order (x, y, z) with z up. Voxel (i, j, k)
is centered at ((i + 0.5)/D - 0.5, ...), so continuous index space puts
lattice points at voxel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_ELEVATION_DEG = 30.0
DEFAULT_RADIUS = 2.0
VIEW_SPACING_DEG = 15.0
N_GRID_VIEWS = 24
# FOV such that the volume's bounding sphere spans ~80% of the image half-extent
FOV_FILL = 0.8
_BOUND_RADIUS = math.sqrt(3.0) / 2.0


def grid_azimuths(spacing: float = VIEW_SPACING_DEG) -> np.ndarray:
    return np.arange(0.0, 360.0, spacing)


@dataclass(frozen=True)
class ViewPose:
    """Camera pose on the viewing circle: azimuth varies, the rest is fixed."""

    azimuth: float
    elevation: float = DEFAULT_ELEVATION_DEG
    radius: float = DEFAULT_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        if self.radius <= _BOUND_RADIUS:
            raise ValueError(f"camera radius {self.radius} is inside the volume")


def default_tan_half_fov(radius: float = DEFAULT_RADIUS) -> float:
    return _BOUND_RADIUS / (FOV_FILL * radius)


def camera_matrix(view: ViewPose) -> np.ndarray:
    """4x4 world-to-camera transform for a pose looking at the volume center.

    Camera axes: x along image columns, y along image rows (downward), z along
    the optical axis toward the volume, so the center maps to (0, 0, radius).
    """
    az = math.radians(view.azimuth)
    el = math.radians(view.elevation)
    pos = view.radius * np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    forward = -pos / np.linalg.norm(pos)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    mat = np.eye(4)
    mat[0, :3] = right
    mat[1, :3] = down
    mat[2, :3] = forward
    mat[:3, 3] = -mat[:3, :3] @ pos
    return mat


def _pixel_rays(view: ViewPose, height: int, width: int, tan_half_fov: float):
    """Ray origin (camera position) and unit directions, one per pixel."""
    mat = camera_matrix(view)
    rot = mat[:3, :3]
    origin = -rot.T @ mat[:3, 3]
    cols = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    rows = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    u, v = np.meshgrid(cols, rows)  # u: columns (x), v: rows (y)
    aspect = width / height
    d_cam = np.stack(
        [u * tan_half_fov * aspect, v * tan_half_fov, np.ones_like(u)], axis=-1
    )
    d_world = d_cam @ rot  # row vectors through R^T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return origin, d_world.reshape(-1, 3)


def _ray_box_span(origin: np.ndarray, dirs: np.ndarray):
    """Entry/exit distances of each ray against the volume cube, hit mask."""
    moving = dirs != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(moving, 1.0 / np.where(moving, dirs, 1.0), np.inf)
        t_lo = (-0.5 - origin) * inv
        t_hi = (0.5 - origin) * inv
    t_min = np.minimum(t_lo, t_hi)
    t_max = np.maximum(t_lo, t_hi)
    # axes with zero direction: the slab is crossed for all t iff the origin
    # coordinate lies inside it, and never otherwise
    inside = np.abs(origin)[None, :] <= 0.5
    t_min = np.where(moving, t_min, np.where(inside, -np.inf, np.inf))
    t_max = np.where(moving, t_max, np.where(inside, np.inf, -np.inf))
    near = np.maximum(t_min.max(axis=1), 0.0)
    far = t_max.min(axis=1)
    return near, far, far > near


def trilinear_corners(resolution: int, points: np.ndarray):
    """Corner gather indices and weights for trilinear interpolation.

    ``points`` are continuous coordinates in index space; anything outside
    [0, D-1]^3 reads occupancy zero, realized by routing out-of-range corners
    to a ghost cell at flat index D^3. Returns (flat_idx, weights) shaped
    (..., 8).
    """
    d = resolution
    pts = np.asarray(points, dtype=np.float64)
    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    ghost = d * d * d
    idx = np.empty(pts.shape[:-1] + (8,), dtype=np.int64)
    wgt = np.empty(pts.shape[:-1] + (8,), dtype=np.float64)
    for c, (ox, oy, oz) in enumerate(np.ndindex(2, 2, 2)):
        cx = base[..., 0] + ox
        cy = base[..., 1] + oy
        cz = base[..., 2] + oz
        valid = (
            (cx >= 0) & (cx < d) & (cy >= 0) & (cy < d) & (cz >= 0) & (cz < d)
        )
        flat = (cx * d + cy) * d + cz
        idx[..., c] = np.where(valid, flat, ghost)
        wx = frac[..., 0] if ox else 1.0 - frac[..., 0]
        wy = frac[..., 1] if oy else 1.0 - frac[..., 1]
        wz = frac[..., 2] if oz else 1.0 - frac[..., 2]
        wgt[..., c] = wx * wy * wz
    return idx, wgt


def _with_ghost(volume: np.ndarray) -> np.ndarray:
    flat = np.append(volume.reshape(-1), 0.0)
    return flat


def trilinear_sample(volume, points: np.ndarray):
    """Interpolate the volume at continuous index-space points.

    Accepts a (D, D, D) ndarray (plain evaluation) or Tensor (differentiable
    with respect to the volume values).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if isinstance(volume, Tensor):
        vol_data = volume.data
    else:
        vol_data = np.asarray(volume, dtype=np.float64)
    d = vol_data.shape[0]
    if vol_data.shape != (d, d, d):
        raise ValueError(f"expected a cubic volume, got shape {vol_data.shape}")
    idx, wgt = trilinear_corners(d, pts)
    vals = (_with_ghost(vol_data)[idx] * wgt).sum(axis=-1)
    if not isinstance(volume, Tensor):
        return vals

    def vjp(g):
        contrib = (g[..., None] * wgt).reshape(-1)
        acc = np.bincount(idx.reshape(-1), weights=contrib, minlength=d**3 + 1)
        return [acc[: d**3].reshape(d, d, d)]

    return ad.apply_op(vals, (volume,), vjp)


@lru_cache(maxsize=16)
def _projection_grid(resolution: int, height: int, width: int, samples: int,
                     azimuth: float, elevation: float, radius: float,
                     tan_half_fov: float):
    """Precomputed per-pixel trilinear gather tables for one fixed pose.

    Rays that miss the volume get all-ghost corners, i.e. contribute zeros.
    """
    view = ViewPose(azimuth, elevation, radius)
    origin, dirs = _pixel_rays(view, height, width, tan_half_fov)
    near, far, hit = _ray_box_span(origin, dirs)
    n_px = dirs.shape[0]
    t = np.zeros((n_px, samples))
    span = np.where(hit, far - near, 0.0)
    offsets = (np.arange(samples) + 0.5) / samples
    t[:] = near[:, None] + span[:, None] * offsets[None, :]
    pts_world = origin[None, None, :] + t[..., None] * dirs[:, None, :]
    pts_idx = (pts_world + 0.5) * resolution - 0.5
    idx, wgt = trilinear_corners(resolution, pts_idx)
    ghost = resolution**3
    idx[~hit] = ghost
    idx.setflags(write=False)
    wgt.setflags(write=False)
    # sparse gather operator: row (pixel*K + sample) sums its 8 corner weights
    rows = np.repeat(np.arange(n_px * samples), 8)
    gather = sparse.csr_matrix(
        (wgt.reshape(-1), (rows, idx.reshape(-1))),
        shape=(n_px * samples, ghost + 1),
    )
    return idx, wgt, gather


def project_silhouette(volume, view: ViewPose, image_hw: tuple[int, int] = (32, 32),
                       depth_samples: int = 32, tan_half_fov: float | None = None):
    """Differentiable silhouette: per pixel, max of K trilinear ray samples.

    Monotone in the volume values; the subgradient at a pixel flows to the
    eight corners of its first maximal sample. A leading batch axis on the
    volume projects every batch member through the same rays.
    """
    if depth_samples < 1:
        raise ValueError(f"depth_samples must be >= 1, got {depth_samples}")
    if isinstance(volume, Tensor):
        vol_data = volume.data
    else:
        vol_data = np.asarray(volume, dtype=np.float64)
    batched = vol_data.ndim == 4
    d = vol_data.shape[-1]
    if vol_data.shape[-3:] != (d, d, d) or vol_data.ndim not in (3, 4):
        raise ValueError(f"expected a [N x] cubic volume, got shape {vol_data.shape}")
    h, w = image_hw
    if tan_half_fov is None:
        tan_half_fov = default_tan_half_fov(view.radius)
    idx, wgt, gather = _projection_grid(
        d, h, w, depth_samples, view.azimuth, view.elevation, view.radius, tan_half_fov
    )
    vb = vol_data if batched else vol_data[None]
    n = vb.shape[0]
    ghosted = np.concatenate(
        [vb.reshape(n, -1), np.zeros((n, 1))], axis=1
    )  # (N, D^3 + 1)
    vals = (gather @ ghosted.T).T.reshape(n, -1, depth_samples)  # (N, pixels, K)
    best = vals.argmax(axis=2)  # first maximal sample per (member, pixel)
    px = np.arange(vals.shape[1])
    sil = vals[np.arange(n)[:, None], px[None, :], best].reshape(n, h, w)
    if not batched:
        sil = sil[0]
    if not isinstance(volume, Tensor):
        return sil

    def vjp(g):
        gb = g if batched else g[None]
        gw = gb.reshape(n, -1)[..., None] * wgt[px[None, :], best]  # (N, pixels, 8)
        cell = d**3 + 1
        flat = idx[px[None, :], best] + (np.arange(n) * cell)[:, None, None]
        acc = np.bincount(flat.reshape(-1), weights=gw.reshape(-1), minlength=n * cell)
        dv = acc.reshape(n, cell)[:, : d**3].reshape(vb.shape)
        return [dv if batched else dv[0]]

    return ad.apply_op(sil, (volume,), vjp)


def depth_limits(radius: float) -> tuple[float, float]:
    """Distance window used to normalize depth maps: the bounding-sphere span."""
    return radius - _BOUND_RADIUS, radius + _BOUND_RADIUS


def raycast_render(volume: np.ndarray, view: ViewPose,
                   image_hw: tuple[int, int] = (32, 32),
                   tan_half_fov: float | None = None):
    """Exact first-hit rendering of a strictly binary volume.

    Returns (silhouette, depth): silhouette is 1.0 where the pixel ray
    intersects an occupied voxel; depth is the normalized distance to the
    first hit and 1.0 for misses.
    """
    vol = np.asarray(volume, dtype=np.float64)
    d = vol.shape[0]
    if vol.shape != (d, d, d):
        raise ValueError(f"expected a cubic volume, got shape {vol.shape}")
    if not np.all((vol == 0.0) | (vol == 1.0)):
        raise ValueError("raycast_render requires a strictly binary volume")
    occ = vol.reshape(-1) > 0.5
    h, w = image_hw
    if tan_half_fov is None:
        tan_half_fov = default_tan_half_fov(view.radius)
    origin, dirs = _pixel_rays(view, h, w, tan_half_fov)
    near, far, hit = _ray_box_span(origin, dirs)
    n_px = dirs.shape[0]
    voxel = 1.0 / d

    active = hit.copy()
    t_enter = near.copy()
    t_hit = np.full(n_px, np.inf)

    eps = 1e-9
    p_entry = origin[None, :] + (near + eps)[:, None] * dirs
    vox = np.clip(np.floor((p_entry + 0.5) * d).astype(np.int64), 0, d - 1)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(dirs != 0.0, voxel / np.abs(dirs), np.inf)
        boundary = (vox + (step > 0)) * voxel - 0.5
        t_next = np.where(dirs != 0.0, (boundary - origin[None, :]) / dirs, np.inf)

    flat_stride = np.array([d * d, d, 1], dtype=np.int64)
    for _ in range(3 * d + 2):
        if not active.any():
            break
        ai = np.nonzero(active)[0]
        flat = vox[ai] @ flat_stride
        hits_now = occ[flat]
        hit_idx = ai[hits_now]
        t_hit[hit_idx] = t_enter[hit_idx]
        active[hit_idx] = False
        walk = ai[~hits_now]
        if walk.size == 0:
            continue
        axis = np.argmin(t_next[walk], axis=1)
        t_enter[walk] = t_next[walk, axis]
        vox[walk, axis] += step[walk, axis]
        t_next[walk, axis] += t_delta[walk, axis]
        out = (vox[walk, axis] < 0) | (vox[walk, axis] >= d)
        active[walk[out]] = False

    sil = np.isfinite(t_hit).astype(np.float64).reshape(h, w)
    z0, z1 = depth_limits(view.radius)
    depth = np.where(
        np.isfinite(t_hit), np.clip((t_hit - z0) / (z1 - z0), 0.0, 1.0), 1.0
    ).reshape(h, w)
    return sil, depth


@dataclass
class Projector:
    """Bundles the image geometry shared by dataset rendering and losses."""

    image_hw: tuple[int, int] = (32, 32)
    depth_samples: int = 32
    elevation: float = DEFAULT_ELEVATION_DEG
    radius: float = DEFAULT_RADIUS
    tan_half_fov: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.tan_half_fov is None:
            self.tan_half_fov = default_tan_half_fov(self.radius)

    def pose(self, azimuth: float) -> ViewPose:
        return ViewPose(azimuth, self.elevation, self.radius)

    def silhouette(self, volume, azimuth: float):
        return project_silhouette(
            volume, self.pose(azimuth), self.image_hw, self.depth_samples,
            self.tan_half_fov,
        )

    def raycast(self, volume: np.ndarray, azimuth: float):
        return raycast_render(volume, self.pose(azimuth), self.image_hw, self.tan_half_fov)
