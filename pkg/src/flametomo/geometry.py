"""Cameras, ray generation, box intersection and exact voxel traversal.

Flat cell indices are x-fastest: ``flat = i + Nx * (j + Ny * k)``. Points on a
shared cell face belong to the cell with the larger index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels


class GeometryError(ValueError):
    pass


def _vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(3)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridGeometry:
    box_min: np.ndarray
    box_max: np.ndarray
    dims: tuple[int, int, int]
    spacing: np.ndarray = field(init=False)

    def __post_init__(self):
        bmin, bmax = _vec3(self.box_min), _vec3(self.box_max)
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise GeometryError(f"dims must be three positive integers, got {self.dims}")
        if not np.all(bmax > bmin):
            raise GeometryError("box_max must exceed box_min componentwise")
        object.__setattr__(self, "box_min", bmin)
        object.__setattr__(self, "box_max", bmax)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _vec3((bmax - bmin) / np.array(dims)))

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        return self.box_max - self.box_min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.box_min + self.box_max)

    def flat_index(self, i, j, k):
        return i + self.dims[0] * (j + self.dims[1] * k)

    def unflatten(self, flat):
        flat = np.asarray(flat)
        nx, ny = self.dims[0], self.dims[1]
        return flat % nx, (flat // nx) % ny, flat // (nx * ny)

    def cell_centers(self) -> np.ndarray:
        """Centers of all cells, shape (n_cells, 3), x-fastest."""
        axes = [self.box_min[a] + (np.arange(self.dims[a]) + 0.5) * self.spacing[a] for a in range(3)]
        z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def locate(self, points):
        """Cell (i, j, k) for each point plus an inside-box mask.

        Face ties go to the larger index (floor); points on the upper box
        faces are clamped into the last cell.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = (pts - self.box_min) / self.spacing
        ijk = np.floor(rel).astype(np.int64)
        inside = np.all((pts >= self.box_min) & (pts <= self.box_max), axis=1)
        ijk = np.clip(ijk, 0, np.array(self.dims) - 1)
        return ijk, inside

    def contains(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((pts >= self.box_min) & (pts <= self.box_max), axis=1)

    def normalize(self, points):
        """Map box coordinates to [-1, 1]^3."""
        return 2.0 * (np.asarray(points) - self.box_min) / self.extent - 1.0


@dataclass(frozen=True)
class Camera:
    origin: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    focal_length: float
    sensor_halfwidth: float
    pixels_x: int
    pixels_y: int

    def __post_init__(self):
        for name in ("origin", "look_at", "up"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        if self.focal_length <= 0:
            raise GeometryError("focal_length must be positive")
        if self.sensor_halfwidth <= 0:
            raise GeometryError("sensor_halfwidth must be positive")
        if int(self.pixels_x) < 1 or int(self.pixels_y) < 1:
            raise GeometryError("camera needs at least one pixel per axis")
        forward = self.look_at - self.origin
        if np.linalg.norm(forward) == 0:
            raise GeometryError("look_at coincides with origin")
        cross = np.cross(forward / np.linalg.norm(forward), self.up)
        if np.linalg.norm(cross) < 1e-9 * max(np.linalg.norm(self.up), 1e-300):
            raise GeometryError("up vector is parallel to the viewing direction")

    @property
    def n_pixels(self) -> int:
        return int(self.pixels_x) * int(self.pixels_y)

    def frame(self):
        """Orthonormal (right, true_up, forward) basis of the camera."""
        w = self.look_at - self.origin
        w = w / np.linalg.norm(w)
        u = np.cross(w, self.up)
        u /= np.linalg.norm(u)
        v = np.cross(u, w)
        return u, v, w


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf


class Segment(NamedTuple):
    cell_index: tuple[int, int, int]
    length: float
    midpoint_t: float


def camera_rays(camera: Camera):
    """Origins and unit directions for every pixel, row-major, shapes (P, 3)."""
    u, v, w = camera.frame()
    px, py = int(camera.pixels_x), int(camera.pixels_y)
    h = camera.sensor_halfwidth
    # square pixels: the vertical half-height follows the aspect ratio
    pitch = 2.0 * h / px
    sx = -h + (np.arange(px) + 0.5) * pitch
    sy = 0.5 * py * pitch - (np.arange(py) + 0.5) * pitch
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    d = camera.focal_length * w[None, :] + gx.reshape(-1, 1) * u[None, :] + gy.reshape(-1, 1) * v[None, :]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.origin, d.shape).copy()
    return o, d


def generate_rays(camera: Camera) -> list[Ray]:
    """One ray per pixel center through the pinhole, row-major (row 0 at the top)."""
    o, d = camera_rays(camera)
    return [Ray(o[i], d[i]) for i in range(len(d))]


def default_cameras(geom: GridGeometry, pixels: int = 32, focal_length: float = 0.59,
                    standoff: float = 1.5, margin: float = 0.1) -> list[Camera]:
    """Four cameras at +-standoff on x and y, level with the box center, facing it.

    The sensor half-width is chosen so every box corner projects inside the
    sensor with the given fractional margin.
    """
    c = geom.center
    cams = []
    for offset in ((standoff, 0.0), (-standoff, 0.0), (0.0, standoff), (0.0, -standoff)):
        origin = c + np.array([offset[0], offset[1], 0.0])
        probe = Camera(origin, c, (0.0, 0.0, 1.0), focal_length, 1.0, pixels, pixels)
        cams.append(probe)
    reach = max(_max_tangent(cam, geom) for cam in cams)
    hw = (1.0 + margin) * focal_length * reach
    return [Camera(cam.origin, cam.look_at, cam.up, focal_length, hw, pixels, pixels) for cam in cams]


def _max_tangent(cam: Camera, geom: GridGeometry) -> float:
    u, v, w = cam.frame()
    corners = np.array([[x, y, z] for x in (geom.box_min[0], geom.box_max[0])
                        for y in (geom.box_min[1], geom.box_max[1])
                        for z in (geom.box_min[2], geom.box_max[2])])
    rel = corners - cam.origin
    depth = rel @ w
    if np.any(depth <= 0):
        raise GeometryError("camera is inside or beside the box")
    return float(max(np.max(np.abs(rel @ u) / depth), np.max(np.abs(rel @ v) / depth)))


def intersect_aabb_batch(origins, directions, box_min, box_max):
    """Slab-method intersection for many rays; returns (t_near, t_far, hit).

    t_near is clamped to >= 0; rays with an empty interval have hit False.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    bmin = np.asarray(box_min, dtype=np.float64)
    bmax = np.asarray(box_max, dtype=np.float64)
    parallel = d == 0.0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        t1 = (bmin - o) / d
        t2 = (bmax - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    inside_slab = (o >= bmin) & (o <= bmax)
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    hit = t_far >= t_near
    return t_near, t_far, hit


def intersect_aabb(ray: Ray, geom: GridGeometry):
    """(t_near, t_far) of the ray against the grid box, or None on a miss."""
    tn, tf, hit = intersect_aabb_batch(ray.origin, ray.direction, geom.box_min, geom.box_max)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


def _nudge(geom: GridGeometry) -> float:
    return 1e-12 * float(np.linalg.norm(geom.extent))


def traverse_voxels(ray: Ray, geom: GridGeometry) -> list[Segment]:
    """Exact ordered cell segments along a ray (Amanatides-Woo)."""
    span = intersect_aabb(ray, geom)
    if span is None:
        return []
    cells, lengths, mids = kernels.traverse_ray(
        np.asarray(ray.origin, dtype=np.float64), np.asarray(ray.direction, dtype=np.float64),
        span[0], span[1], geom.box_min, geom.spacing, np.array(geom.dims), _nudge(geom),
    )
    out = []
    for c, ln, m in zip(cells, lengths, mids):
        i, j, k = geom.unflatten(c)
        out.append(Segment((int(i), int(j), int(k)), float(ln), float(m)))
    return out


@dataclass(frozen=True)
class SegmentTable:
    """Traversal of a ray batch in CSR form.

    Segments of ray ``r`` are ``ptr[r]:ptr[r+1]``, ordered from the camera
    outward. ``cells`` holds flat indices.
    """

    ptr: np.ndarray
    cells: np.ndarray
    lengths: np.ndarray
    mids: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray

    @property
    def n_rays(self) -> int:
        return len(self.ptr) - 1

    def subset(self, rays) -> "SegmentTable":
        rays = np.asarray(rays, dtype=np.int64)
        counts = self.ptr[rays + 1] - self.ptr[rays]
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        idx = np.concatenate([np.arange(self.ptr[r], self.ptr[r + 1]) for r in rays]) if len(rays) else np.zeros(0, np.int64)
        idx = idx.astype(np.int64)
        return SegmentTable(ptr, self.cells[idx], self.lengths[idx], self.mids[idx],
                            self.t_near[rays], self.t_far[rays], self.hit[rays])


def trace_rays(origins, directions, geom: GridGeometry) -> SegmentTable:
    tn, tf, hit = intersect_aabb_batch(origins, directions, geom.box_min, geom.box_max)
    ptr, cells, lengths, mids = kernels.traverse_batch(
        np.asarray(origins, dtype=np.float64), np.asarray(directions, dtype=np.float64),
        tn, tf, hit, geom.box_min, geom.spacing, np.array(geom.dims), _nudge(geom),
    )
    return SegmentTable(ptr, cells, lengths, mids, tn, tf, hit)
