"""Point clouds, meshes, and binary occupancy grids.

Clouds are (N, 3) float64 arrays in meters.  Voxelization follows the
32/28/2 convention: the cloud's bounding-box center is moved to the grid
center, the largest bounding extent is scaled isotropically to span the
object region (total - 2*padding voxels), and a voxel is set iff at least
one point falls in its half-open cube [lo, hi) per axis.  Points landing
exactly on the top face of the object region are kept in the topmost object
voxel, so freshly voxelized occupancy never leaks into the padding shell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must be (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray     # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if len(self.faces) and self.faces.min() < 0:
            raise ValueError("negative face index")

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry: total extent, object extent, and padding, in voxels."""

    total: int = 32
    object_extent: int = 28
    padding: int = 2

    def __post_init__(self):
        if self.object_extent + 2 * self.padding != self.total:
            raise ValueError(
                f"object extent {self.object_extent} + 2*padding {self.padding} "
                f"!= total {self.total}")
        if self.object_extent < 1:
            raise ValueError("object extent must be >= 1")


@dataclass
class OccupancyGrid:
    """Binary voxel grid with physical placement.

    ``values[x, y, z]`` is uint8 in {0, 1}; ``origin`` is the world
    coordinate of the (0, 0, 0) voxel corner, ``voxel_size`` the cube edge
    in meters.
    """

    spec: GridSpec
    values: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    voxel_size: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        expected = (self.spec.total,) * 3
        if self.values.shape != expected:
            raise ValueError(f"grid values must have shape {expected}, got {self.values.shape}")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    def occupied_count(self) -> int:
        return int(self.values.sum())

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.spec, self.values.copy(), self.origin.copy(), self.voxel_size)


def sample_mesh(mesh: TriMesh, n_points: int, seed: int = 0) -> np.ndarray:
    """Sample ``n_points`` on the mesh surface, uniform by area.

    Faces are chosen with probability proportional to their area and points
    placed by barycentric sampling, so density is uniform across faces of
    any shape.  Deterministic for a fixed seed.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has no face with positive area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n_points, p=areas / total)
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    u = rng.random(n_points)
    v = rng.random(n_points)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def rotate_points(cloud, yaw: float, center=None) -> np.ndarray:
    """Rotate a cloud by ``yaw`` radians about a vertical axis.

    The axis passes through ``center`` (default: the cloud centroid); z is
    unchanged.  Positive yaw is counterclockwise looking down +z.
    """
    pts = as_cloud(cloud)
    if len(pts) == 0:
        return pts
    if center is None:
        center = pts.mean(axis=0)
    cx, cy = float(center[0]), float(center[1])
    c, s = np.cos(yaw), np.sin(yaw)
    x = pts[:, 0] - cx
    y = pts[:, 1] - cy
    out = np.empty_like(pts)
    out[:, 0] = c * x - s * y + cx
    out[:, 1] = s * x + c * y + cy
    out[:, 2] = pts[:, 2]  # bit-identical: the axis is vertical
    return out


def voxelize(cloud, spec: GridSpec = GridSpec()) -> OccupancyGrid:
    """Convert a cloud to a binary occupancy grid per the 32/28/2 convention."""
    pts = as_cloud(cloud)
    values = np.zeros((spec.total,) * 3, dtype=np.uint8)
    if len(pts) == 0:
        return OccupancyGrid(spec, values, np.zeros(3), 1.0)

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = (lo + hi) / 2.0
    max_extent = float((hi - lo).max())
    if max_extent > 0.0:
        scale = spec.object_extent / max_extent
        voxel_size = max_extent / spec.object_extent
    else:
        scale = 1.0
        voxel_size = 1.0

    half = spec.total / 2.0
    u = (pts - center) * scale + half  # voxel-unit coordinates
    idx = np.floor(u).astype(np.int64)
    # A point exactly on the object-region top face belongs to the topmost
    # object voxel; only exact-boundary (or one-ulp) cases can reach it.
    np.clip(idx, spec.padding, spec.total - spec.padding - 1, out=idx)
    values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    origin = center - half * voxel_size
    return OccupancyGrid(spec, values, origin, voxel_size)


def shift_grid(grid: OccupancyGrid, offset) -> OccupancyGrid:
    """Translate grid contents by integer voxel offsets; vacated cells zero."""
    dx, dy, dz = (int(v) for v in offset)
    p = grid.spec.padding
    if max(abs(dx), abs(dy), abs(dz)) > p:
        raise ValueError(f"shift {offset} exceeds padding {p}")
    out = np.zeros_like(grid.values)
    n = grid.spec.total

    def rng(d):
        return (slice(max(d, 0), n + min(d, 0)), slice(max(-d, 0), n + min(-d, 0)))

    (dst_x, src_x), (dst_y, src_y), (dst_z, src_z) = rng(dx), rng(dy), rng(dz)
    out[dst_x, dst_y, dst_z] = grid.values[src_x, src_y, src_z]
    shifted_origin = grid.origin - np.array([dx, dy, dz]) * grid.voxel_size
    return OccupancyGrid(grid.spec, out, shifted_origin, grid.voxel_size)


def rotate_grid_quarter(grid: OccupancyGrid, k: int) -> OccupancyGrid:
    """Lattice rotation by k*90 degrees about the vertical grid-center axis.

    Matches rotate_points with positive yaw: new[i, j, z] = old[j, n-1-i, z].
    """
    k = k % 4
    values = np.ascontiguousarray(np.rot90(grid.values, k=k, axes=(0, 1)))
    return OccupancyGrid(grid.spec, values, grid.origin.copy(), grid.voxel_size)
