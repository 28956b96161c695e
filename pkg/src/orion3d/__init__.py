"""Orientation-boosted 3D voxel networks.

A numpy/numba library covering the full pipeline: occupancy-grid
voxelization, a closed-set layer library with reverse-mode gradients,
two-head (class + per-class orientation) networks, multi-task training,
rotation-voting inference, orientation-guided 3D sliding-box detection,
unsupervised azimuth alignment, and dominant signal-flow path analysis.
"""

__version__ = "0.1.0"

from .layers import SGD, LayerSpec, softmax, softmax_xent
from .model import (HeadOutputs, Network, OrientationScheme, build_network,
                    forward_heads, orientation_target, orion_loss, param_count)
from .tensor import Tensor
from .voxel import (GridSpec, OccupancyGrid, TriMesh, rotate_grid_quarter,
                    rotate_points, sample_mesh, shift_grid, voxelize)

__all__ = [
    "GridSpec", "HeadOutputs", "LayerSpec", "Network", "OccupancyGrid",
    "OrientationScheme", "SGD", "Tensor", "TriMesh", "build_network",
    "forward_heads", "orientation_target", "orion_loss", "param_count",
    "rotate_grid_quarter", "rotate_points", "sample_mesh", "shift_grid",
    "softmax", "softmax_xent", "voxelize",
]
