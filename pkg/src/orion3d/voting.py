"""Rotation voting: classify a cloud from R rotated copies.

Each rotation copy is voxelized and scored; the per-class softmax
probabilities are summed over rotations and the final class is the argmax
of the sums (ties toward the lower index).  The summation order is fixed by
sorting the rotation angles, so permuting the input order cannot change the
result even at the bit level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import softmax
from .model import Network, forward_heads, grids_to_batch
from .voxel import GridSpec, rotate_points, voxelize


@dataclass
class VoteResult:
    final_class: int
    summed_scores: np.ndarray       # per-class probability sums
    per_rotation_argmax: np.ndarray  # argmax class per rotation, in input order
    angles: np.ndarray               # radians, in input order


def vote_classify(net: Network, cloud, rotations=12,
                  grid_spec: GridSpec = GridSpec()) -> VoteResult:
    """Vote a class label over rotated copies of ``cloud``.

    ``rotations`` is either a count R >= 1 (uniform angles spanning 360
    degrees) or an explicit sequence of yaw angles in radians.
    """
    if isinstance(rotations, (int, np.integer)):
        if rotations < 1:
            raise ValueError("need at least one rotation")
        angles = np.arange(int(rotations)) * (2.0 * np.pi / int(rotations))
    else:
        angles = np.asarray(rotations, dtype=np.float64)
        if angles.size < 1:
            raise ValueError("need at least one rotation")

    grids = [voxelize(rotate_points(cloud, a), grid_spec) for a in angles]
    heads = forward_heads(net, grids, mode="eval")
    probs = softmax(heads.class_logits.astype(np.float64))

    order = np.argsort(angles, kind="stable")
    summed = np.zeros(probs.shape[1], dtype=np.float64)
    for i in order:
        summed += probs[i]
    final = int(np.argmax(summed))  # np.argmax already breaks ties low
    return VoteResult(final_class=final,
                      summed_scores=summed,
                      per_rotation_argmax=np.argmax(probs, axis=1),
                      angles=angles)
