"""Dominant signal-flow paths and activation snapshots.

The dominant path traces the predicted class node backward through the
indexed layers (conv filters and the shared dense layer): at each step the
upstream node/filter with the largest total weight*activation contribution
to the already-selected downstream unit is chosen, ties toward the lower
index.  For a conv step the contribution of an upstream channel is the sum
of weight*activation products over every spatial position feeding the
selected downstream filter.  The margin between the top two contributions
is reported so degenerate (near-tied) selections are visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .model import Network, grids_to_batch
from .voxel import GridSpec, rotate_points, voxelize


@dataclass
class DominantPath:
    layer_names: List[str]    # indexed layers, input side first, then "class"
    indices: List[int]        # selected node/filter per layer; last = class id
    margins: List[float]      # top1 - top2 contribution per selected layer


@dataclass
class PathHistogram:
    group: object
    counts: Dict[str, np.ndarray]   # layer name -> count vector over indices
    size: int

    def entropy(self) -> Dict[str, float]:
        """Shannon entropy (nats) of each layer's normalized histogram."""
        out = {}
        for name, c in self.counts.items():
            p = c[c > 0] / c.sum()
            out[name] = float(-(p * np.log(p)).sum())
        return out


def _indexed_layers(net: Network) -> List[str]:
    names = [n for n in net.trunk_names if n.startswith("conv")]
    names.append("fc1")
    return names


def _feeding_activation(net: Network, acts: dict, layer_name: str) -> np.ndarray:
    """The activation tensor that actually feeds ``layer_name``."""
    i = net.trunk_names.index(layer_name)
    return acts["input"] if i == 0 else acts[net.trunk_names[i - 1]]


def _conv_channel_contributions(layer, x: np.ndarray, j: int) -> np.ndarray:
    """Per-input-channel sum of weight*activation terms feeding filter j."""
    k, s = layer.spec.kernel, layer.spec.stride
    p = layer.spec.pad
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    _, d, h, w, c = x.shape
    do, ho, wo = ((e - k) // s + 1 for e in (d, h, w))
    wj = layer.weight_view()[..., j]  # (k, k, k, C)
    contrib = np.zeros(c, dtype=np.float64)
    for i in range(k):
        for jj in range(k):
            for l in range(k):
                window_sum = x[0,
                               i:i + s * (do - 1) + 1:s,
                               jj:jj + s * (ho - 1) + 1:s,
                               l:l + s * (wo - 1) + 1:s, :].sum(axis=(0, 1, 2))
                contrib += wj[i, jj, l, :].astype(np.float64) * window_sum
    return contrib


def _argmax_margin(contrib: np.ndarray) -> tuple:
    idx = int(np.argmax(contrib))
    if contrib.size < 2:
        return idx, float("inf")
    rest = np.delete(contrib, idx)
    return idx, float(contrib[idx] - rest.max())


def dominant_path(net: Network, grid) -> DominantPath:
    """Back-trace the highest-contribution node per indexed layer.

    Runs one eval-mode forward pass with retained activations; the trace
    starts at the predicted class node.
    """
    x = grids_to_batch([grid], net.dtype)
    heads = net.forward(x, mode="eval", retain=True)
    acts = net.activations
    c = int(np.argmax(heads.class_logits[0]))

    names = _indexed_layers(net)
    indices: List[int] = [0] * len(names)
    margins: List[float] = [0.0] * len(names)

    # dense step: class node -> shared hidden layer unit
    head_in = acts[net.trunk_names[-1]][0].astype(np.float64)
    contrib = net.class_head.weight.data[:, c].astype(np.float64) * head_in
    k_sel, margin = _argmax_margin(contrib)
    indices[-1] = k_sel
    margins[-1] = margin

    # fc1 -> last conv: reshape fc weights onto the pre-flatten spatial map
    flat_idx = net.trunk_names.index("flatten")
    pre_flatten = acts[net.trunk_names[flat_idx - 1]][0].astype(np.float64)
    fc1 = net.trunk[net.trunk_names.index("fc1")]
    w_col = fc1.weight.data[:, k_sel].astype(np.float64).reshape(pre_flatten.shape)
    conv_names = names[:-1]
    contrib = (w_col * pre_flatten).sum(axis=(0, 1, 2))
    j_sel, margin = _argmax_margin(contrib)
    indices[len(conv_names) - 1] = j_sel
    margins[len(conv_names) - 1] = margin

    # conv -> conv steps, walking toward the input
    for li in range(len(conv_names) - 1, 0, -1):
        down_name = conv_names[li]
        down_layer = net.trunk[net.trunk_names.index(down_name)]
        x_in = _feeding_activation(net, acts, down_name).astype(np.float64)
        contrib = _conv_channel_contributions(down_layer, x_in, j_sel)
        j_sel, margin = _argmax_margin(contrib)
        indices[li - 1] = j_sel
        margins[li - 1] = margin

    return DominantPath(layer_names=names + ["class"],
                        indices=indices + [c],
                        margins=margins + [float("inf")])


def layer_widths(net: Network) -> Dict[str, int]:
    widths = {}
    for name in _indexed_layers(net):
        layer = net.trunk[net.trunk_names.index(name)]
        widths[name] = (layer.spec.filters if name.startswith("conv")
                        else layer.spec.units)
    widths["class"] = net.n_classes
    return widths


def path_histograms(net: Network, grouped_grids: Dict) -> List[PathHistogram]:
    """Accumulate dominant-path indices per layer for each sample group."""
    widths = layer_widths(net)
    out = []
    for group, grids in grouped_grids.items():
        if len(grids) == 0:
            continue  # empty groups are skipped
        counts = {name: np.zeros(w, dtype=np.int64) for name, w in widths.items()}
        for grid in grids:
            path = dominant_path(net, grid)
            for name, idx in zip(path.layer_names, path.indices):
                counts[name][idx] += 1
        out.append(PathHistogram(group=group, counts=counts, size=len(grids)))
    return out


def snapshot_activations(net: Network, cloud, layer: str, filter_index: int,
                         rotations: int = 12, threshold: float = 0.0,
                         grid_spec: GridSpec = GridSpec()) -> List[np.ndarray]:
    """Thresholded 3D response maps of one conv filter across rotations.

    Each of the R uniform rotation copies of ``cloud`` is voxelized and run
    in eval mode; the selected filter's raw conv response is extracted and
    values below ``threshold`` are zeroed.
    """
    if layer not in net.trunk_names or not layer.startswith("conv"):
        raise ValueError(f"unknown conv layer {layer!r}")
    conv = net.trunk[net.trunk_names.index(layer)]
    if not 0 <= filter_index < conv.spec.filters:
        raise ValueError(f"filter index {filter_index} out of range "
                         f"[0, {conv.spec.filters})")
    if rotations < 1:
        raise ValueError("need at least one rotation")
    maps = []
    for r in range(rotations):
        angle = 2.0 * np.pi * r / rotations
        grid = voxelize(rotate_points(cloud, angle), grid_spec)
        net.forward(grids_to_batch([grid], net.dtype), mode="eval", retain=True)
        response = np.array(net.activations[layer][0, ..., filter_index])
        response[response < threshold] = 0.0
        maps.append(response)
    return maps
