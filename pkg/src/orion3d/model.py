"""Two-head voxel networks: class logits plus per-class orientation logits.

The orientation output is a concatenation of per-class bin blocks: class c
owns ``K_c`` nodes starting at ``offset(c)``.  Rotationally symmetric or
neutral classes get a single node.  Both heads share one trunk; the combined
objective is (1-gamma)*L_class + gamma*L_orient with multinomial
cross-entropy for each term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .layers import LayerSpec, Layer, build_layer, Dense, softmax_xent
from .tensor import Tensor

ARCHS = ("baseline", "extended")

# Trunk layouts.  Baseline follows the two-conv voxel-net lineage; extended
# is the four-conv variant with batchnorm on conv layers only.
BASELINE_TRUNK = (
    ("conv1", LayerSpec.conv3d(32, 5, stride=2)),
    ("act1", LayerSpec.leaky_relu()),
    ("conv2", LayerSpec.conv3d(32, 3, stride=1)),
    ("act2", LayerSpec.leaky_relu()),
    ("pool", LayerSpec.maxpool3d(2, 2)),
    ("flatten", LayerSpec.flatten()),
    ("fc1", LayerSpec.dense(128)),
    ("act_fc", LayerSpec.leaky_relu()),
)

EXTENDED_TRUNK = (
    ("conv1", LayerSpec.conv3d(32, 3, stride=2)),
    ("bn1", LayerSpec.batchnorm3d()),
    ("act1", LayerSpec.leaky_relu()),
    ("drop1", LayerSpec.dropout(0.2)),
    ("conv2", LayerSpec.conv3d(64, 3, stride=1)),
    ("bn2", LayerSpec.batchnorm3d()),
    ("act2", LayerSpec.leaky_relu()),
    ("drop2", LayerSpec.dropout(0.3)),
    ("conv3", LayerSpec.conv3d(128, 3, stride=1)),
    ("bn3", LayerSpec.batchnorm3d()),
    ("act3", LayerSpec.leaky_relu()),
    ("drop3", LayerSpec.dropout(0.4)),
    ("conv4", LayerSpec.conv3d(256, 3, stride=1)),
    ("bn4", LayerSpec.batchnorm3d()),
    ("act4", LayerSpec.leaky_relu()),
    ("drop4", LayerSpec.dropout(0.6)),
    ("pool", LayerSpec.maxpool3d(2, 2)),
    ("flatten", LayerSpec.flatten()),
    ("fc1", LayerSpec.dense(128)),
    ("act_fc", LayerSpec.leaky_relu()),
    ("drop_fc", LayerSpec.dropout(0.4)),
)

VALID_PERIODS = (360.0, 180.0, 90.0)


class OrientationScheme:
    """Per-class orientation bin counts and periods.

    Entries are (class_name, K, period_degrees).  K == 1 means the class is
    symmetric/neutral and its period is None; otherwise K bins tile the
    period exactly.
    """

    def __init__(self, entries: Sequence[tuple]):
        self.names = []
        self.bins = []
        self.periods = []
        for name, k, period in entries:
            k = int(k)
            if k < 1:
                raise ValueError(f"class {name!r}: bin count must be >= 1")
            if k == 1:
                if period is not None:
                    raise ValueError(f"class {name!r}: single-node class must have no period")
            else:
                if period is None:
                    raise ValueError(f"class {name!r}: multi-bin class needs a period")
                period = float(period)
                if period <= 0:
                    raise ValueError(f"class {name!r}: period must be positive")
            self.names.append(str(name))
            self.bins.append(k)
            self.periods.append(period)
        self.offsets = np.concatenate([[0], np.cumsum(self.bins)[:-1]]).astype(int)
        self.total_nodes = int(np.sum(self.bins))

    @classmethod
    def uniform(cls, n_classes: int, k: int = 12, period: float = 360.0,
                names: Optional[Sequence[str]] = None) -> "OrientationScheme":
        names = names or [f"class{i}" for i in range(n_classes)]
        return cls([(names[i], k, period if k > 1 else None) for i in range(n_classes)])

    @classmethod
    def from_levels(cls, levels: Sequence[int], names: Optional[Sequence[str]] = None
                    ) -> "OrientationScheme":
        """Build from per-class K in {12, 6, 3, 1} with the 30-degree bin width."""
        period_of = {12: 360.0, 6: 180.0, 3: 90.0, 1: None}
        names = names or [f"class{i}" for i in range(len(levels))]
        entries = []
        for i, k in enumerate(levels):
            if k not in period_of:
                raise ValueError(f"orientation level must be one of 12/6/3/1, got {k}")
            entries.append((names[i], k, period_of[k]))
        return cls(entries)

    @property
    def n_classes(self) -> int:
        return len(self.bins)

    def class_block(self, class_id: int) -> tuple:
        return int(self.offsets[class_id]), self.bins[class_id]

    def bin_width(self, class_id: int) -> Optional[float]:
        p = self.periods[class_id]
        return None if p is None else p / self.bins[class_id]

    def bin_center(self, class_id: int, bin_index: int) -> float:
        """Center angle (degrees) of one bin of a multi-bin class."""
        w = self.bin_width(class_id)
        if w is None:
            raise ValueError("single-node class has no bin geometry")
        return (bin_index + 0.5) * w

    def entries(self):
        return list(zip(self.names, self.bins, self.periods))

    def __eq__(self, other):
        return isinstance(other, OrientationScheme) and self.entries() == other.entries()

    def __repr__(self):
        return f"OrientationScheme({self.entries()})"


def orientation_target(class_id: int, azimuth_degrees, scheme: OrientationScheme) -> int:
    """Map (class, azimuth) to its orientation node index.

    Single-node classes ignore the azimuth.  Otherwise the azimuth is folded
    into the class period and binned; the node index is offset(c) + bin.
    """
    offset, k = scheme.class_block(class_id)
    if k == 1:
        return offset
    if azimuth_degrees is None:
        raise ValueError(
            f"class {scheme.names[class_id]!r} has {k} orientation bins; azimuth required")
    period = scheme.periods[class_id]
    folded = float(azimuth_degrees) % period
    b = min(int(folded / period * k), k - 1)
    return offset + b


@dataclass
class HeadOutputs:
    class_logits: np.ndarray
    orient_logits: Optional[np.ndarray]


class Network:
    """Shared trunk with a class head and an optional orientation head."""

    def __init__(self, arch: str, trunk_named: list, class_head: Dense,
                 orient_head: Optional[Dense], scheme: Optional[OrientationScheme],
                 in_shape: tuple, dtype):
        self.arch = arch
        self.trunk_names = [name for name, _ in trunk_named]
        self.trunk = [layer for _, layer in trunk_named]
        self.class_head = class_head
        self.orient_head = orient_head
        self.scheme = scheme
        self.in_shape = in_shape
        self.dtype = np.dtype(dtype)
        self.activations = None  # populated when forward(..., retain=True)

    @property
    def n_classes(self) -> int:
        return self.class_head.spec.units

    def layers(self) -> list:
        out = list(self.trunk) + [self.class_head]
        if self.orient_head is not None:
            out.append(self.orient_head)
        return out

    def named_params(self) -> dict:
        out = {}
        for layer in self.layers():
            out.update(layer.params())
        return out

    def named_buffers(self) -> dict:
        out = {}
        for layer in self.layers():
            out.update(layer.buffers())
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def forward(self, x: np.ndarray, mode: str = "eval", rng=None,
                retain: bool = False) -> HeadOutputs:
        if x.ndim != 5 or x.shape[1:] != self.in_shape:
            raise ValueError(f"expected input (N, {self.in_shape}), got {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        acts = {"input": x} if retain else None
        h = x
        for name, layer in self.trunk_named:
            h = layer.forward(h, mode=mode, rng=rng)
            if retain:
                # layers may return views into reused buffers; snapshot them
                acts[name] = np.array(h, copy=True)
        heads = HeadOutputs(
            class_logits=self.class_head.forward(h, mode=mode),
            orient_logits=(self.orient_head.forward(h, mode=mode)
                           if self.orient_head is not None else None))
        if retain:
            self.activations = acts
        return heads

    def backward(self, g_class: Optional[np.ndarray], g_orient: Optional[np.ndarray],
                 need_input_grad: bool = False) -> Optional[np.ndarray]:
        if g_class is None and g_orient is None:
            raise ValueError("at least one head gradient is required")
        gh = None
        if g_class is not None:
            gh = self.class_head.backward(g_class)
        if g_orient is not None:
            if self.orient_head is None:
                raise ValueError("network has no orientation head")
            go = self.orient_head.backward(g_orient)
            gh = go if gh is None else gh + go
        for i, layer in enumerate(reversed(self.trunk)):
            last = i == len(self.trunk) - 1
            gh = layer.backward(gh, need_input_grad=(need_input_grad or not last))
        return gh

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    @property
    def trunk_named(self):
        return list(zip(self.trunk_names, self.trunk))

    def cast(self, dtype) -> "Network":
        """Return a copy of this network in another float precision."""
        other = build_network(self.arch, self.n_classes,
                              scheme=self.scheme, seed=0, dtype=dtype,
                              orientation_head=self.orient_head is not None,
                              grid_extent=self.in_shape[0])
        src_p, dst_p = self.named_params(), other.named_params()
        for name, p in dst_p.items():
            p.data[...] = src_p[name].data.astype(dtype)
        src_b, dst_b = self.named_buffers(), other.named_buffers()
        for name, b in dst_b.items():
            b[...] = src_b[name].astype(dtype)
        return other


def build_network(arch: str, n_classes: int, scheme: Optional[OrientationScheme],
                  seed: int = 0, dtype=np.float32, orientation_head: bool = True,
                  grid_extent: int = 32) -> Network:
    """Construct and initialize a network.

    Weights are zero-mean Gaussian with std sqrt(2/fan_in); biases zero; BN
    scale 1 and shift 0.  The orientation head is initialized last so that
    dropping it leaves every other draw unchanged.  Deterministic per seed.
    """
    if arch not in ARCHS:
        raise ValueError(f"arch must be one of {ARCHS}, got {arch!r}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if orientation_head:
        if scheme is None:
            raise ValueError("orientation head requires a scheme")
        if scheme.n_classes != n_classes:
            raise ValueError(
                f"scheme has {scheme.n_classes} classes, network has {n_classes}")
    rng = np.random.default_rng(seed)
    in_shape = (grid_extent, grid_extent, grid_extent, 1)
    trunk_specs = BASELINE_TRUNK if arch == "baseline" else EXTENDED_TRUNK

    trunk_named = []
    shape = in_shape
    for name, spec in trunk_specs:
        # trunk activations may run in place: every activation input here is
        # a buffer owned by the preceding conv/bn/dense layer
        layer = build_layer(spec, shape, rng=rng, dtype=dtype, name=name,
                            inplace_activations=True)
        shape = spec.out_shape(shape)
        trunk_named.append((name, layer))

    hidden = shape[0]
    class_head = Dense(LayerSpec.dense(n_classes), hidden, rng, dtype=dtype, name="class_head")
    orient_head = None
    if orientation_head:
        orient_head = Dense(LayerSpec.dense(scheme.total_nodes), hidden, rng,
                            dtype=dtype, name="orient_head")
    return Network(arch, trunk_named, class_head, orient_head, scheme, in_shape, dtype)


def grids_to_batch(grids, dtype=np.float32) -> np.ndarray:
    """Stack occupancy grids into a (N, D, H, W, 1) float batch."""
    arrays = []
    for g in grids:
        values = g.values if hasattr(g, "values") else np.asarray(g)
        arrays.append(values.astype(dtype))
    return np.stack(arrays)[..., None]


def forward_heads(net: Network, grids, mode: str = "eval", rng=None) -> HeadOutputs:
    """Run both heads on a batch of grids in one shared trunk pass."""
    batch = grids if isinstance(grids, np.ndarray) else grids_to_batch(grids, net.dtype)
    if batch.ndim == 4:
        batch = batch[..., None]
    out = net.forward(batch, mode=mode, rng=rng)
    if not (np.all(np.isfinite(out.class_logits)) and
            (out.orient_logits is None or np.all(np.isfinite(out.orient_logits)))):
        raise FloatingPointError("non-finite logits in forward pass")
    return out


def _masked_orient_xent(orient_logits, class_targets, orient_targets,
                        scheme: OrientationScheme):
    # Softmax restricted to each row's true-class block.
    n = orient_logits.shape[0]
    loss = 0.0
    grad = np.zeros_like(orient_logits)
    for c in np.unique(class_targets):
        off, k = scheme.class_block(int(c))
        rows = np.nonzero(class_targets == c)[0]
        block = orient_logits[rows, off:off + k]
        t = np.asarray(orient_targets)[rows] - off
        if t.min() < 0 or t.max() >= k:
            raise ValueError("orientation target outside its class block")
        li, gi = softmax_xent(block, t)
        loss += li * len(rows)
        grad[rows[:, None], off + np.arange(k)] = gi * len(rows)
    return loss / n, grad / n


def orion_loss(outputs: HeadOutputs, class_targets, orient_targets=None,
               gamma: float = 0.5, with_grads: bool = False,
               scheme: Optional[OrientationScheme] = None,
               masked: bool = False):
    """Combined loss (1-gamma)*L_class + gamma*L_orient.

    Returns (loss, l_class, l_orient) or, with grads,
    (loss, l_class, l_orient, g_class, g_orient).  A zero-weighted head gets
    a None gradient, so it is exactly inert.  ``masked=True`` switches the
    orientation softmax from all nodes to the true class's block (requires
    ``scheme``).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    class_targets = np.asarray(class_targets)
    l_class, g_class = softmax_xent(np.asarray(outputs.class_logits, dtype=np.float64),
                                    class_targets)
    l_orient, g_orient = 0.0, None
    if outputs.orient_logits is not None and orient_targets is not None:
        ol = np.asarray(outputs.orient_logits, dtype=np.float64)
        if masked:
            if scheme is None:
                raise ValueError("masked orientation loss requires the scheme")
            l_orient, g_orient = _masked_orient_xent(ol, class_targets,
                                                     orient_targets, scheme)
        else:
            l_orient, g_orient = softmax_xent(ol, np.asarray(orient_targets))
    elif gamma > 0.0:
        raise ValueError("gamma > 0 requires orientation logits and targets")

    loss = (1.0 - gamma) * l_class + gamma * l_orient
    if not with_grads:
        return loss, l_class, l_orient
    gc = None if gamma == 1.0 else ((1.0 - gamma) * g_class).astype(outputs.class_logits.dtype)
    go = None
    if g_orient is not None and gamma > 0.0:
        go = (gamma * g_orient).astype(outputs.orient_logits.dtype)
    return loss, l_class, l_orient, gc, go


def param_count(net: Network) -> int:
    """Exact count of trainable scalars (weights, biases, BN scale/shift)."""
    return net.param_count()
