"""Multi-task training loop with shift/rotation augmentation and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .layers import SGD
from .model import (HeadOutputs, Network, OrientationScheme, build_network,
                    forward_heads, grids_to_batch, orientation_target, orion_loss)
from .tensor import resolve_dtype
from .voxel import GridSpec, OccupancyGrid, rotate_points, shift_grid, voxelize


@dataclass
class TrainConfig:
    arch: str = "baseline"
    gamma: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    shift_range: int = 2          # voxels, must not exceed grid padding
    rotation_aug: bool = False    # re-voxelize one rotation copy per sample/epoch
    precision: str = "float32"
    lr_decay: float = 0.1         # multiplier applied at 2/3 of the epochs
    masked_orientation: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.shift_range < 0:
            raise ValueError("shift_range must be >= 0")

    @classmethod
    def coerce(cls, values: dict) -> dict:
        """Convert string key/value pairs to typed kwargs; unknown keys are
        rejected."""
        known = {f.name for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                if str(raw).lower() not in ("true", "false", "0", "1"):
                    raise ValueError(f"config key {key!r}: expected boolean, got {raw!r}")
                kwargs[key] = str(raw).lower() in ("true", "1")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return kwargs

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls(**cls.coerce(values))


@dataclass
class LabeledSample:
    """One training/eval item: grid plus labels, optionally its source cloud."""

    grid: OccupancyGrid
    class_id: int
    azimuth: Optional[float] = None    # degrees in [0, 360), None for K==1 classes
    cloud: Optional[np.ndarray] = None
    sample_id: str = ""


@dataclass
class Metrics:
    accuracy: float
    per_class_f1: np.ndarray
    weighted_f1: float
    orientation_accuracy: float   # over classes with K > 1 only; nan if none
    support: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "weighted_f1": self.weighted_f1,
                "orientation_accuracy": self.orientation_accuracy}


def augment(sample: LabeledSample, rng: np.random.Generator,
            scheme: OrientationScheme, shift_range: int = 2,
            rotation: bool = False, grid_spec: Optional[GridSpec] = None) -> LabeledSample:
    """Random displacement plus an optional rotation copy.

    The shift is a uniform integer offset in [-shift_range, shift_range]^3,
    bounded by the grid padding so occupancy never leaves the grid.  With
    ``rotation`` on (requires the source cloud), one of the class's K bin
    rotations is applied to the cloud, the grid re-derived, and the azimuth
    label advanced accordingly; single-node classes keep their label.
    """
    grid = sample.grid
    azimuth = sample.azimuth
    if rotation:
        if sample.cloud is None:
            raise ValueError("rotation augmentation needs the source cloud")
        k = scheme.bins[sample.class_id]
        period = scheme.periods[sample.class_id]
        if k > 1:
            step = period / k
            r = int(rng.integers(k))
            angle = r * step
        else:
            r = int(rng.integers(12))
            angle = r * 30.0
        if angle != 0.0:
            cloud = rotate_points(sample.cloud, np.deg2rad(angle))
            grid = voxelize(cloud, grid_spec or grid.spec)
            if azimuth is not None:
                azimuth = (azimuth + angle) % 360.0
    if shift_range > 0:
        offset = rng.integers(-shift_range, shift_range + 1, size=3)
        grid = shift_grid(grid, offset)
    return LabeledSample(grid=grid, class_id=sample.class_id, azimuth=azimuth,
                         cloud=sample.cloud, sample_id=sample.sample_id)


def _targets(samples: Sequence[LabeledSample], scheme: OrientationScheme):
    cls = np.array([s.class_id for s in samples], dtype=np.int64)
    ori = np.array([orientation_target(s.class_id, s.azimuth, scheme) for s in samples],
                   dtype=np.int64)
    return cls, ori


def train(config: TrainConfig, train_set: Sequence[LabeledSample],
          val_set: Sequence[LabeledSample], scheme: OrientationScheme,
          init_net: Optional[Network] = None):
    """Train a two-head network; returns (network, per-epoch history).

    Deterministic for a fixed config/seed/data order.  ``init_net`` warm
    starts from an existing network (fine-tuning path); it is copied, not
    mutated.  History rows carry both loss terms and validation metrics.
    """
    if not train_set:
        raise ValueError("empty training set")
    dtype = resolve_dtype(config.precision)
    grid_spec = train_set[0].grid.spec
    if config.shift_range > grid_spec.padding:
        raise ValueError(
            f"shift_range {config.shift_range} exceeds grid padding {grid_spec.padding}")

    if init_net is not None:
        net = init_net.cast(dtype)
        if net.scheme is not None and net.scheme != scheme:
            raise ValueError("initial checkpoint scheme does not match the dataset scheme")
    else:
        net = build_network(config.arch, scheme.n_classes, scheme,
                            seed=config.seed, dtype=dtype,
                            grid_extent=grid_spec.total)
    opt = SGD(net.named_params(), lr=config.lr, momentum=config.momentum,
              weight_decay=config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA46]))

    decay_epoch = max(1, (2 * config.epochs) // 3)
    history = []
    n = len(train_set)
    for epoch in range(config.epochs):
        if epoch == decay_epoch and config.lr_decay != 1.0:
            opt.lr *= config.lr_decay
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            batch = [augment(train_set[i], rng, scheme,
                             shift_range=config.shift_range,
                             rotation=config.rotation_aug,
                             grid_spec=grid_spec)
                     for i in batch_idx]
            x = grids_to_batch([s.grid for s in batch], dtype)
            cls_t, ori_t = _targets(batch, scheme)
            heads = net.forward(x, mode="train", rng=rng)
            loss, l_c, l_o, g_c, g_o = orion_loss(
                heads, cls_t, ori_t, config.gamma, with_grads=True,
                scheme=scheme, masked=config.masked_orientation)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {batches}")
            net.zero_grad()
            net.backward(g_c, g_o)
            opt.step()
            sums += (loss, l_c, l_o)
            batches += 1
        val = evaluate(net, val_set, scheme) if val_set else None
        history.append({
            "epoch": epoch,
            "loss": sums[0] / batches,
            "loss_class": sums[1] / batches,
            "loss_orient": sums[2] / batches,
            "val_acc": val.accuracy if val else float("nan"),
            "val_wf1": val.weighted_f1 if val else float("nan"),
            "val_orient_acc": val.orientation_accuracy if val else float("nan"),
        })
    return net, history


def predict(net: Network, samples: Sequence[LabeledSample], batch_size: int = 64):
    """Eval-mode class and orientation argmax for a sample sequence."""
    cls_pred, ori_pred = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        heads = forward_heads(net, [s.grid for s in chunk], mode="eval")
        cls_pred.append(np.argmax(heads.class_logits, axis=1))
        if heads.orient_logits is not None:
            ori_pred.append(np.argmax(heads.orient_logits, axis=1))
    cls_pred = np.concatenate(cls_pred) if cls_pred else np.zeros(0, dtype=int)
    ori_pred = np.concatenate(ori_pred) if ori_pred else None
    return cls_pred, ori_pred


def compute_metrics(cls_true, cls_pred, n_classes: int,
                    ori_true=None, ori_pred=None, multibin_mask=None) -> Metrics:
    """Accuracy, per-class F1, support-weighted F1, orientation accuracy.

    Orientation accuracy counts argmax-node hits over samples of classes
    with more than one orientation bin.
    """
    cls_true = np.asarray(cls_true)
    cls_pred = np.asarray(cls_pred)
    accuracy = float(np.mean(cls_true == cls_pred)) if len(cls_true) else 0.0
    f1 = np.zeros(n_classes)
    support = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((cls_pred == c) & (cls_true == c))
        fp = np.sum((cls_pred == c) & (cls_true != c))
        fn = np.sum((cls_pred != c) & (cls_true == c))
        support[c] = np.sum(cls_true == c)
        denom = 2 * tp + fp + fn
        f1[c] = (2 * tp / denom) if denom > 0 else 0.0
    weighted_f1 = float(np.sum(support * f1) / support.sum()) if support.sum() else 0.0

    orient_acc = float("nan")
    if ori_true is not None and ori_pred is not None and multibin_mask is not None:
        mask = np.asarray(multibin_mask)
        if mask.any():
            orient_acc = float(np.mean(np.asarray(ori_pred)[mask] == np.asarray(ori_true)[mask]))
    return Metrics(accuracy, f1, weighted_f1, orient_acc, support)


def evaluate(net: Network, samples: Sequence[LabeledSample],
             scheme: Optional[OrientationScheme] = None) -> Metrics:
    """Eval-mode metrics for a labeled dataset."""
    scheme = scheme or net.scheme
    if scheme is None:
        raise ValueError("evaluation needs an orientation scheme")
    if net.scheme is not None and net.scheme != scheme:
        raise ValueError("checkpoint scheme does not match the dataset scheme")
    max_cls = max((s.class_id for s in samples), default=-1)
    if max_cls >= scheme.n_classes:
        raise ValueError(f"sample class {max_cls} outside scheme with "
                         f"{scheme.n_classes} classes")
    cls_true, ori_true = _targets(samples, scheme)
    cls_pred, ori_pred = predict(net, samples)
    multibin = np.array([scheme.bins[s.class_id] > 1 for s in samples])
    return compute_metrics(cls_true, cls_pred, scheme.n_classes,
                           ori_true, ori_pred, multibin)
