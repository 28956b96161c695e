"""Procedural shape and scene generation for offline experiments.

Shapes are surface point clouds built from cuboid arms (plus one cylinder
class).  The class list carries deliberate structure: the zbar class is
exactly 2-fold rotationally symmetric (built as half-shape plus its 180-
degree copy, so even jittered instances coincide with their rotated selves
up to point order), and the tube class is rotationally neutral.  Default
orientation levels are therefore [12, 12, 6, 1, 12, 12].

Detection scenes plant grounded objects on a jittered ground plane among
distractor clutter; ground truth is the planted boxes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .detect import DetectionBox
from .model import OrientationScheme
from .voxel import rotate_points

CLASS_NAMES = ("lbracket", "tbar", "zbar", "tube", "wedge", "hook")
CLASS_LEVELS = (12, 12, 6, 1, 12, 12)


def default_scheme(n_classes: int) -> OrientationScheme:
    if not 2 <= n_classes <= len(CLASS_NAMES):
        raise ValueError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
    return OrientationScheme.from_levels(CLASS_LEVELS[:n_classes],
                                         names=CLASS_NAMES[:n_classes])


def _sample_box_surface(rng, n, center, size) -> np.ndarray:
    """Uniform surface samples of an axis-aligned cuboid, area-weighted."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random(n) - 0.5
    v = rng.random(n) - 0.5
    pts = np.empty((n, 3))
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * size[axis] / 2.0
        pts[m, others[0]] = u[m] * size[others[0]]
        pts[m, others[1]] = v[m] * size[others[1]]
    return pts + np.asarray(center)


def _sample_cuboids(rng, n, cuboids) -> np.ndarray:
    """Area-weighted surface samples over a list of (center, size) cuboids."""
    areas = []
    for _, size in cuboids:
        sx, sy, sz = size
        areas.append(2.0 * (sx * sy + sy * sz + sx * sz))
    areas = np.asarray(areas)
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [_sample_box_surface(rng, c, center, size)
             for c, (center, size) in zip(counts, cuboids) if c > 0]
    return np.concatenate(parts)


def _sample_cylinder(rng, n, radius, height) -> np.ndarray:
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    p = np.array([lateral, cap, cap])
    part = rng.choice(3, size=n, p=p / p.sum())
    theta = rng.random(n) * 2 * np.pi
    pts = np.empty((n, 3))
    m = part == 0
    pts[m, 0] = radius * np.cos(theta[m])
    pts[m, 1] = radius * np.sin(theta[m])
    pts[m, 2] = (rng.random(m.sum()) - 0.5) * height
    for which, sign in ((1, 0.5), (2, -0.5)):
        m = part == which
        r = radius * np.sqrt(rng.random(m.sum()))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = sign * height
    return pts


def _arm(rng, jitter):
    """Common arm proportions with per-instance jitter."""
    j = lambda v, f=0.2: v * (1.0 + (rng.random() - 0.5) * 2 * f * jitter)
    return j(1.0), j(0.35), j(0.45)  # length, width, height


def make_prototype(class_id: int, rng: np.random.Generator, noise: float = 0.0,
                   n_points: int = 1500, shape_jitter: float = 1.0) -> np.ndarray:
    """One canonical-azimuth instance of a class, centered near the origin.

    ``noise`` is the point-jitter sigma in meters; ``shape_jitter`` scales
    the per-instance dimension variation.
    """
    name = CLASS_NAMES[class_id]
    length, width, height = _arm(rng, shape_jitter)

    if name == "lbracket":
        cuboids = [(( length / 2, 0.0, 0.0), (length, width, height)),
                   ((length - width / 2, (length * 0.8) / 2, 0.0),
                    (width, length * 0.8, height))]
        pts = _sample_cuboids(rng, n_points, cuboids)
    elif name == "tbar":
        cuboids = [((0.0, 0.0, 0.0), (width, length, height)),
                   ((length * 0.45, 0.0, 0.0), (length * 0.9 - width, width, height))]
        pts = _sample_cuboids(rng, n_points, cuboids)
    elif name == "zbar":
        # half shape: half the central bar plus the +x arm; the other half is
        # its exact 180-degree copy, so the sampled set is C2-symmetric
        half = [((length / 4, 0.0, 0.0), (length / 2, width, height)),
                ((length / 2 - width / 2, (length * 0.35) / 2 + width / 2, 0.0),
                 (width, length * 0.35, height))]
        h = _sample_cuboids(rng, (n_points + 1) // 2, half)
        if noise > 0:
            h = h + rng.normal(0.0, noise, size=h.shape)
        other = np.column_stack([-h[:, 0], -h[:, 1], h[:, 2]])
        return np.concatenate([h, other])
    elif name == "tube":
        pts = _sample_cylinder(rng, n_points, radius=width * 1.1, height=height * 2.0)
    elif name == "wedge":
        # ramp: stack of thinning slabs along +z
        slabs = 6
        cuboids = []
        for i in range(slabs):
            frac = 1.0 - i / slabs
            cuboids.append(((-(length * (1 - frac)) / 2, 0.0,
                             (i + 0.5) * height / slabs - height / 2),
                            (length * frac, length * 0.6, height / slabs)))
        pts = _sample_cuboids(rng, n_points, cuboids)
    elif name == "hook":
        cuboids = [(( length / 2, 0.0, 0.0), (length, width, height)),
                   ((length - width / 2, (length * 0.7) / 2, 0.0),
                    (width, length * 0.7, height)),
                   ((length - width * 2.2, length * 0.7 - width / 2, 0.0),
                    (width * 2.2, width, height))]
        pts = _sample_cuboids(rng, n_points, cuboids)
    else:
        raise ValueError(f"unknown class id {class_id}")

    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return pts


def make_instance(class_id: int, azimuth_deg: float, seed, noise: float = 0.0,
                  n_points: int = 1500) -> np.ndarray:
    """Deterministic instance at a given azimuth (rotation about the z axis
    through the origin, so symmetric classes coincide exactly)."""
    rng = np.random.default_rng(seed)
    proto = make_prototype(class_id, rng, noise=noise, n_points=n_points)
    if azimuth_deg == 0.0:
        return proto
    return rotate_points(proto, np.deg2rad(azimuth_deg), center=(0.0, 0.0, 0.0))


@dataclass
class SynthItem:
    cloud: np.ndarray
    class_id: int
    azimuth: float            # degrees in [0, 360)
    sample_id: str


def synth_dataset(n_classes: int, per_class: int, noise: float = 0.05,
                  seed: int = 0, n_points: int = 1500,
                  split: str = "train") -> List[SynthItem]:
    """Labeled instances at uniform random azimuths; deterministic per seed.

    The split tag only decorrelates the random streams, so train/test sets
    drawn with the same seed do not share instances.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    tag = {"train": 0, "test": 1}.get(split)
    if tag is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    items = []
    for c in range(n_classes):
        for i in range(per_class):
            ss = np.random.SeedSequence([seed, tag, c, i])
            azimuth = float(np.random.default_rng(ss.spawn(1)[0]).random() * 360.0)
            cloud = make_instance(c, azimuth, ss, noise=noise, n_points=n_points)
            items.append(SynthItem(cloud=cloud, class_id=c, azimuth=azimuth,
                                   sample_id=f"{split}_{CLASS_NAMES[c]}_{i:04d}"))
    return items


def items_to_samples(items: Sequence[SynthItem], grid_spec=None,
                     keep_clouds: bool = False):
    """Voxelize synthetic items into trainer samples."""
    from .train import LabeledSample
    from .voxel import GridSpec, voxelize
    spec = grid_spec or GridSpec()
    out = []
    for it in items:
        out.append(LabeledSample(grid=voxelize(it.cloud, spec),
                                 class_id=it.class_id,
                                 azimuth=it.azimuth,
                                 cloud=it.cloud if keep_clouds else None,
                                 sample_id=it.sample_id))
    return out


def save_dataset(outdir, train_items: Sequence[SynthItem],
                 test_items: Sequence[SynthItem], n_classes: int) -> None:
    """Write clouds plus labels.csv and scheme.csv under ``outdir``."""
    import os

    from .formats import write_xyz
    clouds = os.path.join(outdir, "clouds")
    os.makedirs(clouds, exist_ok=True)
    scheme = default_scheme(n_classes)
    with open(os.path.join(outdir, "scheme.csv"), "w", encoding="utf-8") as fh:
        fh.write("name,k,period\n")
        for name, k, period in scheme.entries():
            fh.write(f"{name},{k},{'' if period is None else int(period)}\n")
    with open(os.path.join(outdir, "labels.csv"), "w", encoding="utf-8") as fh:
        fh.write("sample_id,split,class_id,azimuth_deg,file\n")
        for split, items in (("train", train_items), ("test", test_items)):
            for it in items:
                rel = f"clouds/{it.sample_id}.xyz"
                write_xyz(os.path.join(outdir, rel), it.cloud)
                fh.write(f"{it.sample_id},{split},{it.class_id},{it.azimuth:.9g},{rel}\n")


def load_dataset(datadir, split: str, keep_clouds: bool = False):
    """Load a saved dataset split; returns (samples, scheme)."""
    import os

    from .formats import read_xyz
    from .train import LabeledSample
    from .voxel import GridSpec, voxelize

    entries = []
    with open(os.path.join(datadir, "scheme.csv"), "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            name, k, period = line.strip().split(",")
            entries.append((name, int(k), float(period) if period else None))
    scheme = OrientationScheme(entries)

    samples = []
    spec = GridSpec()
    with open(os.path.join(datadir, "labels.csv"), "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            sample_id, sp, class_id, azimuth, rel = line.strip().split(",")
            if sp != split:
                continue
            cloud = read_xyz(os.path.join(datadir, rel))
            samples.append(LabeledSample(
                grid=voxelize(cloud, spec), class_id=int(class_id),
                azimuth=float(azimuth), cloud=cloud if keep_clouds else None,
                sample_id=sample_id))
    if not samples:
        raise ValueError(f"{datadir}: no samples for split {split!r}")
    return samples, scheme


# ---------------------------------------------------------------------------
# detection scenes

OBJECT_DIMS = np.array([2.4, 2.4, 1.2])   # nominal planted-object box, meters


def make_detection_object(seed, noise: float = 0.03, n_points: int = 900) -> np.ndarray:
    """A grounded car-scale L-shaped object at canonical azimuth.

    Footprint fills OBJECT_DIMS in x/y; z spans [0, height]."""
    rng = np.random.default_rng(seed)
    l, w, h = OBJECT_DIMS
    arm = w * 0.38
    cuboids = [((0.0, -(w - arm) / 2, h / 2), (l, arm, h)),
               (((l - arm) / 2, arm / 2 - 0.01, h / 2), (arm, w - arm, h))]
    pts = _sample_cuboids(rng, n_points, cuboids)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return pts


def _ground_patch(rng, x0, x1, y0, y1, spacing=0.18, z_noise=0.03) -> np.ndarray:
    xs = np.arange(x0, x1, spacing)
    ys = np.arange(y0, y1, spacing)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    pts += rng.normal(0.0, z_noise, size=pts.shape) * np.array([0.3, 0.3, 1.0])
    pts[:, 2] = np.abs(pts[:, 2])
    return pts


def make_scene(seed, extent: float = 10.0, n_objects: Optional[int] = None,
               n_clutter: int = 3, noise: float = 0.03):
    """A ground-plane scene with planted objects and distractor clutter.

    Returns (cloud, ground-truth DetectionBox list).  Objects sit on the
    ground at uniform random azimuths with a separation margin.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xDE, seed]))
    pts = [_ground_patch(rng, 0, extent, 0, extent)]
    if n_objects is None:
        n_objects = int(rng.integers(1, 4))

    def place(count, margin, existing):
        centers = []
        tries = 0
        while len(centers) < count and tries < 200:
            tries += 1
            c = rng.random(2) * (extent - 2 * margin) + margin
            if all(np.linalg.norm(c - e) >= 2.6 * margin for e in existing + centers):
                centers.append(c)
        return centers

    gt = []
    obj_centers = place(n_objects, 1.6, [])
    for i, (cx, cy) in enumerate(obj_centers):
        yaw = float(rng.random() * 2 * np.pi)
        obj = make_detection_object(np.random.SeedSequence([seed, 7, i]), noise=noise)
        obj = rotate_points(obj, yaw, center=(0.0, 0.0, 0.0))
        obj[:, 0] += cx
        obj[:, 1] += cy
        pts.append(obj)
        gt.append(DetectionBox(center=np.array([cx, cy, OBJECT_DIMS[2] / 2]),
                               dims=OBJECT_DIMS.copy(), yaw=yaw, score=1.0))

    for i, (cx, cy) in enumerate(place(n_clutter, 1.2, obj_centers)):
        rng_c = np.random.default_rng(np.random.SeedSequence([seed, 11, i]))
        kind = int(rng_c.integers(2))
        if kind == 0:
            blob = _sample_cylinder(rng_c, 400, radius=0.5 + rng_c.random() * 0.5,
                                    height=0.8 + rng_c.random())
            blob[:, 2] += blob[:, 2].max()
        else:
            size = np.array([1.0 + rng_c.random(), 0.8 + rng_c.random(),
                             0.8 + rng_c.random() * 0.8])
            blob = _sample_box_surface(rng_c, 400, (0, 0, size[2] / 2), size)
        blob = blob + rng_c.normal(0.0, noise, size=blob.shape)
        blob[:, 0] += cx
        blob[:, 1] += cy
        pts.append(blob)

    return np.concatenate(pts), gt


def detector_scheme() -> OrientationScheme:
    return OrientationScheme([("background", 1, None), ("object", 12, 360.0)])


def build_detector_dataset(n_pos: int, n_neg: int, seed: int, noise: float = 0.03):
    """Training crops for the binary scorer, framed exactly like proposals.

    Positives: a grounded object at a random yaw on a ground patch, cropped
    by an upright box of the nominal dims at the object center, labeled with
    the yaw.  Negatives: ground-only or clutter-bearing crops."""
    from .detect import crop_box_grid
    from .train import LabeledSample

    l, w, h = OBJECT_DIMS
    samples = []
    for i in range(n_pos):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 21, i]))
        yaw_deg = float(rng.random() * 360.0)
        obj = make_detection_object(np.random.SeedSequence([seed, 22, i]), noise=noise)
        obj = rotate_points(obj, np.deg2rad(yaw_deg), center=(0.0, 0.0, 0.0))
        ground = _ground_patch(rng, -l, l, -w, w)
        scene = np.concatenate([ground, obj])
        box = DetectionBox(center=np.array([0.0, 0.0, h / 2]), dims=OBJECT_DIMS.copy())
        samples.append(LabeledSample(grid=crop_box_grid(scene, box),
                                     class_id=1, azimuth=yaw_deg,
                                     sample_id=f"pos_{i:04d}"))
    for i in range(n_neg):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31, i]))
        ground = _ground_patch(rng, -l, l, -w, w)
        parts = [ground]
        if rng.random() < 0.6:
            kind = int(rng.integers(2))
            if kind == 0:
                blob = _sample_cylinder(rng, 350, radius=0.4 + rng.random() * 0.6,
                                        height=0.7 + rng.random())
                blob[:, 2] += blob[:, 2].max()
            else:
                size = np.array([0.9 + rng.random(), 0.7 + rng.random(),
                                 0.7 + rng.random()])
                blob = _sample_box_surface(rng, 350, (0, 0, size[2] / 2), size)
            blob[:, :2] += (rng.random(2) - 0.5) * 1.2
            parts.append(blob + rng.normal(0.0, noise, size=blob.shape))
        scene = np.concatenate(parts)
        box = DetectionBox(center=np.array([0.0, 0.0, h / 2]), dims=OBJECT_DIMS.copy())
        samples.append(LabeledSample(grid=crop_box_grid(scene, box),
                                     class_id=0, azimuth=None,
                                     sample_id=f"neg_{i:04d}"))
    return samples
