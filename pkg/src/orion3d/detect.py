"""Sliding-box 3D detection with a binary orientation-aware scorer.

Proposals are a ground-plane grid of oriented boxes at sizes derived from
training-box statistics.  Exhaustive mode replicates every location at R
yaw steps and keeps the best-scoring rotation; guided mode scores a single
upright box per location and reads the yaw off the orientation head, which
is the R-fold runtime saving.  Box overlap is ground-plane oriented
rectangle IoU times the vertical overlap ratio.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .layers import softmax
from .model import Network, grids_to_batch
from .voxel import GridSpec, OccupancyGrid, as_cloud

OBJECT_CLASS = 1  # binary scorer convention: 0 = background, 1 = object


@dataclass(eq=False)
class DetectionBox:
    """Oriented 3D box: center/dims in meters, yaw radians in [0, 2pi)."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0
    score: float = 0.0
    orientation_bin: int = -1
    group: int = -1   # proposal location/size id, set by propose_boxes

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(self.dims <= 0):
            raise ValueError(f"box dimensions must be positive, got {self.dims}")
        self.yaw = float(self.yaw) % (2.0 * np.pi)


@dataclass
class SizeStats:
    """Per-dimension mean/spread of training boxes and the size candidates."""

    mean: np.ndarray
    spread: np.ndarray
    candidates: np.ndarray  # (n, 3), clamped to the observed min/max


@dataclass
class EvalReport:
    precisions: np.ndarray
    recalls: np.ndarray
    thresholds: np.ndarray
    ap: float
    boxes_evaluated: int = 0
    wall_time: float = 0.0


def box_stats(gt_boxes: Sequence[DetectionBox]) -> SizeStats:
    """Mean/spread of ground-truth sizes plus discrete size candidates.

    Candidates are the mean and mean +/- one spread (jointly over the three
    dimensions), clamped to the observed min/max and deduplicated, so a
    zero-spread set collapses to a single candidate.
    """
    if not gt_boxes:
        raise ValueError("box_stats needs at least one box")
    dims = np.stack([b.dims for b in gt_boxes])
    mean = dims.mean(axis=0)
    spread = dims.std(axis=0)
    lo, hi = dims.min(axis=0), dims.max(axis=0)
    cands = []
    for f in (0.0, -1.0, 1.0):
        c = np.clip(mean + f * spread, lo, hi)
        if not any(np.allclose(c, e) for e in cands):
            cands.append(c)
    return SizeStats(mean=mean, spread=spread, candidates=np.stack(cands))


def points_near_box(scene: np.ndarray, center, dims, margin: float = 0.0) -> int:
    """Count scene points inside the rotation-invariant envelope of a box:
    the vertical cylinder circumscribing the footprint over the box height.
    The same test for every yaw keeps guided/exhaustive proposal sets equal."""
    d = scene - np.asarray(center)
    r2 = (dims[0] / 2) ** 2 + (dims[1] / 2) ** 2
    in_plane = d[:, 0] ** 2 + d[:, 1] ** 2 <= r2 + margin
    in_z = np.abs(d[:, 2]) <= dims[2] / 2 + margin
    return int(np.sum(in_plane & in_z))


def propose_boxes(scene, stats: SizeStats, stride: float, mode: str = "guided",
                  rotations: int = 18, min_points: int = 20,
                  ground_z: Optional[float] = None) -> list:
    """Grid of box proposals over the scene's ground-plane extent.

    Centers step by ``stride`` over the xy bounding box (both ends
    inclusive), one box per size candidate, sitting on the ground plane.
    Locations with fewer than ``min_points`` points in their envelope are
    pruned before scoring; the envelope is yaw-independent, so exhaustive
    mode yields exactly ``rotations`` proposals per surviving location.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    if mode not in ("guided", "exhaustive"):
        raise ValueError(f"mode must be 'guided' or 'exhaustive', got {mode!r}")
    scene = as_cloud(scene)
    if len(scene) == 0:
        return []
    lo = scene.min(axis=0)
    hi = scene.max(axis=0)
    if ground_z is None:
        ground_z = float(lo[2])
    xs = np.arange(lo[0], hi[0] + stride * 1e-9, stride)
    ys = np.arange(lo[1], hi[1] + stride * 1e-9, stride)
    yaws = (np.arange(rotations) * (2.0 * np.pi / rotations)
            if mode == "exhaustive" else np.zeros(1))

    out = []
    group = 0
    for dims in stats.candidates:
        cz = ground_z + dims[2] / 2.0
        for x in xs:
            for y in ys:
                center = np.array([x, y, cz])
                if points_near_box(scene, center, dims) < min_points:
                    continue
                for yaw in yaws:
                    out.append(DetectionBox(center=center.copy(), dims=dims.copy(),
                                            yaw=float(yaw), group=group))
                group += 1
    return out


def crop_box_grid(scene: np.ndarray, box: DetectionBox,
                  spec: GridSpec = GridSpec()) -> OccupancyGrid:
    """Voxelize a box's interior (plus padding context) in the box frame.

    Points are expressed relative to the box center and rotated by -yaw; the
    box's largest dimension spans the object region, so the padding shell
    adds real scene context around the box, mirroring how whole objects are
    framed for classification.
    """
    d = scene - box.center
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    q = np.empty_like(d)
    q[:, 0] = c * d[:, 0] - s * d[:, 1]
    q[:, 1] = s * d[:, 0] + c * d[:, 1]
    q[:, 2] = d[:, 2]

    scale = spec.object_extent / float(box.dims.max())
    half = spec.total / 2.0
    u = q * scale + half
    idx = np.floor(u).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < spec.total), axis=1)
    values = np.zeros((spec.total,) * 3, dtype=np.uint8)
    ii = idx[inside]
    values[ii[:, 0], ii[:, 1], ii[:, 2]] = 1
    origin = box.center - half / scale
    return OccupancyGrid(spec, values, origin, 1.0 / scale)


def score_boxes(net: Network, scene, boxes: Sequence[DetectionBox],
                mode: str = "guided", spec: GridSpec = GridSpec(),
                batch_size: int = 64) -> tuple:
    """Score proposals with the binary network; returns (boxes, evaluations).

    Every input box costs one network evaluation.  Guided mode assigns each
    box the center angle of its argmax orientation bin as yaw; exhaustive
    mode keeps only the best-scoring rotation per proposal group.
    """
    if mode not in ("guided", "exhaustive"):
        raise ValueError(f"mode must be 'guided' or 'exhaustive', got {mode!r}")
    if net.scheme is None or net.scheme.n_classes != 2:
        raise ValueError("detection needs a binary checkpoint (background/object)")
    if net.scheme.bins[OBJECT_CLASS] < 2:
        raise ValueError("object class must have more than one orientation bin")
    scene = as_cloud(scene)
    boxes = list(boxes)
    if not boxes:
        return [], 0

    off, k = net.scheme.class_block(OBJECT_CLASS)
    scored = []
    for start in range(0, len(boxes), batch_size):
        chunk = boxes[start:start + batch_size]
        grids = [crop_box_grid(scene, b, spec) for b in chunk]
        heads = net.forward(grids_to_batch(grids, net.dtype), mode="eval")
        probs = softmax(heads.class_logits.astype(np.float64))
        obins = np.argmax(heads.orient_logits[:, off:off + k], axis=1)
        for b, p, ob in zip(chunk, probs[:, OBJECT_CLASS], obins):
            nb = DetectionBox(center=b.center, dims=b.dims, yaw=b.yaw,
                              score=float(p), orientation_bin=int(ob), group=b.group)
            scored.append(nb)

    if mode == "guided":
        for b in scored:
            b.yaw = float(np.deg2rad(net.scheme.bin_center(OBJECT_CLASS, b.orientation_bin)))
        return scored, len(boxes)

    best = {}
    for b in scored:
        if b.group not in best or b.score > best[b.group].score:
            best[b.group] = b
    kept = [best[g] for g in sorted(best)]
    return kept, len(boxes)


def _rect_corners(cx, cy, l, w, yaw) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
    rot = local @ np.array([[c, s], [-s, c]])
    return rot + np.array([cx, cy])


def _clip_polygon(poly, a, b):
    # Keep the half-plane left of the directed edge a->b (CCW clip rect).
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        sq = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
        if sp >= 0:
            out.append(p)
        if (sp > 0) != (sq > 0) and sp != sq:
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return out


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rect_intersection_area(ca, cb) -> float:
    """Intersection area of two convex quads (Sutherland-Hodgman clipping)."""
    poly = [p for p in ca]
    for i in range(4):
        poly = _clip_polygon(poly, cb[i], cb[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(poly)


def iou3d(a: DetectionBox, b: DetectionBox) -> float:
    """Ground-plane oriented-rectangle IoU times vertical overlap ratio."""
    ca = _rect_corners(a.center[0], a.center[1], a.dims[0], a.dims[1], a.yaw)
    cb = _rect_corners(b.center[0], b.center[1], b.dims[0], b.dims[1], b.yaw)
    inter = rect_intersection_area(ca, cb)
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    union = area_a + area_b - inter
    plane_iou = inter / union if union > 0 else 0.0

    za0, za1 = a.center[2] - a.dims[2] / 2, a.center[2] + a.dims[2] / 2
    zb0, zb1 = b.center[2] - b.dims[2] / 2, b.center[2] + b.dims[2] / 2
    z_inter = max(0.0, min(za1, zb1) - max(za0, zb0))
    z_union = max(za1, zb1) - min(za0, zb0)
    z_ratio = z_inter / z_union if z_union > 0 else 0.0
    return plane_iou * z_ratio


def nms(boxes: Sequence[DetectionBox], iou_threshold: float) -> list:
    """Greedy descending-score suppression; ties keep input order."""
    for b in boxes:
        if not np.isfinite(b.score):
            raise ValueError("nms requires finite scores")
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept = []
    for i in order:
        if all(iou3d(boxes[i], k) <= iou_threshold for k in kept):
            kept.append(boxes[i])
    return kept


def evaluate_detections(detections: Sequence[DetectionBox],
                        ground_truth: Sequence[DetectionBox],
                        iou_threshold: float = 0.25,
                        boxes_evaluated: int = 0,
                        wall_time: float = 0.0) -> EvalReport:
    """Rank-swept precision/recall and interpolated average precision.

    Detections are taken in descending score order; each matches the
    highest-IoU still-unmatched ground-truth box when that IoU clears the
    threshold.  AP integrates the interpolated precision (max precision at
    any recall >= r) over recall with the trapezoid rule.
    """
    dets = sorted(detections, key=lambda b: -b.score)
    n_gt = len(ground_truth)
    matched = [False] * n_gt
    tp = 0
    precisions, recalls, thresholds = [], [], []
    for rank, d in enumerate(dets, start=1):
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(ground_truth):
            if matched[j]:
                continue
            v = iou3d(d, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / n_gt if n_gt else 0.0)
        thresholds.append(d.score)

    precisions = np.asarray(precisions)
    recalls = np.asarray(recalls)
    if len(dets) == 0 or n_gt == 0:
        ap = 0.0
    else:
        interp = np.maximum.accumulate(precisions[::-1])[::-1]
        r_prev, p_prev = 0.0, interp[0]
        ap = 0.0
        for r, p in zip(recalls, interp):
            ap += (r - r_prev) * (p + p_prev) / 2.0
            r_prev, p_prev = r, p
    return EvalReport(precisions=precisions, recalls=recalls,
                      thresholds=np.asarray(thresholds), ap=float(ap),
                      boxes_evaluated=boxes_evaluated, wall_time=wall_time)


def run_detection(net: Network, scene, stats: SizeStats, mode: str,
                  ground_truth: Sequence[DetectionBox], stride: float = 1.0,
                  rotations: int = 18, min_points: int = 20,
                  nms_iou: float = 0.3, eval_iou: float = 0.25,
                  spec: GridSpec = GridSpec()) -> tuple:
    """Propose, score, suppress, and evaluate one scene end to end."""
    t0 = time.perf_counter()
    proposals = propose_boxes(scene, stats, stride, mode=mode,
                              rotations=rotations, min_points=min_points)
    scored, n_eval = score_boxes(net, scene, proposals, mode=mode, spec=spec)
    kept = nms(scored, nms_iou)
    elapsed = time.perf_counter() - t0
    report = evaluate_detections(kept, ground_truth, eval_iou,
                                 boxes_evaluated=n_eval, wall_time=elapsed)
    return kept, report
