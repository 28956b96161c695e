"""On-disk formats: OFF meshes, xyz clouds, voxel grids, checkpoints, configs.

Binary grid files ("OCG1"): magic, three u32 LE extents, one f32 LE voxel
size, three f64 LE origin coordinates, then extent-product payload bytes of
{0, 1} in x-fastest order.  "OCF1" is the float variant: identical header,
f32 LE payload, used for exported activation maps.

Checkpoints ("ORN1"): magic, u32 version, architecture tag, the orientation
scheme table, then named f32 LE arrays with shape headers (parameters and
batchnorm running statistics).
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .model import Network, OrientationScheme, build_network
from .voxel import GridSpec, OccupancyGrid

CHECKPOINT_MAGIC = b"ORN1"
CHECKPOINT_VERSION = 1


def read_off(path) -> tuple:
    """Parse an OFF mesh file into (vertices, faces) arrays.

    Accepts '#' comment lines and the common variant where the vertex/face
    counts share the header line.  Faces must be triangles.
    """
    tokens = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        first = True
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if first:
                first = False
                if not line.startswith("OFF"):
                    raise ValueError(f"{path}: missing OFF header")
                rest = line[3:].strip()
                if rest:
                    tokens.extend(rest.split())
                continue
            tokens.extend(line.split())
    if len(tokens) < 3:
        raise ValueError(f"{path}: truncated OFF header")
    nv, nf = int(tokens[0]), int(tokens[1])
    pos = 3
    if len(tokens) < pos + 3 * nv:
        raise ValueError(f"{path}: expected {nv} vertices")
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        if pos >= len(tokens):
            raise ValueError(f"{path}: expected {nf} faces")
        arity = int(tokens[pos])
        if arity != 3:
            raise ValueError(f"{path}: only triangle faces supported, got {arity}-gon")
        faces.append([int(t) for t in tokens[pos + 1:pos + 4]])
        pos += 1 + arity
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def read_xyz(path) -> np.ndarray:
    """Read an ASCII point cloud: one whitespace-separated x y z per line."""
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 coordinates, got {len(parts)}")
            pts.append([float(p) for p in parts])
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def write_xyz(path, cloud: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in np.asarray(cloud, dtype=np.float64):
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def _write_grid_header(fh, magic, extents, voxel_size, origin):
    fh.write(magic)
    fh.write(struct.pack("<3I", *extents))
    fh.write(struct.pack("<f", voxel_size))
    fh.write(struct.pack("<3d", *origin))


def _read_grid_header(fh, path):
    magic = fh.read(4)
    extents = struct.unpack("<3I", fh.read(12))
    voxel_size = struct.unpack("<f", fh.read(4))[0]
    origin = np.array(struct.unpack("<3d", fh.read(24)))
    return magic, extents, voxel_size, origin


def write_ocg(path, grid: OccupancyGrid) -> None:
    with open(path, "wb") as fh:
        _write_grid_header(fh, b"OCG1", grid.values.shape, grid.voxel_size, grid.origin)
        fh.write(grid.values.astype(np.uint8).tobytes(order="F"))  # x-fastest


def read_ocg(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        magic, extents, voxel_size, origin = _read_grid_header(fh, path)
        if magic != b"OCG1":
            raise ValueError(f"{path}: bad magic {magic!r}, expected OCG1")
        n = extents[0] * extents[1] * extents[2]
        payload = np.frombuffer(fh.read(n), dtype=np.uint8)
        if payload.size != n:
            raise ValueError(f"{path}: truncated payload")
        if payload.max(initial=0) > 1:
            raise ValueError(f"{path}: occupancy values must be 0 or 1")
    values = payload.reshape(extents, order="F")
    if len(set(extents)) != 1:
        raise ValueError(f"{path}: occupancy grids must be cubic, got {extents}")
    total = int(extents[0])
    padding = 2 if total > 4 else 0
    spec = GridSpec(total=total, object_extent=total - 2 * padding, padding=padding)
    return OccupancyGrid(spec, values, origin, voxel_size)


def write_ocf(path, values: np.ndarray, voxel_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> None:
    """Write a float-valued 3D map in the OCF1 grid container."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise ValueError(f"OCF1 payload must be 3D, got shape {values.shape}")
    with open(path, "wb") as fh:
        _write_grid_header(fh, b"OCF1", values.shape, voxel_size, origin)
        fh.write(values.tobytes(order="F"))


def read_ocf(path) -> tuple:
    with open(path, "rb") as fh:
        magic, extents, voxel_size, origin = _read_grid_header(fh, path)
        if magic != b"OCF1":
            raise ValueError(f"{path}: bad magic {magic!r}, expected OCF1")
        n = extents[0] * extents[1] * extents[2]
        payload = np.frombuffer(fh.read(4 * n), dtype="<f4")
        if payload.size != n:
            raise ValueError(f"{path}: truncated payload")
    return payload.reshape(extents, order="F").copy(), voxel_size, origin


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, net: Network) -> None:
    """Serialize a network: arch tag, scheme table, named f32 arrays."""
    arrays = {name: p.data for name, p in net.named_params().items()}
    arrays.update(net.named_buffers())
    scheme = net.scheme
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(_pack_str(net.arch))
        fh.write(struct.pack("<I", net.n_classes))
        fh.write(struct.pack("<I", 1 if net.orient_head is not None else 0))
        entries = scheme.entries() if scheme is not None else []
        fh.write(struct.pack("<I", len(entries)))
        for name, k, period in entries:
            fh.write(_pack_str(name))
            fh.write(struct.pack("<I", k))
            fh.write(struct.pack("<I", 0 if period is None else int(round(period))))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
            fh.write(_pack_str(name))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, dtype=np.float32) -> Network:
    """Rebuild a network from an ORN1 file."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an ORN1 checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arch = _unpack_str(fh)
        (n_classes,) = struct.unpack("<I", fh.read(4))
        (has_orient,) = struct.unpack("<I", fh.read(4))
        (n_entries,) = struct.unpack("<I", fh.read(4))
        entries = []
        for _ in range(n_entries):
            name = _unpack_str(fh)
            (k,) = struct.unpack("<I", fh.read(4))
            (period,) = struct.unpack("<I", fh.read(4))
            entries.append((name, k, None if period == 0 else float(period)))
        scheme = OrientationScheme(entries) if entries else None
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_arrays):
            name = _unpack_str(fh)
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            data = np.frombuffer(fh.read(4 * int(np.prod(shape))), dtype="<f4")
            arrays[name] = data.reshape(shape).copy()

    net = build_network(arch, n_classes, scheme, seed=0, dtype=dtype,
                        orientation_head=bool(has_orient))
    for name, p in net.named_params().items():
        if name not in arrays:
            raise ValueError(f"{path}: missing array {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name!r}")
        p.data[...] = arrays[name].astype(dtype)
    for name, b in net.named_buffers().items():
        if name in arrays:
            b[...] = arrays[name].astype(dtype)
    return net


def parse_config_text(text: str) -> dict:
    """Parse flat 'key = value' lines; '#' comments allowed; unknown keys
    are the caller's problem (validated against the target dataclass)."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def read_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def write_history_csv(path, history: list) -> None:
    cols = ["epoch", "loss", "loss_class", "loss_orient", "val_acc", "val_wf1",
            "val_orient_acc"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")


def write_boxes_csv(path, boxes, with_score: bool = True) -> None:
    """Detection/ground-truth boxes: cx,cy,cz,l,w,h,yaw[,score]."""
    with open(path, "w", encoding="utf-8") as fh:
        for b in boxes:
            row = [b.center[0], b.center[1], b.center[2], b.dims[0], b.dims[1],
                   b.dims[2], b.yaw]
            if with_score:
                row.append(b.score)
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_boxes_csv(path):
    from .detect import DetectionBox
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [float(p) for p in line.split(",")]
            if len(parts) not in (7, 8):
                raise ValueError(f"{path}:{ln}: expected 7 or 8 fields, got {len(parts)}")
            score = parts[7] if len(parts) == 8 else 0.0
            boxes.append(DetectionBox(center=np.array(parts[0:3]),
                                      dims=np.array(parts[3:6]),
                                      yaw=parts[6], score=score))
    return boxes
