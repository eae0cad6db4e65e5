"""On-disk formats: PMG1 grid containers, TUM trajectories, key-value text,
binary PLY point clouds and CSV loss traces.

PMG1 layout (all little-endian)::

    magic     4 bytes  b"PMG1"
    version   u32      1
    height    u32
    width     u32
    channels  u32
    dtype     u32      1 = float32
    has_valid u32      0 or 1
    payload   H*W*C float32, row-major, channels interleaved
    validity  H*W u8   only when has_valid == 1
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..geom import DepthMap, FlowField, PoseSE3, quat_to_rotmat, rotmat_to_quat

MAGIC = b"PMG1"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIIIII")


class FormatError(ValueError):
    """Raised for malformed or unreadable files; the message names the file."""


@dataclass
class Grid:
    data: np.ndarray  # (H, W, C) float32
    valid: Optional[np.ndarray] = None  # (H, W) bool

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[..., None]
        self.data = np.ascontiguousarray(d, dtype="<f4")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.data.shape[:2]:
                raise ValueError("validity plane shape does not match data")

    @property
    def shape(self):
        return self.data.shape

    def same_bits(self, other: "Grid") -> bool:
        if self.data.shape != other.data.shape:
            return False
        if not np.array_equal(self.data.view("<u4"), other.data.view("<u4")):
            return False
        if (self.valid is None) != (other.valid is None):
            return False
        return self.valid is None or np.array_equal(self.valid, other.valid)


def grid_to_bytes(grid: Grid) -> bytes:
    h, w, c = grid.data.shape
    parts = [_HEADER.pack(MAGIC, VERSION, h, w, c, DTYPE_F32, int(grid.valid is not None)),
             grid.data.tobytes(order="C")]
    if grid.valid is not None:
        parts.append(grid.valid.astype(np.uint8).tobytes(order="C"))
    return b"".join(parts)


def grid_from_bytes(buf: bytes, name: str = "<bytes>") -> Grid:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{name}: truncated header")
    magic, version, h, w, c, dtype, has_valid = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != VERSION or dtype != DTYPE_F32 or has_valid not in (0, 1):
        raise FormatError(f"{name}: unsupported version/dtype/flag ({version}, {dtype}, {has_valid})")
    n = h * w * c * 4
    expected = _HEADER.size + n + (h * w if has_valid else 0)
    if len(buf) != expected:
        raise FormatError(f"{name}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=_HEADER.size).reshape(h, w, c).copy()
    valid = None
    if has_valid:
        plane = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=_HEADER.size + n).reshape(h, w)
        if plane.max(initial=0) > 1:
            raise FormatError(f"{name}: validity plane must hold 0/1")
        valid = plane.astype(bool)
    return Grid(data, valid)


def write_grid(path, grid: Grid) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> Grid:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    return grid_from_bytes(buf, str(path))


def depth_to_grid(depth: DepthMap) -> Grid:
    return Grid(np.where(depth.valid, depth.depth, 0.0).astype("<f4"), depth.valid)


def grid_to_depth(grid: Grid) -> DepthMap:
    d = grid.data[..., 0].astype(np.float64)
    return DepthMap(d, grid.valid)


def flow_to_grid(flow: FlowField) -> Grid:
    return Grid(flow.flow.astype("<f4"), flow.valid)


def grid_to_flow(grid: Grid) -> FlowField:
    if grid.data.shape[2] != 2:
        raise FormatError("flow grid must have 2 channels")
    return FlowField(grid.data.astype(np.float64), grid.valid)


# -- CSV debug view -----------------------------------------------------------

def grid_to_csv(grid: Grid, path) -> None:
    """One line per pixel in row-major order: channel values, then validity if present."""
    h, w, c = grid.data.shape
    flag = int(grid.valid is not None)
    with open(path, "w", newline="") as fh:
        fh.write(f"# PMG1 height={h} width={w} channels={c} valid={flag}\n")
        writer = csv.writer(fh)
        flat = grid.data.reshape(-1, c)
        vflat = grid.valid.reshape(-1) if flag else None
        for i in range(h * w):
            row = [repr(float(x)) for x in flat[i]]
            if flag:
                row.append(str(int(vflat[i])))
            writer.writerow(row)


def grid_from_csv(path) -> Grid:
    path = Path(path)
    with open(path, newline="") as fh:
        head = fh.readline().split()
        if len(head) != 6 or head[:2] != ["#", "PMG1"]:
            raise FormatError(f"{path}: missing '# PMG1' header line")
        try:
            meta = dict(item.split("=") for item in head[2:])
            h, w, c, flag = (int(meta[k]) for k in ("height", "width", "channels", "valid"))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad header") from exc
        rows = list(csv.reader(fh))
    if len(rows) != h * w:
        raise FormatError(f"{path}: expected {h * w} rows, found {len(rows)}")
    vals = np.array([[float(x) for x in r[:c]] for r in rows], dtype=np.float64)
    data = vals.astype("<f4").reshape(h, w, c)
    valid = np.array([r[c] == "1" for r in rows]).reshape(h, w) if flag else None
    return Grid(data, valid)


# -- TUM trajectories ---------------------------------------------------------

def write_tum(path, timestamps: Sequence[float], poses: Sequence[PoseSE3]) -> None:
    """Write camera-to-world poses as ``timestamp tx ty tz qx qy qz qw`` lines."""
    rows = []
    for ts, pose in zip(timestamps, poses):
        qw, qx, qy, qz = rotmat_to_quat(pose.rotation)
        rows.append([ts, *pose.translation, qx, qy, qz, qw])
    write_tum_raw(path, rows)


def write_tum_raw(path, rows) -> None:
    """Write ``(N, 8)`` TUM rows; ``repr`` keeps every float64 bit."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for row in rows:
        if len(row) != 8:
            raise ValueError(f"TUM rows need 8 values, got {len(row)}")
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum_raw(path) -> np.ndarray:
    """``(N, 8)`` array of the numbers in a TUM file, comments skipped."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 8)


def read_tum(path) -> tuple[list, list]:
    raw = read_tum_raw(path)
    stamps = [float(r[0]) for r in raw]
    poses = [PoseSE3(quat_to_rotmat([r[7], r[4], r[5], r[6]]), r[1:4]) for r in raw]
    return stamps, poses


# -- key-value text -----------------------------------------------------------

def parse_key_values(text: str, name: str = "<text>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{name}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        if not key:
            raise FormatError(f"{name}:{lineno}: empty key")
        if key in out:
            raise FormatError(f"{name}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_key_values(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def write_intrinsics(path, focals: Sequence[float], height: int, width: int,
                     principal_point: Optional[tuple] = None) -> None:
    if principal_point is None:
        principal_point = ((width - 1) / 2.0, (height - 1) / 2.0)
    items = {"height": height, "width": width, "cx": repr(float(principal_point[0])),
             "cy": repr(float(principal_point[1])), "num_frames": len(focals)}
    for t, f in enumerate(focals):
        items[f"focal.{t}"] = repr(float(f))
    Path(path).write_text(format_key_values(items))


def read_intrinsics(path) -> dict:
    path = Path(path)
    try:
        kv = parse_key_values(path.read_text(), str(path))
        n = int(kv["num_frames"])
        return {
            "height": int(kv["height"]), "width": int(kv["width"]),
            "cx": float(kv["cx"]), "cy": float(kv["cy"]),
            "focals": [float(kv[f"focal.{t}"]) for t in range(n)],
        }
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing or bad field {exc}") from exc


# -- PLY and CSV outputs ------------------------------------------------------

def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Binary little-endian PLY with float xyz and uchar rgb."""
    points = np.asarray(points, dtype="<f4").reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")
    rec = np.empty(len(points), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = points
    rec["rgb"] = colors
    Path(path).write_bytes(header + rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    end = buf.index(b"end_header\n") + len(b"end_header\n")
    header = buf[:end].decode("ascii").splitlines()
    n = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    rec = np.frombuffer(buf, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=n, offset=end)
    return rec["xyz"].copy(), rec["rgb"].copy()


def write_loss_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "align", "smooth", "flow", "flow_active"])
        for r in trace:
            writer.writerow([r.iteration, repr(r.total), repr(r.align), repr(r.smooth), repr(r.flow),
                             int(r.flow_active)])
