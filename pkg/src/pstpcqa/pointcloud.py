"""Colored point clouds: PLY input/output and canonical-sphere normalization.

A cloud is an (N, 6) float64 matrix: columns 0-2 are spatial coordinates,
columns 3-5 are RGB stored as reals in [0, 1]. Conversion from byte colors
happens once at I/O; everything downstream consumes real-valued features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SPHERE_CENTER = 1001.0
SPHERE_RADIUS = 1000.0


class MalformedHeader(ValueError):
    """PLY header is missing required structure (vertex element, x/y/z...)."""


class MissingColor(ValueError):
    """PLY vertex element declares no color properties."""


class TruncatedBody(ValueError):
    """PLY body holds fewer vertex records than the header declares."""


class IoFailure(OSError):
    """File could not be written or read."""


@dataclass(frozen=True)
class PointCloud:
    """Immutable N x 6 cloud; safe to share across threads."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 6 or pts.shape[0] < 1:
            raise ValueError(f"points must be a non-empty (N, 6) matrix, got shape {pts.shape}")
        if not np.all(np.isfinite(pts[:, :3])):
            raise ValueError("coordinates contain NaN or infinite values")
        if np.any(pts[:, 3:] < 0.0) or np.any(pts[:, 3:] > 1.0):
            raise ValueError("color components must lie in [0, 1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def colors(self) -> np.ndarray:
        return self.points[:, 3:]


@dataclass(frozen=True)
class LabeledSample:
    """A cloud with its subjective score and provenance for split hygiene."""

    cloud: PointCloud
    mos: float
    content_id: str
    distortion_tag: str = ""

    def __post_init__(self):
        if self.mos < 0:
            raise ValueError(f"mos must be non-negative, got {self.mos}")
        if not self.content_id:
            raise ValueError("content_id must be non-empty")


_PLY_FLOAT_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
}
_PLY_INT_TYPES = {
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}
_COORD_NAMES = {"x": 0, "y": 1, "z": 2}
_COLOR_NAMES = {"red": 0, "r": 0, "green": 1, "g": 1, "blue": 2, "b": 2}


def _parse_header(fh):
    """Read the header; return (fmt, n_vertices, property list) for vertices."""
    magic = fh.readline().strip()
    if magic != b"ply":
        raise MalformedHeader("file does not start with 'ply'")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        raw = fh.readline()
        if not raw:
            raise MalformedHeader("header has no end_header line")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MalformedHeader("property declared before any element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedHeader(f"unsupported format {fmt!r}")
    if not elements:
        raise MalformedHeader("no element declarations")
    name, count, props = elements[0]
    if name != "vertex":
        raise MalformedHeader("vertex must be the first declared element")
    return fmt, count, props


def _column_layout(props):
    """Map vertex properties onto coordinate/color columns.

    Returns (np dtype fields, coord column indices, color column indices,
    color_is_byte flags). Unknown scalar properties are read and dropped.
    """
    coord_cols = {}
    color_cols = {}
    fields = []
    for i, (ptype, pname) in enumerate(props):
        if ptype == "list":
            raise MalformedHeader(f"list property {pname!r} in vertex element is unsupported")
        key = pname.lower()
        if ptype in _PLY_FLOAT_TYPES:
            code = _PLY_FLOAT_TYPES[ptype][0]
            is_byte = False
        elif ptype in _PLY_INT_TYPES:
            code = _PLY_INT_TYPES[ptype][0]
            is_byte = True
        else:
            raise MalformedHeader(f"unsupported property type {ptype!r}")
        fields.append((f"f{i}", code))
        if key in _COORD_NAMES:
            coord_cols[_COORD_NAMES[key]] = (f"f{i}", is_byte)
        elif key in _COLOR_NAMES:
            color_cols[_COLOR_NAMES[key]] = (f"f{i}", is_byte)
    if sorted(coord_cols) != [0, 1, 2]:
        raise MalformedHeader("vertex element must declare x, y, and z")
    if sorted(color_cols) != [0, 1, 2]:
        raise MissingColor("vertex element declares no full RGB color set")
    return fields, coord_cols, color_cols


def load_ply(path) -> PointCloud:
    """Read an ASCII or binary-little-endian PLY file into a PointCloud.

    Byte colors are divided by 255; float colors are taken as-is. Unknown
    per-vertex scalar properties are skipped. Raises MalformedHeader,
    MissingColor, or TruncatedBody on structurally bad files.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    with fh:
        fmt, count, props = _parse_header(fh)
        fields, coord_cols, color_cols = _column_layout(props)
        out = np.empty((count, 6), dtype=np.float64)

        if fmt == "binary_little_endian":
            dtype = np.dtype(fields)
            raw = fh.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise TruncatedBody(f"expected {count} vertex records, body holds fewer")
            rec = np.frombuffer(raw, dtype=dtype, count=count)
            for col, (fname, _) in coord_cols.items():
                out[:, col] = rec[fname].astype(np.float64)
            for col, (fname, is_byte) in color_cols.items():
                vals = rec[fname].astype(np.float64)
                out[:, 3 + col] = vals / 255.0 if is_byte else vals
        else:
            n_props = len(fields)
            field_index = {name: i for i, (name, _) in enumerate(fields)}
            rows = np.empty((count, n_props), dtype=np.float64)
            filled = 0
            for raw in fh:
                line = raw.strip()
                if not line:
                    continue
                tokens = line.split()
                if len(tokens) < n_props:
                    raise TruncatedBody(f"vertex record {filled} has {len(tokens)} values, expected {n_props}")
                rows[filled] = [float(t) for t in tokens[:n_props]]
                filled += 1
                if filled == count:
                    break
            if filled < count:
                raise TruncatedBody(f"expected {count} vertex records, found {filled}")
            for col, (fname, _) in coord_cols.items():
                out[:, col] = rows[:, field_index[fname]]
            for col, (fname, is_byte) in color_cols.items():
                vals = rows[:, field_index[fname]]
                out[:, 3 + col] = vals / 255.0 if is_byte else vals

    return PointCloud(out)


def save_ply(cloud: PointCloud, path, mode: str = "binary") -> None:
    """Write a PLY readable by load_ply; colors are emitted as round(c*255).

    Binary mode stores coordinates as doubles, so a save/load round trip
    preserves them bit-exactly.
    """
    if mode not in ("ascii", "binary"):
        raise ValueError(f"mode must be 'ascii' or 'binary', got {mode!r}")
    fmt = "ascii 1.0" if mode == "ascii" else "binary_little_endian 1.0"
    header = (
        f"ply\nformat {fmt}\n"
        f"element vertex {cloud.n_points}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    colors = np.rint(cloud.colors * 255.0).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            if mode == "ascii":
                for (x, y, z), (r, g, b) in zip(cloud.coords, colors):
                    fh.write(f"{x:.17g} {y:.17g} {z:.17g} {r} {g} {b}\n".encode("ascii"))
            else:
                rec = struct.Struct("<dddBBB")
                for (x, y, z), (r, g, b) in zip(cloud.coords, colors):
                    fh.write(rec.pack(x, y, z, r, g, b))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def normalize(cloud: PointCloud) -> PointCloud:
    """Map coordinates into the canonical sphere of radius 1000 at (1001,)*3.

    The cloud is centered on its centroid and scaled so the farthest point
    sits on the sphere surface; colors are untouched. A degenerate cloud
    (all points coincident) maps every point to the sphere center rather
    than erroring: a constant patch is a legal, maximally distorted input.
    """
    coords = cloud.coords
    centroid = coords.mean(axis=0)
    centered = coords - centroid
    radius = np.sqrt((centered * centered).sum(axis=1).max())
    out = np.empty_like(cloud.points)
    if radius == 0.0:
        out[:, :3] = SPHERE_CENTER
    else:
        out[:, :3] = centered * (SPHERE_RADIUS / radius) + SPHERE_CENTER
    out[:, 3:] = cloud.colors
    return PointCloud(out)
