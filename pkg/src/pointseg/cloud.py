"""Point cloud containers, file I/O, block partitioning, synthetic scenes,
and the geometric perturbations used by the robustness report.

Clouds hold float64 coordinates in memory; the binary format quantizes to
32-bit floats on write. Loading therefore yields f32-representable values,
and a loaded cloud round-trips through the binary format bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CloudFormatError, CloudParseError, ContractViolation,
                     DegenerateInput)

MAGIC = b"PCLD"
BINARY_VERSION = 1

# ASCII column vocabulary, in canonical order
_COLUMNS = ("x", "y", "z", "r", "g", "b", "label")


@dataclass
class PointCloud:
    xyz: np.ndarray                      # (n, 3) float64
    attrs: np.ndarray | None = None      # (n, a) float64, e.g. rgb in [0, 1]
    labels: np.ndarray | None = None     # (n,) int32

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise DegenerateInput(f"xyz must be (n, 3), got {self.xyz.shape}")
        if not np.isfinite(self.xyz).all():
            raise DegenerateInput("xyz contains non-finite values")
        if self.attrs is not None:
            self.attrs = np.asarray(self.attrs, dtype=np.float64)
            if self.attrs.ndim != 2 or self.attrs.shape[0] != self.n:
                raise DegenerateInput(
                    f"attrs shape {self.attrs.shape} inconsistent with {self.n} points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.n,):
                raise DegenerateInput(
                    f"labels shape {self.labels.shape} inconsistent with {self.n} points")
            if self.labels.size and self.labels.min() < 0:
                raise DegenerateInput("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    @property
    def feature_width(self) -> int:
        """Per-point input width: xyz plus any attributes."""
        return 3 + (self.attrs.shape[1] if self.attrs is not None else 0)

    def features(self) -> np.ndarray:
        """(n, feature_width) float64 matrix of xyz and attributes."""
        if self.attrs is None:
            return self.xyz
        return np.hstack([self.xyz, self.attrs])

    def take(self, indices) -> "PointCloud":
        return PointCloud(
            self.xyz[indices],
            None if self.attrs is None else self.attrs[indices],
            None if self.labels is None else self.labels[indices])


@dataclass
class Block:
    indices: np.ndarray          # (samples,) into the parent cloud
    origin: np.ndarray           # (3,) cube corner
    cell: tuple = field(default=())


# ---------------------------------------------------------------------------
# ASCII format: one header line naming columns, whitespace-separated rows


def _ascii_columns(cloud: PointCloud):
    cols = ["x", "y", "z"]
    if cloud.attrs is not None:
        if cloud.attrs.shape[1] != 3:
            raise CloudFormatError(
                f"ascii format stores rgb attributes only, got width {cloud.attrs.shape[1]}")
        cols += ["r", "g", "b"]
    if cloud.labels is not None:
        cols.append("label")
    return cols


def _save_ascii(cloud: PointCloud, path: Path):
    cols = _ascii_columns(cloud)
    mat = cloud.features()
    with open(path, "w") as fh:
        fh.write(" ".join(cols) + "\n")
        for i in range(cloud.n):
            row = ["%.8g" % v for v in mat[i]]
            if cloud.labels is not None:
                row.append(str(int(cloud.labels[i])))
            fh.write(" ".join(row) + "\n")


def _load_ascii(path: Path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CloudFormatError(f"{path}: empty file")
    header = lines[0].split()
    for c in header:
        if c not in _COLUMNS:
            raise CloudFormatError(f"{path}: unknown column {c!r}")
    if len(set(header)) != len(header):
        raise CloudFormatError(f"{path}: duplicate columns in header")
    for c in ("x", "y", "z"):
        if c not in header:
            raise CloudFormatError(f"{path}: missing coordinate column {c!r}")
    pos = {c: i for i, c in enumerate(header)}
    has_rgb = all(c in pos for c in ("r", "g", "b"))
    has_label = "label" in pos

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(header):
            raise CloudParseError(
                f"expected {len(header)} columns, got {len(parts)}", line=lineno)
        try:
            rows.append([float(v) for v in parts])
        except ValueError as e:
            raise CloudParseError(str(e), line=lineno) from None
    if not rows:
        raise CloudFormatError(f"{path}: no data rows")
    mat = np.array(rows, dtype=np.float64)
    xyz = mat[:, [pos["x"], pos["y"], pos["z"]]]
    attrs = mat[:, [pos["r"], pos["g"], pos["b"]]] if has_rgb else None
    labels = None
    if has_label:
        col = mat[:, pos["label"]]
        if (col != np.round(col)).any():
            bad = int(np.nonzero(col != np.round(col))[0][0])
            raise CloudParseError("label must be an integer", line=bad + 2)
        labels = col.astype(np.int32)
    return PointCloud(xyz, attrs, labels)


# ---------------------------------------------------------------------------
# binary format: magic, version u16, n u64, column descriptor, f32 data,
# u16 labels


def _save_binary(cloud: PointCloud, path: Path):
    attr_names = []
    if cloud.attrs is not None:
        if cloud.attrs.shape[1] == 3:
            attr_names = ["r", "g", "b"]
        else:
            attr_names = [f"a{i}" for i in range(cloud.attrs.shape[1])]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQBB", BINARY_VERSION, cloud.n,
                             len(attr_names), 1 if cloud.labels is not None else 0))
        for name in attr_names:
            raw = name.encode()
            fh.write(struct.pack("<B", len(raw)) + raw)
        fh.write(np.ascontiguousarray(cloud.features(), dtype="<f4").tobytes())
        if cloud.labels is not None:
            if cloud.labels.size and cloud.labels.max() > 0xFFFF:
                raise CloudFormatError("labels exceed u16 range")
            fh.write(cloud.labels.astype("<u2").tobytes())


def _load_binary(path: Path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CloudFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, n, n_attrs, has_labels = struct.unpack_from("<HQBB", raw, 4)
    if version != BINARY_VERSION:
        raise CloudFormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HQBB")
    for _ in range(n_attrs):
        (ln,) = struct.unpack_from("<B", raw, off)
        off += 1 + ln
    width = 3 + n_attrs
    need = off + 4 * n * width + (2 * n if has_labels else 0)
    if len(raw) < need:
        raise CloudFormatError(f"{path}: truncated, expected {need} bytes, got {len(raw)}")
    mat = np.frombuffer(raw, dtype="<f4", count=n * width, offset=off)\
        .reshape(n, width).astype(np.float64)
    off += 4 * n * width
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int32)
    attrs = mat[:, 3:].copy() if n_attrs else None
    return PointCloud(mat[:, :3].copy(), attrs, labels)


def save_cloud(cloud: PointCloud, path, format: str = "ascii"):
    path = Path(path)
    if format == "ascii":
        _save_ascii(cloud, path)
    elif format == "binary":
        _save_binary(cloud, path)
    else:
        raise CloudFormatError(f"unknown format {format!r}")


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Read a cloud; format inferred from the magic bytes when not given."""
    path = Path(path)
    if format is None:
        with open(path, "rb") as fh:
            format = "binary" if fh.read(4) == MAGIC else "ascii"
    if format == "ascii":
        return _load_ascii(path)
    if format == "binary":
        return _load_binary(path)
    raise CloudFormatError(f"unknown format {format!r}")


# ---------------------------------------------------------------------------
# partitioning


def partition_blocks(cloud: PointCloud, cube_size: float = 1.0, samples: int = 4096,
                     seed: int = 0, mode: str = "xy") -> list[Block]:
    """Cut the cloud into an axis-aligned grid of cube_size and resample
    each non-empty cell to exactly `samples` indices.

    Cells are floor(coord / cube_size) bins over XY (full vertical extent)
    or XYZ. Cells with at least `samples` points are drawn without
    replacement, smaller ones with replacement.
    """
    if cloud.n == 0:
        raise DegenerateInput("cannot partition an empty cloud")
    if cube_size <= 0:
        raise ContractViolation(f"cube_size must be positive, got {cube_size}")
    if mode not in ("xy", "xyz"):
        raise ContractViolation(f"partition mode must be xy or xyz, got {mode!r}")
    dims = 2 if mode == "xy" else 3
    coords = cloud.xyz.astype(np.float64)
    cells = np.floor(coords[:, :dims] / cube_size).astype(np.int64)

    buckets: dict[tuple, list] = {}
    for i, key in enumerate(map(tuple, cells)):
        buckets.setdefault(key, []).append(i)

    rng = np.random.default_rng(seed)
    blocks = []
    for key in sorted(buckets):
        idx = np.asarray(buckets[key], dtype=np.int64)
        if idx.size >= samples:
            pick = rng.choice(idx, size=samples, replace=False)
        else:
            pick = rng.choice(idx, size=samples, replace=True)
        origin = np.zeros(3)
        origin[:dims] = np.asarray(key, dtype=np.float64) * cube_size
        if mode == "xy":
            origin[2] = coords[idx, 2].min()
        blocks.append(Block(np.sort(pick), origin, key))
    return blocks


# ---------------------------------------------------------------------------
# synthetic scenes


def _sample_primitive(kind: str, count: int, params: dict, rng) -> np.ndarray:
    if kind == "hplane":
        origin = np.asarray(params.get("origin", (0.0, 0.0)), dtype=np.float64)
        size = np.asarray(params.get("size", (1.0, 1.0)), dtype=np.float64)
        z = float(params.get("z", 0.0))
        pts = np.empty((count, 3))
        pts[:, :2] = origin + rng.uniform(size=(count, 2)) * size
        pts[:, 2] = z
        return pts
    if kind == "vplane":
        axis = params.get("axis", "x")
        if axis not in ("x", "y"):
            raise ContractViolation(f"vplane axis must be x or y, got {axis!r}")
        pos = float(params.get("pos", 0.0))
        origin = np.asarray(params.get("origin", (0.0, 0.0)), dtype=np.float64)
        size = np.asarray(params.get("size", (1.0, 1.0)), dtype=np.float64)
        uv = origin + rng.uniform(size=(count, 2)) * size
        pts = np.empty((count, 3))
        if axis == "x":
            pts[:, 0] = pos
            pts[:, 1] = uv[:, 0]
        else:
            pts[:, 1] = pos
            pts[:, 0] = uv[:, 0]
        pts[:, 2] = uv[:, 1]
        return pts
    if kind == "box":
        lo = np.asarray(params.get("min", (0.0, 0.0, 0.0)), dtype=np.float64)
        hi = np.asarray(params.get("max", (1.0, 1.0, 1.0)), dtype=np.float64)
        if (hi <= lo).any():
            raise ContractViolation(f"box needs max > min, got {lo} and {hi}")
        span = hi - lo
        # area-weighted choice among the 6 faces
        areas = np.array([span[1] * span[2], span[1] * span[2],
                          span[0] * span[2], span[0] * span[2],
                          span[0] * span[1], span[0] * span[1]])
        face = rng.choice(6, size=count, p=areas / areas.sum())
        pts = lo + rng.uniform(size=(count, 3)) * span
        pts[face == 0, 0] = lo[0]
        pts[face == 1, 0] = hi[0]
        pts[face == 2, 1] = lo[1]
        pts[face == 3, 1] = hi[1]
        pts[face == 4, 2] = lo[2]
        pts[face == 5, 2] = hi[2]
        return pts
    if kind == "sphere":
        center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
        radius = float(params.get("radius", 0.5))
        if radius <= 0:
            raise ContractViolation(f"sphere radius must be positive, got {radius}")
        v = rng.normal(size=(count, 3))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
        return center + radius * v
    raise ContractViolation(f"unknown primitive kind {kind!r}")


def generate_synthetic_scene(scene_spec: dict, seed: int = 0) -> PointCloud:
    """Labeled cloud sampled on primitive surfaces with optional jitter.

    scene_spec: {"primitives": [{kind, class, count, params, jitter}, ...]}
    with kind in hplane|vplane|box|sphere.
    """
    prims = scene_spec.get("primitives", [])
    total = sum(int(p.get("count", 0)) for p in prims)
    if total <= 0:
        raise DegenerateInput("scene has a zero point budget")
    rng = np.random.default_rng(seed)
    xyz_parts, label_parts = [], []
    for p in prims:
        count = int(p.get("count", 0))
        if count <= 0:
            continue
        pts = _sample_primitive(p.get("kind", ""), count, p.get("params", {}), rng)
        jitter = float(p.get("jitter", 0.0))
        if jitter > 0:
            pts = pts + rng.normal(scale=jitter, size=pts.shape)
        xyz_parts.append(pts)
        label_parts.append(np.full(count, int(p.get("class", 0)), dtype=np.int32))
    return PointCloud(np.vstack(xyz_parts), None, np.concatenate(label_parts))


def load_scene_spec(path) -> dict:
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as e:
            raise CloudFormatError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(spec, dict) or "primitives" not in spec:
        raise CloudFormatError(f"{path}: scene spec needs a 'primitives' list")
    return spec


# ---------------------------------------------------------------------------
# perturbations


def perturb_scale(cloud: PointCloud, ratio: float) -> PointCloud:
    """Scale coordinates about the centroid; attrs and labels unchanged."""
    if not ratio > 0:
        raise ContractViolation(f"scale ratio must be positive, got {ratio}")
    if ratio == 1.0:
        return cloud.take(slice(None))
    c = cloud.xyz.mean(axis=0)
    xyz = (cloud.xyz - c) * ratio + c
    return PointCloud(xyz, cloud.attrs, cloud.labels)


def perturb_rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    """Rotate about the vertical axis through the centroid."""
    if angle == 0.0:
        return cloud.take(slice(None))
    c = cloud.xyz.mean(axis=0)
    rel = cloud.xyz - c
    ca, sa = np.cos(angle), np.sin(angle)
    rot = rel.copy()
    rot[:, 0] = ca * rel[:, 0] - sa * rel[:, 1]
    rot[:, 1] = sa * rel[:, 0] + ca * rel[:, 1]
    return PointCloud(rot + c, cloud.attrs, cloud.labels)
