"""Lattice sampling of trained fields into a fruit point cloud, and PLY IO."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .fields import FieldSet, l2normalize, query_raw, sigmoid, softplus


class PLYError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class FruitPointCloud:
    positions: np.ndarray  # (N, 3) float32
    density: np.ndarray  # (N,) float32
    fruit_prob: np.ndarray  # (N,) float32
    embeddings: np.ndarray  # (N, D) float32, unit rows
    rgb: np.ndarray  # (N, 3) uint8
    labels: np.ndarray | None = None  # (N,) int32
    meta: dict | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)
        n = len(self.positions)
        self.density = np.asarray(self.density, dtype=np.float32).reshape(n)
        self.fruit_prob = np.asarray(self.fruit_prob, dtype=np.float32).reshape(n)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or len(self.embeddings) != n:
            raise ValueError("embeddings must have shape (N, D)")
        self.rgb = np.asarray(self.rgb, dtype=np.uint8).reshape(n, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32).reshape(n)
        self.meta = dict(self.meta or {})

    def __len__(self):
        return len(self.positions)

    @property
    def D(self):
        return self.embeddings.shape[1]

    def subset(self, mask):
        lab = None if self.labels is None else self.labels[mask]
        return FruitPointCloud(self.positions[mask], self.density[mask], self.fruit_prob[mask],
                               self.embeddings[mask], self.rgb[mask], lab, self.meta)

    @classmethod
    def empty(cls, D, meta=None):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, D)), np.zeros((0, 3)), None, meta)


def default_sigma_thresh(bbox, grid_res):
    """Density at which one lattice cell of opacity reaches alpha = 0.5."""
    cell = float(np.min((np.asarray(bbox)[1] - np.asarray(bbox)[0]) / grid_res))
    return math.log(2.0) / cell


def lattice_centers(bbox, grid_res, i):
    """Centers of the x-slab ``i`` of a grid_res^3 cell lattice, in (y, z) raster order."""
    bbox = np.asarray(bbox, dtype=float)
    step = (bbox[1] - bbox[0]) / grid_res
    c = [bbox[0][a] + (np.arange(grid_res) + 0.5) * step[a] for a in range(3)]
    yy, zz = np.meshgrid(c[1], c[2], indexing="ij")
    return np.stack([np.full(yy.size, c[0][i]), yy.ravel(), zz.ravel()], axis=1)


def sample_point_cloud(fields: FieldSet, grid_res=128, sigma_thresh=None, s_thresh=0.5):
    """Query the fields at every lattice cell center and keep confident fruit points.

    A point survives when its density is at least ``sigma_thresh`` and its
    fruit probability is at least ``s_thresh``.  ``sigma_thresh=None`` uses
    ``default_sigma_thresh``.
    """
    if grid_res < 8:
        raise ValueError("grid_res must be >= 8")
    if sigma_thresh is None:
        sigma_thresh = default_sigma_thresh(fields.bbox, grid_res)
    meta = {"sigma_thresh": float(sigma_thresh), "s_thresh": float(s_thresh), "grid_res": int(grid_res)}
    parts = []
    for i in range(grid_res):
        x = lattice_centers(fields.bbox, grid_res, i)
        sig = softplus(query_raw(fields.density, x)[:, 0])
        prob = sigmoid(query_raw(fields.semantic, x)[:, 0])
        keep = (sig >= sigma_thresh) & (prob >= s_thresh)
        if not keep.any():
            continue
        x = x[keep]
        emb = l2normalize(query_raw(fields.instance, x))
        rgb = np.round(sigmoid(query_raw(fields.color, x)) * 255.0)
        parts.append((x, sig[keep], prob[keep], emb, rgb))
    if not parts:
        return FruitPointCloud.empty(fields.D, meta)
    cols = [np.concatenate(c) for c in zip(*parts)]
    return FruitPointCloud(*cols, None, meta)


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
              "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int16": "<i2",
              "uint16": "<u2", "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8"}


def _ply_dtype(D, labels):
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"),
              ("density", "<f4"), ("fruit_prob", "<f4")]
    fields += [(f"f_{d}", "<f4") for d in range(D)]
    if labels:
        fields.append(("label", "<i4"))
    return np.dtype(fields)


def _fmt_meta(v):
    return str(v).replace("\n", " ")


def write_ply(cloud: FruitPointCloud, path, comments=None):
    """Binary little-endian PLY; metadata goes into ``comment key value`` lines."""
    dt = _ply_dtype(cloud.D, cloud.labels is not None)
    meta = dict(cloud.meta)
    meta.update(comments or {})
    meta["embedding_dim"] = cloud.D
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {k} {_fmt_meta(v)}" for k, v in meta.items()]
    lines.append(f"element vertex {len(cloud)}")
    inv = {"<f4": "float", "|u1": "uchar", "<i4": "int"}
    for name in dt.names:
        lines.append(f"property {inv[dt[name].str]} {name}")
    lines.append("end_header")
    arr = np.zeros(len(cloud), dtype=dt)
    arr["x"], arr["y"], arr["z"] = cloud.positions.T
    arr["red"], arr["green"], arr["blue"] = cloud.rgb.T
    arr["density"] = cloud.density
    arr["fruit_prob"] = cloud.fruit_prob
    for d in range(cloud.D):
        arr[f"f_{d}"] = cloud.embeddings[:, d]
    if cloud.labels is not None:
        arr["label"] = cloud.labels
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def _parse_meta_value(v):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def read_ply(path) -> FruitPointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    lines = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise PLYError("header not terminated by end_header", pos)
        try:
            line = data[pos:end].decode("ascii").rstrip("\r")
        except UnicodeDecodeError:
            raise PLYError("non-ascii byte in header", pos) from None
        lines.append((pos, line))
        pos = end + 1
        if line == "end_header":
            break
    if not lines or lines[0][1] != "ply":
        raise PLYError("missing 'ply' magic", 0)
    meta, props, n, fmt, in_vertex = {}, [], None, None, False
    for off, line in lines[1:-1]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise PLYError("malformed format line", off)
            fmt = tok[1]
        elif tok[0] == "comment":
            m = re.match(r"comment (\S+) ?(.*)$", line)
            if m:
                meta[m.group(1)] = _parse_meta_value(m.group(2))
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PLYError("malformed element line", off)
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
            elif int(tok[2]) != 0:
                raise PLYError(f"unsupported element '{tok[1]}'", off)
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PLYError(f"unsupported property line '{line}'", off)
            if in_vertex:
                props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PLYError(f"unknown header keyword '{tok[0]}'", off)
    if fmt != "binary_little_endian":
        raise PLYError(f"unsupported format {fmt!r}", lines[1][0] if len(lines) > 1 else 0)
    if n is None:
        raise PLYError("no vertex element", pos)
    dt = np.dtype(props)
    names = set(dt.names or ())
    required = ["x", "y", "z", "red", "green", "blue", "density", "fruit_prob"]
    for r in required:
        if r not in names:
            raise PLYError(f"missing vertex property '{r}'", pos)
    need = n * dt.itemsize
    if len(data) - pos < need:
        raise PLYError(f"truncated payload: expected {need} bytes, found {len(data) - pos}", len(data))
    arr = np.frombuffer(data, dtype=dt, count=n, offset=pos)
    D = len([p for p in dt.names if re.fullmatch(r"f_\d+", p)])
    for d in range(D):
        if f"f_{d}" not in names:
            raise PLYError(f"embedding properties not contiguous at f_{d}", pos)
    emb = np.stack([arr[f"f_{d}"] for d in range(D)], axis=1) if D else np.zeros((n, 0), np.float32)
    labels = arr["label"].astype(np.int32) if "label" in names else None
    meta.pop("embedding_dim", None)
    return FruitPointCloud(np.stack([arr["x"], arr["y"], arr["z"]], axis=1), arr["density"],
                           arr["fruit_prob"], emb, np.stack([arr["red"], arr["green"], arr["blue"]], axis=1),
                           labels, meta)
