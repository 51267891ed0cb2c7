"""Dense voxel-grid fields and their volumetric rendering operators.

Four grids share one bounding box: density (softplus), color (sigmoid),
semantic logit (identity) and instance embedding (L2 normalised).  Rendering
composites K samples per ray; the backward pass is the analytic adjoint of the
compositing, the activations and the trilinear interpolation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K_

ACTIVATIONS = {"density": "softplus", "color": "sigmoid", "semantic": "identity", "instance": "l2normalize"}
GRID_NAMES = ("density", "color", "semantic", "instance")
TRAIN_BITS = {"density": 1, "color": 2, "semantic": 4, "instance": 8}

CHECKPOINT_MAGIC = b"FLCKPT01"


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def l2normalize(x, axis=-1):
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x, dtype=float), where=n > 0)


_ACT_FN = {"softplus": softplus, "sigmoid": sigmoid, "identity": lambda x: x, "l2normalize": l2normalize}


@dataclass
class VoxelGrid:
    values: np.ndarray  # (nx, ny, nz, C) raw values at the vertices
    bbox: np.ndarray  # (2, 3)
    activation: str = "identity"

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        self.bbox = np.asarray(self.bbox, dtype=float)
        if self.values.ndim != 4:
            raise ValueError("grid values must have shape (nx, ny, nz, C)")
        if min(self.values.shape[:3]) < 2:
            raise ValueError("every grid resolution component must be >= 2")
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise ValueError("degenerate grid bbox")

    @classmethod
    def zeros(cls, resolution, bbox, channels, activation="identity"):
        return cls(np.zeros((*resolution, channels)), bbox, activation)

    @property
    def resolution(self):
        return self.values.shape[:3]

    @property
    def channels(self):
        return self.values.shape[3]

    @property
    def step(self):
        return (self.bbox[1] - self.bbox[0]) / (np.array(self.resolution) - 1)

    @property
    def flat(self):
        return self.values.reshape(-1, self.channels)

    def vertex_positions(self):
        axes = [np.linspace(self.bbox[0][a], self.bbox[1][a], self.resolution[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def query_raw(grid: VoxelGrid, x):
    """Trilinear interpolation of raw vertex values at points ``x`` (..., 3).

    Points outside the bbox get a raw value of 0.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    x = x.reshape(-1, 3)
    res = np.array(grid.resolution)
    u = (x - grid.bbox[0]) / grid.step
    inside = np.all((u >= 0) & (u <= res - 1), axis=1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    f = u - i0
    out = np.zeros((len(x), grid.channels))
    vals = grid.values
    for di in (0, 1):
        wu = f[:, 0] if di else 1 - f[:, 0]
        for dj in (0, 1):
            wv = f[:, 1] if dj else 1 - f[:, 1]
            for dk in (0, 1):
                ww = f[:, 2] if dk else 1 - f[:, 2]
                out += (wu * wv * ww)[:, None] * vals[i0[:, 0] + di, i0[:, 1] + dj, i0[:, 2] + dk]
    out[~inside] = 0.0
    return out.reshape(*shape, grid.channels)


def query(grid: VoxelGrid, x):
    """Activated field value at ``x``."""
    return _ACT_FN[grid.activation](query_raw(grid, x))


@dataclass
class FieldSet:
    density: VoxelGrid
    color: VoxelGrid
    semantic: VoxelGrid
    instance: VoxelGrid
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float)
        for name in GRID_NAMES:
            g = getattr(self, name)
            if not np.array_equal(g.bbox, self.density.bbox) or g.resolution != self.density.resolution:
                raise ValueError("all four grids must share bbox and resolution")

    @classmethod
    def create(cls, resolution, bbox, D, background=(1.0, 1.0, 1.0), seed=0,
               density_init=-4.0, semantic_init=0.0, instance_std=0.1):
        rng = np.random.default_rng(seed)
        res = tuple(int(r) for r in (resolution if np.ndim(resolution) else (resolution,) * 3))
        bbox = np.asarray(bbox, dtype=float)
        return cls(
            density=VoxelGrid(np.full((*res, 1), density_init), bbox, "softplus"),
            color=VoxelGrid(np.zeros((*res, 3)), bbox, "sigmoid"),
            semantic=VoxelGrid(np.full((*res, 1), semantic_init), bbox, "identity"),
            instance=VoxelGrid(rng.normal(0.0, instance_std, (*res, D)), bbox, "l2normalize"),
            background=background,
        )

    @property
    def bbox(self):
        return self.density.bbox

    @property
    def D(self):
        return self.instance.channels

    @property
    def resolution(self):
        return self.density.resolution

    def grids(self):
        return {n: getattr(self, n) for n in GRID_NAMES}

    def copy(self):
        return FieldSet(*(VoxelGrid(g.values.copy(), g.bbox.copy(), g.activation)
                          for g in self.grids().values()), background=self.background.copy())

    def kernel_args(self):
        g = self.density
        return (self.density.flat, self.color.flat, self.semantic.flat, self.instance.flat,
                g.bbox[0].copy(), 1.0 / g.step, np.array(g.resolution, dtype=np.int64), self.background)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be smaller than t_far")


@dataclass
class RayRender:
    color: np.ndarray
    semantic_logit: float
    embedding: np.ndarray
    weights: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    transmittance_out: float  # residual transmittance after the last sample


def ray_box(origins, dirs, bbox):
    """Entry/exit distances of rays against a box; ``hit`` False where the ray misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (bbox[0] - origins) * inv
        t2 = (bbox[1] - origins) * inv
    tmin = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf).max(axis=1)
    tmax = np.nan_to_num(np.maximum(t1, t2), nan=np.inf).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    return tmin, tmax, tmax > tmin


def _as_batch(origins, dirs, tnear, tfar):
    return (np.ascontiguousarray(origins, dtype=float).reshape(-1, 3),
            np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3),
            np.ascontiguousarray(tnear, dtype=float).ravel(),
            np.ascontiguousarray(tfar, dtype=float).ravel())


_NO_JITTER = np.zeros((0, 0))
_EMPTY2 = np.zeros((0, 0))
_EMPTY1 = np.zeros(0)


def render_rays(fields: FieldSet, origins, dirs, tnear, tfar, K, jitter=None,
                want=("color", "semantic", "instance"), t_stop=0.0, record=False):
    """Batched forward render.

    ``jitter`` (n_rays, K) in [0, 1) gives stratified sample offsets; ``None``
    uses cell midpoints.  Returns a dict with ``color``, ``semantic``,
    ``embedding``, ``acc`` and, when ``record``, ``weights``, ``t``, ``delta``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    o, d, tn, tf = _as_batch(origins, dirs, tnear, tfar)
    n = len(o)
    jit = _NO_JITTER if jitter is None else np.ascontiguousarray(jitter, dtype=float)
    flags = ((K_.WANT_COLOR if "color" in want else 0) | (K_.WANT_SEM if "semantic" in want else 0)
             | (K_.WANT_INST if "instance" in want else 0))
    out_c = np.zeros((n, 3))
    out_s = np.zeros(n)
    out_i = np.zeros((n, fields.D))
    out_acc = np.zeros(n)
    out_res = np.zeros(n)
    shape = (n, K) if record else (1, 1)
    out_w, out_t, out_dl = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    K_.march_forward(o, d, tn, tf, jit, int(K), *fields.kernel_args(), flags, float(t_stop),
                     out_c, out_s, out_i, out_acc, out_res, out_w, out_t, out_dl, record)
    out = {"color": out_c, "semantic": out_s, "embedding": out_i, "acc": out_acc,
           "residual": out_res}
    if record:
        out.update(weights=out_w, t=out_t, delta=out_dl)
    return out


def render_ray(fields: FieldSet, ray: Ray, K: int, jitter=None) -> RayRender:
    jit = None if jitter is None else np.asarray(jitter, dtype=float).reshape(1, K)
    out = render_rays(fields, ray.origin, ray.direction, [ray.t_near], [ray.t_far], K, jit, record=True)
    return RayRender(out["color"][0], float(out["semantic"][0]), out["embedding"][0],
                     out["weights"][0], out["t"][0], out["delta"][0], float(out["residual"][0]))


class GradBuffer:
    """Per-grid gradient accumulators with a shared list of touched vertices."""

    def __init__(self, fields: FieldSet):
        nv = int(np.prod(fields.resolution))
        self.grads = {n: np.zeros_like(g.flat) for n, g in fields.grids().items()}
        self.touched = np.zeros(nv, np.uint8)
        self.touched_list = np.zeros(nv, np.int64)
        self.n_touched = np.zeros(1, np.int64)
        self.live = set()  # grids whose accumulators may be non-zero

    def _mark(self, bits):
        for name, b in TRAIN_BITS.items():
            if bits & b:
                self.live.add(name)

    @property
    def vertices(self):
        return self.touched_list[: self.n_touched[0]]

    def dense(self, name, fields):
        """Gradient of grid ``name`` shaped like its values."""
        return self.grads[name].reshape(getattr(fields, name).values.shape)

    def sq_norm(self):
        n = int(self.n_touched[0])
        return sum(K_.sparse_sq_norm(self.grads[name], self.touched_list, n) for name in self.live)

    def step(self, fields: FieldSet, lrs: dict, scale=1.0):
        """Gradient-descent update of touched vertices; clears the buffer."""
        n = int(self.n_touched[0])
        for name in self.live:
            lr = lrs.get(name, 0.0) * scale
            K_.sparse_step(getattr(fields, name).flat, self.grads[name], self.touched_list, n, lr)
        self.live.clear()
        self.clear()

    def clear(self):
        n = int(self.n_touched[0])
        K_.clear_touched(self.touched, self.touched_list, n)
        for name in self.live:
            self.grads[name][self.touched_list[:n]] = 0.0
        self.live.clear()
        self.n_touched[0] = 0


def backward_rays(fields: FieldSet, buf: GradBuffer, origins, dirs, tnear, tfar, K, jitter=None,
                  grad_color=None, grad_semantic=None, grad_embedding=None,
                  train=GRID_NAMES, t_stop=0.0, block=True):
    """Accumulate d(loss)/d(raw vertex values) given upstream gradients per ray.

    Frozen grids (not in ``train``) receive nothing.  With ``block`` (the
    training setting) the density grid only sees the color term, so semantic
    and instance losses cannot reshape geometry; ``block=False`` gives the full
    gradient.
    """
    o, d, tn, tf = _as_batch(origins, dirs, tnear, tfar)
    n = len(o)
    jit = _NO_JITTER if jitter is None else np.ascontiguousarray(jitter, dtype=float)
    bits = 0
    for name in train:
        bits |= TRAIN_BITS[name]
    gc = np.zeros((n, 3)) if grad_color is None else np.ascontiguousarray(grad_color, dtype=float)
    gs = np.zeros(n) if grad_semantic is None else np.ascontiguousarray(grad_semantic, dtype=float).ravel()
    gi = (np.zeros((n, fields.D)) if grad_embedding is None
          else np.ascontiguousarray(grad_embedding, dtype=float))
    if grad_color is None:
        bits &= ~TRAIN_BITS["color"]
    if grad_semantic is None:
        bits &= ~TRAIN_BITS["semantic"]
    if grad_embedding is None:
        bits &= ~TRAIN_BITS["instance"]
    buf._mark(bits)
    dens, col, sem, inst, bmin, inv_step, res, bg = fields.kernel_args()
    K_.march_backward(o, d, tn, tf, jit, int(K), dens, col, sem, inst, bmin, inv_step, res, bg,
                      float(t_stop), gc, gs, gi, bits, bool(block),
                      buf.grads["density"], buf.grads["color"], buf.grads["semantic"], buf.grads["instance"],
                      buf.touched, buf.touched_list, buf.n_touched,
                      False, _EMPTY2, _EMPTY1, 0.0, 0.0, _EMPTY2, _EMPTY1)


def fit_rays(fields: FieldSet, buf: GradBuffer, origins, dirs, tnear, tfar, K, jitter, target_color,
             target_semantic=None, coef_color=1.0, coef_semantic=0.0, train=("density", "color"),
             t_stop=0.0):
    """Single-pass forward and backward for per-ray color / semantic targets.

    The upstream gradients are ``coef_color * (C - target)`` and
    ``coef_semantic * (sigmoid(S) - target)``, which are the gradients of the
    photometric and binary cross-entropy losses up to their normalising
    constants.  Returns the rendered (color, semantic logit).
    """
    o, d, tn, tf = _as_batch(origins, dirs, tnear, tfar)
    n = len(o)
    jit = _NO_JITTER if jitter is None else np.ascontiguousarray(jitter, dtype=float)
    bits = 0
    for name in train:
        bits |= TRAIN_BITS[name]
    if bits & (TRAIN_BITS["instance"]):
        raise ValueError("fit_rays does not train the instance field")
    tc = np.ascontiguousarray(target_color, dtype=float).reshape(n, 3)
    ts = (np.zeros(n) if target_semantic is None
          else np.ascontiguousarray(target_semantic, dtype=float).ravel())
    gc, gs = np.zeros((n, 3)), np.zeros(n)
    out_c, out_s = np.zeros((n, 3)), np.zeros(n)
    buf._mark(bits)
    dens, col, sem, inst, bmin, inv_step, res, bg = fields.kernel_args()
    K_.march_backward(o, d, tn, tf, jit, int(K), dens, col, sem, inst, bmin, inv_step, res, bg,
                      float(t_stop), gc, gs, _EMPTY2, bits, True,
                      buf.grads["density"], buf.grads["color"], buf.grads["semantic"], buf.grads["instance"],
                      buf.touched, buf.touched_list, buf.n_touched,
                      True, tc, ts, float(coef_color), float(coef_semantic), out_c, out_s)
    return out_c, out_s


def render_ray_backward(fields: FieldSet, ray: Ray, K: int, grad_color=None, grad_semantic=None,
                        grad_embedding=None, jitter=None, frozen=(), block=True):
    """Gradients of ``<g_C, C> + g_S * S + <g_I, I>`` for one ray, as dense arrays per grid."""
    buf = GradBuffer(fields)
    jit = None if jitter is None else np.asarray(jitter, dtype=float).reshape(1, K)
    gc = None if grad_color is None else np.asarray(grad_color, dtype=float).reshape(1, 3)
    gs = None if grad_semantic is None else np.asarray([grad_semantic], dtype=float)
    gi = None if grad_embedding is None else np.asarray(grad_embedding, dtype=float).reshape(1, -1)
    train = [n for n in GRID_NAMES if n not in frozen]
    backward_rays(fields, buf, ray.origin, ray.direction, [ray.t_near], [ray.t_far], K, jit,
                  gc, gs, gi, train, block=block)
    return {n: buf.dense(n, fields).copy() for n in GRID_NAMES}


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(fields: FieldSet, path, meta=None):
    """Binary container: magic, uint32 header length, JSON header, float32 LE arrays."""
    header = {
        "bbox": fields.bbox.tolist(),
        "background": fields.background.tolist(),
        "D": fields.D,
        "grids": [{"name": n, "resolution": list(g.resolution), "channels": g.channels,
                   "activation": g.activation} for n, g in fields.grids().items()],
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for g in fields.grids().values():
            fh.write(g.values.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (FieldSet, meta dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    grids = {}
    for spec in header["grids"]:
        shape = (*spec["resolution"], spec["channels"])
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated grid '{spec['name']}' at byte {off}")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        grids[spec["name"]] = VoxelGrid(arr.astype(float), header["bbox"], spec["activation"])
        off += nbytes
    return FieldSet(**grids, background=header["background"]), header.get("meta", {})
