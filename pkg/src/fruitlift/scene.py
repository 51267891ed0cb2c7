"""Procedural orchard scenes, posed ground-truth renders and a mask-noise model.

Fruits are spheres, leaves are thin oriented boxes and the trunk is a vertical
cylinder.  Every render is an analytic nearest-hit ray cast, so the images are
exactly reproducible and the masks can serve as test oracles.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import config_hash

MAX_PLACEMENT_ATTEMPTS = 10_000
LIGHT_DIR = np.array([0.35, 0.45, 0.82]) / np.linalg.norm([0.35, 0.45, 0.82])
AMBIENT = 0.3

FRUIT_ALBEDO = np.array([0.85, 0.18, 0.12])
LEAF_ALBEDO = np.array([0.22, 0.55, 0.16])
TRUNK_ALBEDO = np.array([0.42, 0.27, 0.14])

# hit kinds in the per-pixel kind map
BACKGROUND, FRUIT, LEAF, TRUNK = 0, 1, 2, 3


class SceneError(RuntimeError):
    pass


@dataclass
class Trunk:
    base: tuple = (0.0, 0.0, -1.4)
    radius: float = 0.1
    height: float = 0.75

    def __post_init__(self):
        self.base = tuple(float(v) for v in self.base)


@dataclass
class SceneSpec:
    seed: int = 0
    fruit_count: int = 50
    fruit_radius_range: tuple = (0.08, 0.12)
    canopy_center: tuple = (0.0, 0.0, 0.0)
    canopy_radius: float = 1.0
    occluder_count: int = 30
    trunk: Trunk = field(default_factory=Trunk)
    bbox: tuple = ((-1.4, -1.4, -1.4), (1.4, 1.4, 1.4))
    dense: bool = False

    def __post_init__(self):
        if isinstance(self.trunk, dict):
            self.trunk = Trunk(**self.trunk)
        self.fruit_radius_range = tuple(float(v) for v in self.fruit_radius_range)
        self.canopy_center = tuple(float(v) for v in self.canopy_center)
        self.bbox = tuple(tuple(float(v) for v in corner) for corner in self.bbox)
        lo, hi = self.fruit_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"fruit_radius_range must satisfy 0 < min <= max, got {self.fruit_radius_range}")
        if self.fruit_count < 0 or self.occluder_count < 0:
            raise ValueError("fruit_count and occluder_count must be non-negative")
        if self.canopy_radius <= hi:
            raise ValueError("canopy_radius must exceed the largest fruit radius")
        bmin, bmax = np.array(self.bbox)
        if np.any(bmax <= bmin):
            raise ValueError(f"degenerate bbox {self.bbox}")

    @property
    def min_separation(self):
        """Minimum center distance as a fraction of the radius sum."""
        return 0.6 if self.dense else 1.0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown SceneSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Box:
    center: np.ndarray
    rotation: np.ndarray  # rows are the box axes in world coordinates
    half_extents: np.ndarray
    albedo: np.ndarray


@dataclass
class Scene:
    fruit_centers: np.ndarray  # (n, 3)
    fruit_radii: np.ndarray  # (n,)
    fruit_albedo: np.ndarray  # (n, 3)
    occluders: list
    trunk: Trunk
    bbox: np.ndarray  # (2, 3)
    canopy_center: np.ndarray
    canopy_radius: float
    background_color: np.ndarray = field(default_factory=lambda: np.array([0.86, 0.9, 0.97]))

    @property
    def fruit_count(self):
        return len(self.fruit_radii)

    def to_dict(self):
        return {
            "fruits": [
                {"id": i, "center": c.tolist(), "radius": float(r), "albedo": a.tolist()}
                for i, (c, r, a) in enumerate(zip(self.fruit_centers, self.fruit_radii, self.fruit_albedo))
            ],
            "occluders": [
                {"center": b.center.tolist(), "rotation": b.rotation.tolist(),
                 "half_extents": b.half_extents.tolist(), "albedo": b.albedo.tolist()}
                for b in self.occluders
            ],
            "trunk": dataclasses.asdict(self.trunk),
            "bbox": self.bbox.tolist(),
            "canopy_center": self.canopy_center.tolist(),
            "canopy_radius": self.canopy_radius,
            "background_color": self.background_color.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        fruits = d["fruits"]
        return cls(
            fruit_centers=np.array([f["center"] for f in fruits], dtype=float).reshape(-1, 3),
            fruit_radii=np.array([f["radius"] for f in fruits], dtype=float),
            fruit_albedo=np.array([f["albedo"] for f in fruits], dtype=float).reshape(-1, 3),
            occluders=[Box(np.array(o["center"]), np.array(o["rotation"]), np.array(o["half_extents"]),
                           np.array(o["albedo"])) for o in d["occluders"]],
            trunk=Trunk(**d["trunk"]),
            bbox=np.array(d["bbox"], dtype=float),
            canopy_center=np.array(d["canopy_center"], dtype=float),
            canopy_radius=float(d["canopy_radius"]),
            background_color=np.array(d["background_color"], dtype=float),
        )


@dataclass
class Camera:
    position: np.ndarray
    rotation: np.ndarray  # world-to-camera; rows are camera x (right), y (down), z (forward)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def pixel_rays(self):
        """World-space origins and unit directions for every pixel, row-major."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        d_cam = np.stack([(u.ravel() + 0.5 - self.cx) / self.fx,
                          (v.ravel() + 0.5 - self.cy) / self.fy,
                          np.ones(u.size)], axis=1)
        d = d_cam @ self.rotation
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def to_dict(self):
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ImageBundle:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    semantic: np.ndarray  # (H, W) uint8 in {0, 1}
    instance: np.ndarray  # (H, W) int32, 0 = background
    camera: Camera
    # gt_ids[k - 1] is the ground-truth fruit of per-image instance k; diagnostics only
    gt_ids: np.ndarray = None

    @property
    def n_instances(self):
        return int(self.instance.max(initial=0))


@dataclass
class MaskNoiseParams:
    drop_prob: float = 0.0
    erode_dilate_px: int = 0
    split_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_prob", "split_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")

    @property
    def is_identity(self):
        return self.drop_prob == 0 and self.erode_dilate_px == 0 and self.split_prob == 0


# ---------------------------------------------------------------- geometry


def _random_rotation(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _box_sphere_overlap(box, center, radius):
    local = box.rotation @ (center - box.center)
    closest = np.clip(local, -box.half_extents, box.half_extents)
    return np.linalg.norm(local - closest) < radius


def _near_trunk(trunk, center, margin):
    bx, by, bz = trunk.base
    radial = np.hypot(center[0] - bx, center[1] - by)
    return radial < trunk.radius + margin and bz - margin < center[2] < bz + trunk.height + margin


def generate_scene(spec: SceneSpec) -> Scene:
    """Place fruits and leaves by seeded rejection sampling.

    Dense mode lowers the separation bound to 0.6 x the radius sum and grows
    half of the fruits off an existing one, producing touching conglomerates.
    """
    rng = np.random.default_rng(spec.seed)
    cc = np.array(spec.canopy_center)
    bmin, bmax = np.array(spec.bbox)
    lo, hi = spec.fruit_radius_range
    sep = spec.min_separation

    centers, radii = [], []
    attempts = 0
    while len(centers) < spec.fruit_count:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise SceneError(
                f"placed only {len(centers)}/{spec.fruit_count} fruits after {MAX_PLACEMENT_ATTEMPTS} "
                f"attempts; the density constraint (center distance >= {sep} x radius sum inside a canopy "
                f"of radius {spec.canopy_radius}) is too tight")
        r = rng.uniform(lo, hi)
        if spec.dense and centers and rng.random() < 0.5:
            j = rng.integers(len(centers))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            c = centers[j] + rng.uniform(sep, 1.0) * (r + radii[j]) * direction
        else:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            c = cc + direction * (spec.canopy_radius - r) * rng.random() ** (1 / 3)
        if np.linalg.norm(c - cc) > spec.canopy_radius - r:
            continue
        if np.any(c - r < bmin) or np.any(c + r > bmax):
            continue
        if _near_trunk(spec.trunk, c, r):
            continue
        if centers:
            d = np.linalg.norm(np.array(centers) - c, axis=1)
            if np.any(d < sep * (np.array(radii) + r)):
                continue
        centers.append(c)
        radii.append(r)

    centers = np.array(centers, dtype=float).reshape(-1, 3)
    radii = np.array(radii, dtype=float)
    albedo = np.clip(FRUIT_ALBEDO + rng.uniform(-0.08, 0.08, size=(len(radii), 3)), 0, 1)

    occluders = []
    attempts = 0
    while len(occluders) < spec.occluder_count:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise SceneError(f"placed only {len(occluders)}/{spec.occluder_count} leaves without "
                             f"intersecting a fruit after {MAX_PLACEMENT_ATTEMPTS} attempts")
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = cc + direction * spec.canopy_radius * rng.random() ** (1 / 3)
        half = np.array([rng.uniform(0.09, 0.15), rng.uniform(0.05, 0.08), 0.006])
        box = Box(center, _random_rotation(rng), half,
                  np.clip(LEAF_ALBEDO + rng.uniform(-0.06, 0.06, size=3), 0, 1))
        if any(_box_sphere_overlap(box, c, r) for c, r in zip(centers, radii)):
            continue
        occluders.append(box)

    return Scene(centers, radii, albedo, occluders, dataclasses.replace(spec.trunk),
                 np.array(spec.bbox, dtype=float), cc, float(spec.canopy_radius))


def look_at(position, target):
    forward = np.asarray(target, float) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def sample_cameras(scene: Scene, n: int, seed: int, width: int = 128, height: int = 128,
                   distance_factor: float = 3.0) -> list:
    """Cameras on the upper hemisphere around the canopy, all looking at its center."""
    if n < 1:
        raise ValueError("need at least one camera")
    rng = np.random.default_rng(seed)
    dist = distance_factor * scene.canopy_radius
    # the canopy sphere (plus margin) fills the narrower image side
    half_angle = np.arcsin(min(1.15 * scene.canopy_radius / dist, 0.99))
    f = 0.5 * min(width, height) / np.tan(half_angle)
    cams = []
    for _ in range(n):
        z = rng.uniform(0.08, 0.92)
        phi = rng.uniform(0, 2 * np.pi)
        s = np.sqrt(1 - z * z)
        pos = scene.canopy_center + dist * np.array([s * np.cos(phi), s * np.sin(phi), z])
        cams.append(Camera(pos, look_at(pos, scene.canopy_center), f, f, width / 2, height / 2,
                           width, height))
    return cams


def _intersect_spheres(o, d, centers, radii):
    """Nearest positive hit per ray; returns (t, index) with t = inf on miss."""
    n = len(o)
    if len(radii) == 0:
        return np.full(n, np.inf), np.full(n, -1)
    oc = o[:, None, :] - centers[None]
    b = np.einsum("nk,nfk->nf", d, oc)
    c = np.einsum("nfk,nfk->nf", oc, oc) - radii[None] ** 2
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    idx = np.argmin(t, axis=1)
    return t[np.arange(n), idx], idx


def _intersect_boxes(o, d, boxes):
    n = len(o)
    if not boxes:
        return np.full(n, np.inf), np.zeros((n, 3)), np.full(n, -1)
    best_t = np.full(n, np.inf)
    best_nrm = np.zeros((n, 3))
    best_idx = np.full(n, -1)
    for bi, box in enumerate(boxes):
        lo_ = (o - box.center) @ box.rotation.T
        ld = d @ box.rotation.T
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-box.half_extents - lo_) * inv
            t2 = (box.half_extents - lo_) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.nan_to_num(tmin, nan=-np.inf)
        tmax = np.nan_to_num(tmax, nan=np.inf)
        t_enter = tmin.max(axis=1)
        t_exit = tmax.min(axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 1e-9)
        closer = hit & (t_enter < best_t)
        if closer.any():
            axis = tmin.argmax(axis=1)
            best_t[closer] = t_enter[closer]
            best_nrm[closer] = box.rotation[axis[closer]]
            best_idx[closer] = bi
    return best_t, best_nrm, best_idx


def _intersect_trunk(o, d, trunk):
    base = np.asarray(trunk.base)
    p = o - base
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (p[:, 0] * d[:, 0] + p[:, 1] * d[:, 1])
    c = p[:, 0] ** 2 + p[:, 1] ** 2 - trunk.radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    z = p[:, 2] + t_side * d[:, 2]
    side = (disc >= 0) & (a > 1e-12) & (t_side > 1e-9) & (z >= 0) & (z <= trunk.height)
    t = np.where(side, t_side, np.inf)
    nrm = np.zeros_like(d)
    hit_pt = p + t_side[:, None] * d
    nrm[:, :2] = hit_pt[:, :2] / trunk.radius
    # top cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (trunk.height - p[:, 2]) / d[:, 2]
    cap_pt = p + t_cap[:, None] * d
    cap = (t_cap > 1e-9) & (cap_pt[:, 0] ** 2 + cap_pt[:, 1] ** 2 <= trunk.radius ** 2) & (t_cap < t)
    t = np.where(cap, t_cap, t)
    nrm[cap] = [0.0, 0.0, 1.0]
    return t, nrm


def reindex_scanline(labels):
    """Map arbitrary non-negative labels to 1..n by row-major first appearance (0 stays 0)."""
    flat = labels.ravel()
    vals, first = np.unique(flat, return_index=True)
    keep = vals > 0
    vals, first = vals[keep], first[keep]
    order = vals[np.argsort(first)]
    lut = np.zeros(int(flat.max(initial=0)) + 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1)
    return lut[labels], order


def trace(scene: Scene, o, d):
    """Nearest-hit cast of arbitrary rays: (kind, fruit_index, shaded rgb)."""
    t_f, idx_f = _intersect_spheres(o, d, scene.fruit_centers, scene.fruit_radii)
    t_l, nrm_l, idx_l = _intersect_boxes(o, d, scene.occluders)
    t_t, nrm_t = _intersect_trunk(o, d, scene.trunk)
    t_all = np.stack([t_f, t_l, t_t], axis=1)
    which = np.argmin(t_all, axis=1)
    t_min = t_all[np.arange(len(o)), which]
    kind = np.where(np.isinf(t_min), BACKGROUND, which + 1)

    rgb = np.broadcast_to(scene.background_color, o.shape).copy()
    m = kind == FRUIT
    if m.any():
        hit = o[m] + t_min[m, None] * d[m]
        nrm = (hit - scene.fruit_centers[idx_f[m]]) / scene.fruit_radii[idx_f[m], None]
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(nrm @ LIGHT_DIR, 0)
        rgb[m] = scene.fruit_albedo[idx_f[m]] * shade[:, None]
    m = kind == LEAF
    if m.any():
        # thin leaves are lit from either side
        shade = AMBIENT + (1 - AMBIENT) * np.abs(nrm_l[m] @ LIGHT_DIR)
        albedo = np.array([b.albedo for b in scene.occluders])
        rgb[m] = albedo[idx_l[m]] * shade[:, None]
    m = kind == TRUNK
    if m.any():
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(nrm_t[m] @ LIGHT_DIR, 0)
        rgb[m] = TRUNK_ALBEDO * shade[:, None]
    return kind, np.where(kind == FRUIT, idx_f, -1), rgb


def render_ground_truth(scene: Scene, camera: Camera) -> ImageBundle:
    o, d = camera.pixel_rays()
    kind, fruit, rgb = trace(scene, o, d)
    h, w = camera.height, camera.width
    gt_plus1 = (fruit + 1).reshape(h, w)
    instance, order = reindex_scanline(gt_plus1)
    return ImageBundle(
        rgb=rgb.reshape(h, w, 3),
        semantic=(instance > 0).astype(np.uint8),
        instance=instance.astype(np.int32),
        camera=camera,
        gt_ids=(order - 1).astype(np.int64),
    )


# ---------------------------------------------------------------- mask noise


def shuffle_instance_ids(bundle: ImageBundle, seed: int) -> ImageBundle:
    n = bundle.n_instances
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n) + 1  # old id k -> perm[k - 1]
    lut = np.concatenate([[0], perm]).astype(np.int32)
    gt_ids = None
    if bundle.gt_ids is not None:
        gt_ids = np.empty_like(bundle.gt_ids)
        gt_ids[perm - 1] = bundle.gt_ids
    return dataclasses.replace(bundle, instance=lut[bundle.instance], gt_ids=gt_ids)


def _split_mask(mask, rng):
    """Cut a mask along a random line through its centroid with a 1 px stripe.

    Returns (stripe, side) boolean arrays or None when either half would be empty.
    """
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    theta = rng.uniform(0, np.pi)
    s = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
    stripe_px = np.abs(s) < 0.5
    side_px = s >= 0.5
    other_px = s <= -0.5
    if not side_px.any() or not other_px.any():
        return None
    stripe = np.zeros_like(mask)
    side = np.zeros_like(mask)
    stripe[ys[stripe_px], xs[stripe_px]] = True
    side[ys[side_px], xs[side_px]] = True
    return stripe, side


def perturb_masks(bundle: ImageBundle, params: MaskNoiseParams) -> ImageBundle:
    """Emulate foundation-model errors: dropped, eroded/dilated and split instances.

    Instance IDs keep their relative order; dropped IDs are compacted away and
    split halves get fresh IDs after the existing ones.
    """
    if params.is_identity:
        return dataclasses.replace(bundle)
    rng = np.random.default_rng(params.seed)
    inst = bundle.instance.copy()
    n = bundle.n_instances
    gt = list(bundle.gt_ids) if bundle.gt_ids is not None else [None] * n
    k = abs(params.erode_dilate_px)
    new_gt = {}
    next_id = n + 1
    for iid in range(1, n + 1):
        mask = inst == iid
        if not mask.any():
            continue
        if rng.random() < params.drop_prob:
            inst[mask] = 0
            continue
        if params.erode_dilate_px < 0:
            eroded = ndimage.binary_erosion(mask, iterations=k)
            inst[mask & ~eroded] = 0
            mask = eroded
        elif params.erode_dilate_px > 0:
            grown = ndimage.binary_dilation(mask, iterations=k) & (inst == 0)
            inst[grown] = iid
            mask = mask | grown
        new_gt[iid] = gt[iid - 1]
        if mask.any() and rng.random() < params.split_prob:
            cut = _split_mask(mask, rng)
            if cut is not None:
                stripe, side = cut
                inst[stripe] = 0
                inst[side] = next_id
                new_gt[next_id] = gt[iid - 1]
                next_id += 1

    present = np.unique(inst)
    present = present[present > 0]
    lut = np.zeros(next_id, dtype=np.int32)
    lut[present] = np.arange(1, len(present) + 1)
    inst = lut[inst]
    gt_ids = None
    if bundle.gt_ids is not None:
        gt_ids = np.array([new_gt[p] for p in present], dtype=np.int64)
    return dataclasses.replace(bundle, instance=inst, semantic=(inst > 0).astype(np.uint8), gt_ids=gt_ids)


def mask_iou(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    spec: SceneSpec
    scene: Scene
    bundles: list
    scene_hash: str
    noise: MaskNoiseParams = None

    @property
    def cameras(self):
        return [b.camera for b in self.bundles]


def make_dataset(spec: SceneSpec, n_views: int = 40, width: int = 128, height: int = 128,
                 camera_seed: int = None, shuffle_seed: int = None) -> Dataset:
    """Generate, render and per-view shuffle a full synthetic dataset."""
    scene = generate_scene(spec)
    seed = spec.seed if camera_seed is None else camera_seed
    cams = sample_cameras(scene, n_views, seed + 1, width, height)
    ss = np.random.SeedSequence(spec.seed if shuffle_seed is None else shuffle_seed)
    view_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_views)]
    bundles = [shuffle_instance_ids(render_ground_truth(scene, c), s) for c, s in zip(cams, view_seeds)]
    for b in bundles:
        # 8-bit like the files on disk, so saved and in-memory datasets train identically
        b.rgb = np.round(np.clip(b.rgb, 0, 1) * 255) / 255.0
    h = config_hash({"spec": spec.to_dict(), "n_views": n_views, "width": width, "height": height,
                     "camera_seed": seed, "shuffle_seed": shuffle_seed})
    return Dataset(spec, scene, bundles, h)


def perturb_dataset(ds: Dataset, params: MaskNoiseParams) -> Dataset:
    ss = np.random.SeedSequence(params.seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(len(ds.bundles))]
    bundles = [perturb_masks(b, dataclasses.replace(params, seed=s)) for b, s in zip(ds.bundles, seeds)]
    h = config_hash({"base": ds.scene_hash, "noise": dataclasses.asdict(params)})
    return dataclasses.replace(ds, bundles=bundles, scene_hash=h, noise=params)


def visible_fruits(ds: Dataset):
    """Ground-truth fruit ids seen in at least one view (via the diagnostic sidecar)."""
    seen = set()
    for b in ds.bundles:
        if b.gt_ids is not None:
            seen.update(int(g) for g in b.gt_ids)
    return seen


def save_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    for sub in ("rgb", "sem", "inst"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scene_doc = {"config_hash": ds.scene_hash, "spec": ds.spec.to_dict(), "scene": ds.scene.to_dict()}
    if ds.noise is not None:
        scene_doc["mask_noise"] = dataclasses.asdict(ds.noise)
    (out / "scene.json").write_text(json.dumps(scene_doc, indent=1))
    (out / "cameras.json").write_text(json.dumps(
        {"config_hash": ds.scene_hash, "cameras": [b.camera.to_dict() for b in ds.bundles]}, indent=1))
    sidecar = [None if b.gt_ids is None else b.gt_ids.tolist() for b in ds.bundles]
    (out / "sidecar.json").write_text(json.dumps({"config_hash": ds.scene_hash, "gt_ids": sidecar}))
    for i, b in enumerate(ds.bundles):
        Image.fromarray(np.round(np.clip(b.rgb, 0, 1) * 255).astype(np.uint8)).save(out / f"rgb/{i:03d}.png")
        Image.fromarray((b.semantic * 255).astype(np.uint8)).save(out / f"sem/{i:03d}.png")
        Image.fromarray(b.instance.astype(np.uint16)).save(out / f"inst/{i:03d}.png")


def load_dataset(path) -> Dataset:
    path = Path(path)
    scene_doc = json.loads((path / "scene.json").read_text())
    cams = [Camera.from_dict(c) for c in json.loads((path / "cameras.json").read_text())["cameras"]]
    sidecar_path = path / "sidecar.json"
    sidecar = json.loads(sidecar_path.read_text())["gt_ids"] if sidecar_path.exists() else [None] * len(cams)
    bundles = []
    for i, cam in enumerate(cams):
        rgb = np.asarray(Image.open(path / f"rgb/{i:03d}.png"), dtype=float) / 255.0
        sem = (np.asarray(Image.open(path / f"sem/{i:03d}.png")) > 127).astype(np.uint8)
        inst = np.asarray(Image.open(path / f"inst/{i:03d}.png")).astype(np.int32)
        gt = None if sidecar[i] is None else np.array(sidecar[i], dtype=np.int64)
        bundles.append(ImageBundle(rgb, sem, inst, cam, gt))
    noise = MaskNoiseParams(**scene_doc["mask_noise"]) if "mask_noise" in scene_doc else None
    return Dataset(SceneSpec.from_dict(scene_doc["spec"]), Scene.from_dict(scene_doc["scene"]), bundles,
                   scene_doc["config_hash"], noise)
