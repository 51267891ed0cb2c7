"""Losses, pixel samplers and the three-stage optimisation of the voxel fields.

Stage 1 fits density and color to the photometric loss, stage 2 adds the
semantic logit field, and stage 3 trains the instance field alone on the
prototype contrastive loss with everything else frozen.  Optimisation is plain
gradient descent with a constant step per stage and global gradient-norm
clipping.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import from_dict
from .fields import FieldSet, GradBuffer, backward_rays, fit_rays, ray_box, render_rays, sigmoid

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    D: int = 32
    tau: float = 0.2
    lambda_sem: float = 1.0
    lambda_contr: float = 1.0
    G: int = 8
    L: int = 4
    P: int = 16
    n1: int = 2000
    n2: int = 2000
    n3: int = 4000
    # base step sizes; the applied step is lr * grid_res**3
    lr1: float = 1.0
    lr2: float = 3.0
    lr3: float = 0.02
    rays_per_batch: int = 4096
    grid_res: int = 64
    samples_per_ray: int = 64
    grad_clip: float = 10.0
    # rays stop marching once transmittance falls below this
    t_stop: float = 1e-4
    density_init: float = -4.0
    # fruit is the minority class, so start with sigmoid(-1) ~ 0.27
    semantic_init: float = -1.0
    instance_init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.G < 2 and self.L < 2:
            raise ValueError("need G >= 2 or L >= 2 so that negatives exist")
        if min(self.G, self.L, self.P) < 1:
            raise ValueError("G, L and P must be >= 1")
        if self.grid_res < 2:
            raise ValueError("grid_res must be >= 2")
        if min(self.n1, self.n2, self.n3) < 0:
            raise ValueError("stage iteration counts must be non-negative")

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "TrainConfig")

    def lr_scale(self):
        return float(self.grid_res) ** 3


# ---------------------------------------------------------------- losses


def photometric_loss(pred, target, grad=False):
    """Mean squared L2 color error over the ray set."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(pred) == 0:
        raise ValueError("photometric loss over an empty ray set")
    if pred.shape != target.shape:
        raise ValueError("prediction and target counts differ")
    diff = pred - target
    loss = float(np.sum(diff * diff) / len(pred))
    if grad:
        return loss, 2.0 * diff / len(pred)
    return loss


def semantic_loss(logits, target, grad=False):
    """Mean binary cross entropy of sigmoid(logits) against {0, 1} targets, in logit form."""
    x = np.asarray(logits, dtype=float).ravel()
    p = np.asarray(target, dtype=float).ravel()
    per = np.maximum(x, 0) - x * p + np.log1p(np.exp(-np.abs(x)))
    loss = float(per.mean()) if len(x) else 0.0
    if grad:
        return loss, (sigmoid(x) - p) / max(len(x), 1)
    return loss


def contrastive_loss(embeddings, ids, tau, grad=False):
    """Prototype contrastive loss summed over pixels.

    Each distinct id is one fruit; its prototype is the re-normalised mean of
    its pixel embeddings.  Every pixel is scored against all prototypes in the
    batch with its own fruit's prototype as the positive.
    """
    E = np.asarray(embeddings, dtype=float)
    ids = np.asarray(ids).ravel()
    if len(E) != len(ids):
        raise ValueError("one id per embedding required")
    uniq, inv = np.unique(ids, return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq))
    if np.any(counts == 0) or len(E) == 0:
        raise ValueError("every fruit needs at least one pixel to define its prototype")
    Fm = np.zeros((len(uniq), E.shape[1]))
    np.add.at(Fm, inv, E)
    Fm /= counts[:, None]
    fn = np.linalg.norm(Fm, axis=1, keepdims=True)
    if np.any(fn == 0):
        raise ValueError("prototype with zero mean embedding")
    F = Fm / fn
    Z = E @ F.T / tau
    zmax = Z.max(axis=1, keepdims=True)
    ez = np.exp(Z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    lse = (zmax + np.log(denom)).ravel()
    rows = np.arange(len(E))
    loss = float(np.sum(lse - Z[rows, inv]))
    if not grad:
        return loss
    dZ = ez / denom
    dZ[rows, inv] -= 1.0
    dE = dZ @ F / tau
    dF = dZ.T @ E / tau
    dFm = (dF - F * np.sum(F * dF, axis=1, keepdims=True)) / fn
    dE += dFm[inv] / counts[inv, None]
    return loss, dE


def normalize_rows(x, grad_out=None):
    """Row-wise L2 normalisation; with ``grad_out`` returns the input gradient instead."""
    n = np.linalg.norm(x, axis=1, keepdims=True)
    n = np.maximum(n, 1e-12)
    y = x / n
    if grad_out is None:
        return y
    return (grad_out - y * np.sum(y * grad_out, axis=1, keepdims=True)) / n


def total_loss(loss_photo, loss_sem=0.0, loss_contr=0.0, lambda_sem=1.0, lambda_contr=1.0):
    return loss_photo + lambda_sem * loss_sem + lambda_contr * loss_contr


# ---------------------------------------------------------------- samplers


@dataclass
class InstanceBatch:
    image: int
    rows: np.ndarray
    cols: np.ndarray
    ids: np.ndarray  # source-image instance id of every pixel
    group: np.ndarray  # group index of every pixel
    fruits: list = field(default_factory=list)  # per group: instance ids, anchor first

    @property
    def n_fruits(self):
        return len(np.unique(self.ids))

    def __len__(self):
        return len(self.ids)


class TrainingData:
    """Per-pixel rays and targets for a list of image bundles."""

    def __init__(self, bundles, bbox):
        self.bundles = bundles
        self.n_images = len(bundles)
        h, w = bundles[0].rgb.shape[:2]
        self.height, self.width = h, w
        self.pixels_per_image = h * w
        dirs, tn, tf = [], [], []
        for b in bundles:
            o, d = b.camera.pixel_rays()
            a, z, hit = ray_box(o, d, bbox)
            a[~hit] = 0.0
            z[~hit] = 0.0
            dirs.append(d)
            tn.append(a)
            tf.append(z)
        self.origins = np.array([b.camera.position for b in bundles])
        self.dirs = np.concatenate(dirs)
        self.tnear = np.concatenate(tn)
        self.tfar = np.concatenate(tf)
        self.rgb = np.concatenate([b.rgb.reshape(-1, 3) for b in bundles]).astype(float)
        self.sem = np.concatenate([b.semantic.ravel() for b in bundles]).astype(float)
        self._instances = [None] * self.n_images

    def rays(self, flat_index):
        img = flat_index // self.pixels_per_image
        return self.origins[img], self.dirs[flat_index], self.tnear[flat_index], self.tfar[flat_index]

    def instance_info(self, i):
        """(ids, centroids (n, 2) as row/col, list of flat pixel index arrays) for image ``i``."""
        if self._instances[i] is None:
            self._instances[i] = instance_masks(self.bundles[i].instance)
        return self._instances[i]


def instance_masks(instance):
    flat = instance.ravel()
    order = np.argsort(flat, kind="stable")
    vals, starts = np.unique(flat[order], return_index=True)
    ends = np.append(starts[1:], len(flat))
    ids, cents, pix = [], [], []
    w = instance.shape[1]
    for v, s, e in zip(vals, starts, ends):
        if v <= 0:
            continue
        p = order[s:e]
        ids.append(int(v))
        cents.append([np.mean(p // w), np.mean(p % w)])
        pix.append(p)
    return np.array(ids, dtype=np.int64), np.array(cents, dtype=float).reshape(-1, 2), pix


def sample_uniform_pixels(data: TrainingData, n, seed):
    """Flat (image * H * W + pixel) indices drawn uniformly over every pixel of every image."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.integers(0, data.n_images * data.pixels_per_image, size=n)


def sample_instance_groups(instance, G, L, P, seed, image_index=0, info=None):
    """Anchor fruits plus their L-1 nearest neighbours (mask-centroid distance), P pixels each.

    ``instance`` is an (H, W) instance-id image or an ImageBundle.  ``info`` may
    carry the precomputed output of ``instance_masks``.  Returns None for an
    image without instances.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    instance = np.asarray(getattr(instance, "instance", instance))
    ids, cents, pix = info if info is not None else instance_masks(instance)
    n = len(ids)
    if n == 0:
        return None
    width = instance.shape[1]
    anchors = rng.choice(n, size=G, replace=n < G)
    size = min(L, n)
    flat, pid, grp, fruits = [], [], [], []
    for g, a in enumerate(anchors):
        d = np.linalg.norm(cents - cents[a], axis=1)
        d[a] = -1.0  # anchor first
        members = np.lexsort((ids, d))[:size]
        fruits.append([int(ids[m]) for m in members])
        for m in members:
            p = pix[m]
            flat.append(p[rng.choice(len(p), size=P, replace=len(p) < P)])
            pid.append(np.full(P, ids[m]))
            grp.append(np.full(P, g))
    flat = np.concatenate(flat)
    return InstanceBatch(image_index, flat // width, flat % width, np.concatenate(pid),
                         np.concatenate(grp), fruits)


# ---------------------------------------------------------------- training


STAGE_GRIDS = {1: ("density", "color"), 2: ("density", "color", "semantic"), 3: ("instance",)}


def init_fields(config: TrainConfig, bbox, background):
    return FieldSet.create(config.grid_res, bbox, config.D, background=background, seed=config.seed,
                           density_init=config.density_init, semantic_init=config.semantic_init,
                           instance_std=config.instance_init_std)


def _clip_scale(buf, clip):
    norm = math.sqrt(buf.sq_norm())
    return 1.0 if norm <= clip or norm == 0 else clip / norm


def run_stage(fields: FieldSet, data: TrainingData, config: TrainConfig, stage: int, loss_log=None,
              progress=None):
    """Run one cascade stage in place on ``fields``."""
    n_iter = {1: config.n1, 2: config.n2, 3: config.n3}[stage]
    lr = {1: config.lr1, 2: config.lr2, 3: config.lr3}[stage]
    rng = np.random.default_rng([config.seed, stage])
    buf = GradBuffer(fields)
    K = config.samples_per_ray
    grids = STAGE_GRIDS[stage]
    lrs = {g: lr for g in grids}
    if stage == 3:
        eligible = [i for i in range(data.n_images) if len(data.instance_info(i)[0]) >= 2]
        if not eligible and n_iter:
            log.warning("no image has two or more instances; skipping instance training")
            return
    for it in range(1, n_iter + 1):
        lp = ls = lc = float("nan")
        if stage in (1, 2):
            idx = sample_uniform_pixels(data, config.rays_per_batch, rng)
            o, d, tn, tf = data.rays(idx)
            jit = rng.random((len(idx), K))
            n = len(idx)
            coef_s = config.lambda_sem / n if stage == 2 else 0.0
            color, logit = fit_rays(fields, buf, o, d, tn, tf, K, jit, data.rgb[idx], data.sem[idx],
                                    2.0 / n, coef_s, grids, config.t_stop)
            lp = photometric_loss(color, data.rgb[idx])
            total = lp
            if stage == 2:
                ls = semantic_loss(logit, data.sem[idx])
                total += config.lambda_sem * ls
            if not np.isfinite(total):
                buf.clear()
                raise TrainingError(f"non-finite loss at stage {stage}, iteration {it}")
        else:
            img = eligible[rng.integers(len(eligible))]
            info = data.instance_info(img)
            batch = sample_instance_groups(data.bundles[img].instance, config.G, config.L, config.P,
                                           rng, img, info)
            if batch is None or batch.n_fruits < 2:
                continue
            idx = img * data.pixels_per_image + batch.rows * data.width + batch.cols
            o, d, tn, tf = data.rays(idx)
            jit = rng.random((len(idx), K))
            out = render_rays(fields, o, d, tn, tf, K, jit, want=("instance",), t_stop=config.t_stop)
            raw = out["embedding"]
            emb = normalize_rows(raw)
            lc, ge = contrastive_loss(emb, batch.ids, config.tau, grad=True)
            if not np.isfinite(lc):
                raise TrainingError(f"non-finite loss at stage {stage}, iteration {it}")
            gi = config.lambda_contr * normalize_rows(raw, ge)
            backward_rays(fields, buf, o, d, tn, tf, K, jit, grad_embedding=gi, train=grids,
                          t_stop=config.t_stop)
        buf.step(fields, lrs, config.lr_scale() * _clip_scale(buf, config.grad_clip))
        if loss_log is not None:
            loss_log.append((stage, it, lp, ls, lc))
        if progress is not None:
            progress(stage, it, lp, ls, lc)


def train(dataset, config: TrainConfig, loss_log=None, fields=None, stages=(1, 2, 3), progress=None):
    """Cascaded training on a Dataset (or list of bundles with a scene bbox)."""
    bundles = dataset.bundles
    if not bundles:
        raise ValueError("empty dataset")
    data = TrainingData(bundles, dataset.scene.bbox)
    if fields is None:
        fields = init_fields(config, dataset.scene.bbox, dataset.scene.background_color)
    for stage in stages:
        log.info("stage %d: %d iterations", stage, {1: config.n1, 2: config.n2, 3: config.n3}[stage])
        run_stage(fields, data, config, stage, loss_log, progress)
    return fields


LOSS_LOG_COLUMNS = ("stage", "iteration", "loss_photo", "loss_sem", "loss_contr")


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_LOG_COLUMNS)
        for stage, it, lp, ls, lc in rows:
            w.writerow([stage, it] + ["" if math.isnan(v) else f"{v:.8g}" for v in (lp, ls, lc)])


def config_for_stage(config: TrainConfig, stage: int) -> dict:
    """Config fields that determine the fields produced up to and including ``stage``."""
    d = dataclasses.asdict(config)
    shared = {"seed", "grid_res", "samples_per_ray", "grad_clip", "t_stop", "density_init",
              "semantic_init", "rays_per_batch"}
    keys = shared | {"n1", "lr1"}
    if stage >= 2:
        keys |= {"n2", "lr2", "lambda_sem"}
    if stage >= 3:
        keys |= {"n3", "lr3", "D", "tau", "lambda_contr", "G", "L", "P", "instance_init_std"}
    return {k: d[k] for k in sorted(keys)}
