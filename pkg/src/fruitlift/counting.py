"""Fruit counting: k-means spatial partitioning followed by HDBSCAN per partition."""
from __future__ import annotations

import colorsys
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import from_dict
from .export import FruitPointCloud
from .fields import FieldSet, l2normalize, ray_box, render_rays, sigmoid
from .hdbscan import hdbscan

log = logging.getLogger(__name__)


@dataclass
class ClusterParams:
    S: int = 1
    lambda_c: float = 1.0
    lambda_e: float = 1.0
    min_cluster_size: int = 30
    min_samples: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.lambda_c < 0 or self.lambda_e < 0:
            raise ValueError("metric weights must be non-negative")
        if self.lambda_c == 0 and self.lambda_e == 0:
            raise ValueError("lambda_c and lambda_e cannot both be zero")
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "ClusterParams")


# settings for large real orchards
FUJI_PROFILE = {"cluster": {"S": 40, "lambda_c": 1.0, "lambda_e": 5.0}, "train": {"tau": 0.35}}


@dataclass
class CountResult:
    labels: np.ndarray
    count: int
    centers: np.ndarray  # (count, 3) component-wise medians
    center_embeddings: np.ndarray  # (count, D) unit mean embeddings
    partition: np.ndarray = None
    per_partition_counts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_json(self, params: ClusterParams, extra=None):
        d = {
            "count": int(self.count),
            "per_partition_counts": [int(c) for c in self.per_partition_counts],
            "centers": np.asarray(self.centers, dtype=float).tolist(),
            "params": asdict(params),
            "timings": self.timings,
        }
        d.update(extra or {})
        return d


def kmeans_pp_init(X, S, rng):
    n = len(X)
    centers = np.empty((S, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for s in range(1, S):
        tot = d2.sum()
        if tot > 0:
            i = rng.choice(n, p=d2 / tot)
        else:
            i = rng.integers(n)
        centers[s] = X[i]
        d2 = np.minimum(d2, np.sum((X - centers[s]) ** 2, axis=1))
    return centers


def _assign(X, centers):
    d2 = np.sum(X ** 2, axis=1)[:, None] - 2.0 * X @ centers.T + np.sum(centers ** 2, axis=1)[None, :]
    return np.argmin(d2, axis=1)


def partition_kmeans(positions, S, seed=0, max_iter=100, tol=1e-6):
    """Lloyd's k-means on positions with k-means++ seeding; returns (assignment, centroids).

    Stops after ``max_iter`` iterations or once no centroid moves more than
    ``tol``.  An emptied cluster keeps its previous centroid.
    """
    X = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(X) == 0:
        raise ValueError("cannot partition an empty cloud")
    if S > len(X):
        raise ValueError(f"S={S} exceeds the number of points ({len(X)})")
    if S == 1:
        return np.zeros(len(X), np.int64), X.mean(axis=0, keepdims=True)
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(X, S, rng)
    assign = _assign(X, centers)
    for _ in range(max_iter):
        new = centers.copy()
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, X)
        cnt = np.bincount(assign, minlength=S)
        nz = cnt > 0
        new[nz] = sums[nz] / cnt[nz, None]
        moved = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        assign = _assign(X, centers)
        if moved < tol:
            break
    return assign, centers


def combined_distance(p, q, lambda_c, lambda_e):
    """``lambda_c * cosine distance of embeddings + lambda_e * Euclidean distance of positions``.

    ``p`` and ``q`` are (position, embedding) pairs.
    """
    xp, ep = (np.asarray(v, dtype=float) for v in p)
    xq, eq = (np.asarray(v, dtype=float) for v in q)
    np_, nq = np.linalg.norm(ep), np.linalg.norm(eq)
    if np_ == 0 or nq == 0:
        raise ValueError("zero embedding: cosine distance undefined")
    cos = float(ep @ eq) / (np_ * nq)
    return lambda_c * max(0.0, 1.0 - cos) + lambda_e * float(np.linalg.norm(xp - xq))


def _centers(X, E, labels, k):
    centers = np.zeros((k, 3))
    emb = np.zeros((k, E.shape[1]))
    for c in range(k):
        m = labels == c
        centers[c] = np.median(X[m], axis=0)
        emb[c] = l2normalize(E[m].mean(axis=0))
    return centers, emb


def count_fruits(cloud: FruitPointCloud, params: ClusterParams) -> CountResult:
    n = len(cloud)
    D = cloud.D
    if n == 0:
        return CountResult(np.zeros(0, np.int64), 0, np.zeros((0, 3)), np.zeros((0, D)),
                           np.zeros(0, np.int64), [0] * params.S, {"partition_s": 0.0, "cluster_s": 0.0})
    X = cloud.positions.astype(float)
    E = cloud.embeddings.astype(float)
    t0 = time.perf_counter()
    S = min(params.S, n)
    if S < params.S:
        log.warning("S=%d exceeds point count %d; using S=%d", params.S, n, S)
    part, _ = partition_kmeans(X, S, params.seed)
    sizes = np.bincount(part, minlength=S)
    if S > 1:
        log.info("partition sizes: min %d, max %d", sizes.min(), sizes.max())
    t1 = time.perf_counter()
    labels = np.full(n, -1, np.int64)
    per_part = []
    offset = 0
    for s in range(S):
        idx = np.flatnonzero(part == s)
        lab = hdbscan(X[idx], params.min_cluster_size, params.min_samples, E[idx],
                      params.lambda_c, params.lambda_e)
        k = int(lab.max()) + 1 if len(lab) else 0
        lab = np.where(lab >= 0, lab + offset, -1)
        labels[idx] = lab
        per_part.append(k)
        offset += k
    t2 = time.perf_counter()
    centers, emb = _centers(X, E, labels, offset)
    return CountResult(labels, offset, centers, emb, part, per_part + [0] * (params.S - S),
                       {"partition_s": t1 - t0, "cluster_s": t2 - t1})


def palette(k):
    """Fixed categorical palette: golden-ratio hue steps."""
    out = np.zeros((k, 3), np.uint8)
    for i in range(k):
        h = (i * 0.618033988749895) % 1.0
        out[i] = np.round(np.array(colorsys.hsv_to_rgb(h, 0.75, 0.95)) * 255)
    return out


def render_instance_image(fields: FieldSet, result: CountResult, camera, K=128, semantic_gate=False):
    """Per-pixel cluster assignment by cosine similarity of the rendered embedding.

    Pixels whose accumulated weight exceeds 0.5 (and, with ``semantic_gate``,
    whose fruit probability exceeds 0.5) take the color of the nearest cluster
    embedding; other pixels show the background.  Returns (rgb uint8, labels).
    """
    o, d = camera.pixel_rays()
    tn, tf, hit = ray_box(o, d, fields.bbox)
    tn[~hit] = 0.0
    tf[~hit] = 0.0
    h, w = camera.height, camera.width
    bg = np.round(np.clip(fields.background, 0, 1) * 255).astype(np.uint8)
    img = np.tile(bg, (h * w, 1))
    lab = np.full(h * w, -1, np.int64)
    if result.count == 0:
        return img.reshape(h, w, 3), lab.reshape(h, w)
    out = render_rays(fields, o, d, tn, tf, K, want=("semantic", "instance"))
    fg = out["acc"] > 0.5
    if semantic_gate:
        fg &= sigmoid(out["semantic"]) > 0.5
    emb = l2normalize(out["embedding"][fg])
    C = l2normalize(np.asarray(result.center_embeddings, dtype=float))
    lab[fg] = np.argmax(emb @ C.T, axis=1)
    img[fg] = palette(result.count)[lab[fg]]
    return img.reshape(h, w, 3), lab.reshape(h, w)


def save_count_json(result: CountResult, params: ClusterParams, path, extra=None):
    with open(path, "w") as fh:
        json.dump(result.to_json(params, extra), fh, indent=2)
