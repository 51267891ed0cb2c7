"""End-to-end runs, a stage cache shared between runs, and parameter sweeps."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_hash, from_dict
from .counting import ClusterParams, count_fruits
from .evaluation import evaluate_counts
from .export import sample_point_cloud
from .fields import load_checkpoint, save_checkpoint
from .scene import MaskNoiseParams, SceneSpec, make_dataset, perturb_dataset
from .training import TrainConfig, TrainingData, config_for_stage, init_fields, run_stage

log = logging.getLogger(__name__)

SWEEP_AXES = ("D", "tau", "lambda_e", "lambda_c", "mask_noise")
SWEEP_COLUMNS = ("axis_value", "precision", "recall", "f1", "count", "runtime_s")


@dataclass
class ExportConfig:
    grid_res: int = 128
    sigma_thresh: float = None  # None: alpha over one lattice cell reaches 0.5
    s_thresh: float = 0.5

    @classmethod
    def from_dict(cls, d):
        return from_dict(cls, d, "ExportConfig")


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_views: int = 40
    width: int = 128
    height: int = 128
    mask_noise: MaskNoiseParams = None
    train: TrainConfig = field(default_factory=TrainConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    eval_radius: float = None  # None: mean ground-truth fruit radius
    out_dir: str = None

    def __post_init__(self):
        if self.eval_radius is not None and not self.eval_radius > 0:
            raise ValueError("eval_radius must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        sub = {"scene": SceneSpec, "train": TrainConfig, "export": ExportConfig, "cluster": ClusterParams,
               "mask_noise": MaskNoiseParams}
        for k, cls_ in sub.items():
            if d.get(k) is not None:
                d[k] = cls_.from_dict(d[k]) if hasattr(cls_, "from_dict") else from_dict(cls_, d[k])
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


def build_dataset(cfg: RunConfig):
    ds = make_dataset(cfg.scene, cfg.n_views, cfg.width, cfg.height)
    if cfg.mask_noise is not None and not cfg.mask_noise.is_identity:
        ds = perturb_dataset(ds, cfg.mask_noise)
    return ds


class StageCache:
    """Fields after each training stage, keyed by dataset and the config that produced them.

    Kept in memory and, with ``directory``, also as checkpoint files, so
    sweeps that only change stage-3 settings train stages 1 and 2 once.
    """

    def __init__(self, directory=None):
        self.mem = {}
        self.dir = Path(directory) if directory else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(dataset_hash, config, stage):
        return config_hash({"dataset": dataset_hash, "stage": stage, "config": config_for_stage(config, stage)})

    def get(self, key):
        if key in self.mem:
            return self.mem[key].copy()
        if self.dir and (self.dir / f"{key}.ckpt").exists():
            fields, _ = load_checkpoint(self.dir / f"{key}.ckpt")
            self.mem[key] = fields
            return fields.copy()
        return None

    def put(self, key, fields):
        self.mem[key] = fields.copy()
        if self.dir:
            save_checkpoint(fields, self.dir / f"{key}.ckpt", {"cache_key": key})


def train_cached(dataset, config: TrainConfig, cache: StageCache = None, loss_log=None):
    """Cascaded training reusing any cached stage prefix."""
    data = None
    fields = None
    start = 1
    if cache is not None:
        for stage in (3, 2, 1):
            got = cache.get(StageCache.key(dataset.scene_hash, config, stage))
            if got is not None:
                fields, start = got, stage + 1
                break
    if fields is None:
        fields = init_fields(config, dataset.scene.bbox, dataset.scene.background_color)
    elif start <= 3:
        # the instance grid is untouched before stage 3, so it comes from this config's initialisation
        fresh = init_fields(config, dataset.scene.bbox, dataset.scene.background_color)
        fresh.density, fresh.color, fresh.semantic = fields.density, fields.color, fields.semantic
        fields = fresh
    for stage in range(start, 4):
        if data is None:
            data = TrainingData(dataset.bundles, dataset.scene.bbox)
        t = time.perf_counter()
        run_stage(fields, data, config, stage, loss_log)
        log.info("stage %d done in %.1f s", stage, time.perf_counter() - t)
        if cache is not None:
            cache.put(StageCache.key(dataset.scene_hash, config, stage), fields)
    return fields


def eval_radius(cfg: RunConfig, scene):
    return float(np.mean(scene.fruit_radii)) if cfg.eval_radius is None else cfg.eval_radius


def run_pipeline(cfg: RunConfig, dataset=None, cache: StageCache = None, loss_log=None):
    """Train, export, count and evaluate; returns a dict of every intermediate."""
    t0 = time.perf_counter()
    ds = build_dataset(cfg) if dataset is None else dataset
    fields = train_cached(ds, cfg.train, cache, loss_log)
    t1 = time.perf_counter()
    cloud = sample_point_cloud(fields, cfg.export.grid_res, cfg.export.sigma_thresh, cfg.export.s_thresh)
    t2 = time.perf_counter()
    result = count_fruits(cloud, cfg.cluster)
    t3 = time.perf_counter()
    metrics = evaluate_counts(result.centers, ds.scene.fruit_centers, eval_radius(cfg, ds.scene))
    timings = {"train_s": t1 - t0, "export_s": t2 - t1, "count_s": t3 - t2, "total_s": t3 - t0}
    return {"dataset": ds, "fields": fields, "cloud": cloud, "result": result, "metrics": metrics,
            "timings": timings}


def apply_axis(cfg: RunConfig, axis, value) -> RunConfig:
    if axis == "D":
        return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, D=int(value)))
    if axis == "tau":
        return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, tau=float(value)))
    if axis in ("lambda_e", "lambda_c"):
        return dataclasses.replace(cfg, cluster=dataclasses.replace(cfg.cluster, **{axis: float(value)}))
    if axis == "mask_noise":
        base = cfg.mask_noise or MaskNoiseParams()
        noise = dataclasses.replace(base, drop_prob=float(value), split_prob=float(value))
        return dataclasses.replace(cfg, mask_noise=noise)
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


class SweepError(RuntimeError):
    pass


def sweep(cfg: RunConfig, axis, values, cache: StageCache = None, dataset=None):
    """One pipeline run per axis value, everything else fixed; returns CSV rows as dicts.

    ``dataset`` is the clean dataset for ``cfg.scene``; it is perturbed per
    value on the mask-noise axis.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    cache = cache if cache is not None else StageCache()
    clean = dataset if dataset is not None else make_dataset(cfg.scene, cfg.n_views, cfg.width, cfg.height)
    rows = []
    for v in values:
        run = apply_axis(cfg, axis, v)
        ds = clean
        if run.mask_noise is not None and not run.mask_noise.is_identity:
            ds = perturb_dataset(clean, run.mask_noise)
        t = time.perf_counter()
        try:
            out = run_pipeline(run, ds, cache)
        except Exception as e:
            raise SweepError(f"sweep {axis}={v} failed: {e}") from e
        m = out["metrics"]
        rows.append({"axis_value": v, "precision": m.precision, "recall": m.recall, "f1": m.f1,
                     "count": m.predicted_count, "runtime_s": time.perf_counter() - t})
        log.info("%s=%s: f1 %.3f (count %d)", axis, v, m.f1, m.predicted_count)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in SWEEP_COLUMNS})


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(SWEEP_COLUMNS):
        raise ValueError(f"{path}: expected columns {SWEEP_COLUMNS}")
    return [{k: float(v) for k, v in r.items()} for r in rows]
