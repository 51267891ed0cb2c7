"""Command line entry point: ``fruitlift <subcommand> ...``.

Every subcommand reads the same JSON run configuration (any subset of its
sections) and uses the parts it needs.  Exit status is 0 on success, 1 on a
usage or configuration error and 2 when the run itself fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import config_hash

log = logging.getLogger("fruitlift")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_run_config(args):
    from .pipeline import RunConfig

    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
    try:
        cfg = RunConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from e
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg = dataclasses.replace(
            cfg, scene=dataclasses.replace(cfg.scene, seed=s), train=dataclasses.replace(cfg.train, seed=s),
            cluster=dataclasses.replace(cfg.cluster, seed=s),
            mask_noise=None if cfg.mask_noise is None else dataclasses.replace(cfg.mask_noise, seed=s))
    return cfg


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _dataset_hash(path):
    doc = json.loads((Path(path) / "scene.json").read_text())
    return doc["config_hash"]


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg):
    from .scene import make_dataset, save_dataset

    ds = make_dataset(cfg.scene, cfg.n_views, cfg.width, cfg.height)
    save_dataset(ds, args.out)
    log.info("wrote %d views of %d fruits to %s", len(ds.bundles), ds.scene.fruit_count, args.out)


def cmd_perturb(args, cfg):
    from .scene import MaskNoiseParams, load_dataset, perturb_dataset, save_dataset

    noise = cfg.mask_noise or MaskNoiseParams()
    over = {k: v for k, v in (("drop_prob", args.drop_prob), ("split_prob", args.split_prob),
                              ("erode_dilate_px", args.erode_dilate_px)) if v is not None}
    try:
        noise = dataclasses.replace(noise, **over)
    except ValueError as e:
        raise UsageError(str(e)) from e
    ds = perturb_dataset(load_dataset(args.dataset), noise)
    save_dataset(ds, args.out)


def cmd_train(args, cfg):
    from .fields import save_checkpoint
    from .pipeline import StageCache, train_cached
    from .scene import load_dataset
    from .training import write_loss_log

    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    cache = StageCache(args.cache) if args.cache else None
    fields = train_cached(ds, cfg.train, cache, rows)
    h = config_hash({"dataset": ds.scene_hash, "train": cfg.train})
    save_checkpoint(fields, out / "fields.ckpt",
                    {"config_hash": h, "dataset_hash": ds.scene_hash, "train": dataclasses.asdict(cfg.train)})
    write_loss_log(rows, out / "loss.csv")


def cmd_export(args, cfg):
    from .export import sample_point_cloud, write_ply
    from .fields import load_checkpoint

    fields, meta = load_checkpoint(args.checkpoint)
    e = cfg.export
    grid_res = args.grid_res or e.grid_res
    sigma = args.sigma_thresh if args.sigma_thresh is not None else e.sigma_thresh
    s = args.s_thresh if args.s_thresh is not None else e.s_thresh
    try:
        cloud = sample_point_cloud(fields, grid_res, sigma, s)
    except ValueError as err:
        raise UsageError(str(err)) from err
    comments = {"dataset_hash": meta.get("dataset_hash", "unknown"),
                "checkpoint_hash": meta.get("config_hash", "unknown")}
    comments["config_hash"] = config_hash({"checkpoint": comments["checkpoint_hash"], "export": cloud.meta})
    write_ply(cloud, args.out, comments)
    log.info("exported %d points", len(cloud))


def cmd_count(args, cfg):
    from .counting import count_fruits, save_count_json
    from .export import read_ply, write_ply

    cloud = read_ply(args.ply)
    t = time.perf_counter()
    res = count_fruits(cloud, cfg.cluster)
    extra = {"dataset_hash": str(cloud.meta.get("dataset_hash", "unknown")),
             "cloud_hash": str(cloud.meta.get("config_hash", "unknown")),
             "config_hash": config_hash({"cloud": cloud.meta.get("config_hash"), "cluster": cfg.cluster}),
             "n_points": len(cloud), "elapsed_s": time.perf_counter() - t}
    save_count_json(res, cfg.cluster, args.out, extra)
    if args.labeled_ply:
        cloud.labels = res.labels
        write_ply(cloud, args.labeled_ply)
    log.info("count %d", res.count)


def cmd_eval(args, cfg):
    import numpy as np

    from .evaluation import evaluate_counts
    from .scene import Scene

    scene_path = Path(args.scene)
    if scene_path.is_dir():
        scene_path = scene_path / "scene.json"
    doc = json.loads(scene_path.read_text())
    count = json.loads(Path(args.count).read_text())
    src = count.get("dataset_hash")
    if src != doc["config_hash"]:
        msg = f"count was produced from dataset {src}, scene is {doc['config_hash']}"
        if not args.force:
            raise RuntimeError(msg + " (use --force to evaluate anyway)")
        log.warning(msg)
    scene = Scene.from_dict(doc["scene"])
    radius = args.radius or cfg.eval_radius or float(np.mean(scene.fruit_radii))
    m = evaluate_counts(np.array(count["centers"]).reshape(-1, 3), scene.fruit_centers, radius)
    out = m.to_dict()
    out.update(radius=radius, dataset_hash=doc["config_hash"], count_hash=count.get("config_hash"))
    _write_json(args.out, out)
    print(json.dumps({"f1": m.f1, "precision": m.precision, "recall": m.recall}))


def _parse_values(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad --values {text!r}") from e


def cmd_sweep(args, cfg):
    from .pipeline import SWEEP_AXES, StageCache, sweep, write_sweep_csv
    from .plotting import plot_sweep

    if args.axis not in SWEEP_AXES:
        raise UsageError(f"--axis must be one of {', '.join(SWEEP_AXES)}")
    values = _parse_values(args.values)
    if not values:
        raise UsageError("--values is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep(cfg, args.axis, values, StageCache(args.cache))
    write_sweep_csv(rows, out / f"sweep_{args.axis}.csv")
    plot_sweep(rows, args.axis, out / f"sweep_{args.axis}.svg")


def cmd_pipeline(args, cfg):
    from .counting import save_count_json
    from .export import write_ply
    from .fields import save_checkpoint
    from .pipeline import StageCache, run_pipeline
    from .plotting import plot_loss_log
    from .scene import save_dataset
    from .training import write_loss_log

    out = Path(args.out or cfg.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    res = run_pipeline(cfg, cache=StageCache(args.cache) if args.cache else None, loss_log=rows)
    ds = res["dataset"]
    h = config_hash(cfg.to_dict())
    _write_json(out / "config.json", cfg.to_dict())
    save_dataset(ds, out / "dataset")
    save_checkpoint(res["fields"], out / "fields.ckpt", {"config_hash": h, "dataset_hash": ds.scene_hash})
    write_loss_log(rows, out / "loss.csv")
    if rows:
        plot_loss_log(rows, out / "loss.svg")
    write_ply(res["cloud"], out / "cloud.ply", {"config_hash": h, "dataset_hash": ds.scene_hash})
    save_count_json(res["result"], cfg.cluster, out / "count.json", {"config_hash": h, "dataset_hash": ds.scene_hash})
    metrics = res["metrics"].to_dict()
    metrics.update(config_hash=h, dataset_hash=ds.scene_hash, timings=res["timings"])
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({"f1": metrics["f1"], "count": metrics["predicted_count"], "gt": metrics["gt_count"]}))


def cmd_report(args, cfg):
    from .pipeline import read_sweep_csv
    from .plotting import plot_loss_log, plot_sweep

    src = Path(args.dir)
    if not src.is_dir():
        raise UsageError(f"{src} is not a directory")
    made = 0
    for csv_path in sorted(src.glob("sweep_*.csv")):
        axis = csv_path.stem[len("sweep_"):]
        plot_sweep(read_sweep_csv(csv_path), axis, csv_path.with_suffix(".svg"))
        made += 1
    loss = src / "loss.csv"
    if loss.exists():
        import csv

        with open(loss, newline="") as fh:
            r = list(csv.DictReader(fh))
        nan = float("nan")
        rows = [(int(x["stage"]), int(x["iteration"]),
                 *(float(x[k]) if x[k] else nan for k in ("loss_photo", "loss_sem", "loss_contr"))) for x in r]
        plot_loss_log(rows, src / "loss.svg")
        made += 1
    if not made:
        raise RuntimeError(f"no sweep_*.csv or loss.csv found in {src}")
    log.info("rendered %d figure(s)", made)


# ---------------------------------------------------------------- parser


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (any subset of sections)")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fruitlift", description="Synthetic orchard fruit counting with contrastive voxel fields.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("perturb", parents=[common], help="degrade the instance masks of a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--drop-prob", type=float)
    s.add_argument("--split-prob", type=float)
    s.add_argument("--erode-dilate-px", type=int)
    s.set_defaults(fn=cmd_perturb)

    s = sub.add_parser("train", parents=[common], help="fit the voxel fields")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="output directory for fields.ckpt and loss.csv")
    s.add_argument("--cache", help="directory for per-stage checkpoints shared between runs")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("export", parents=[common], help="sample a fruit point cloud")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid-res", type=int)
    s.add_argument("--sigma-thresh", type=float)
    s.add_argument("--s-thresh", type=float)
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("count", parents=[common], help="cluster a point cloud into fruits")
    s.add_argument("--ply", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labeled-ply", help="also write the cloud with a per-point label")
    s.set_defaults(fn=cmd_count)

    s = sub.add_parser("eval", parents=[common], help="score a count against the ground truth")
    s.add_argument("--count", required=True)
    s.add_argument("--scene", required=True, help="dataset directory or its scene.json")
    s.add_argument("--out", required=True)
    s.add_argument("--radius", type=float, help="matching radius (default: mean fruit radius)")
    s.add_argument("--force", action="store_true", help="evaluate even when the config hashes disagree")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="F1 over one parameter axis")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma separated")
    s.add_argument("--out", required=True)
    s.add_argument("--cache", help="directory for per-stage checkpoints")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("pipeline", parents=[common], help="every stage from one configuration")
    s.add_argument("--out")
    s.add_argument("--cache", help="directory for per-stage checkpoints")
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("report", parents=[common], help="render SVG figures for sweep and loss CSVs")
    s.add_argument("--dir", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        os.environ["NUMBA_NUM_THREADS"] = str(args.threads)
    try:
        cfg = _load_run_config(args)
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        args.fn(args, cfg)
    except UsageError as e:
        print(f"fruitlift {args.command}: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"fruitlift {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
