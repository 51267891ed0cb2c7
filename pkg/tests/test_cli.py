import json
import shutil
import subprocess
from pathlib import Path

import pytest

from fruitlift.cli import main
from fruitlift.export import FruitPointCloud, read_ply, write_ply

TINY = {
    "scene": {"seed": 5, "fruit_count": 3, "occluder_count": 1},
    "n_views": 4, "width": 24, "height": 24,
    "train": {"n1": 5, "n2": 3, "n3": 3, "grid_res": 12, "samples_per_ray": 16, "rays_per_batch": 256,
              "D": 4, "G": 2, "L": 2, "P": 4},
    "export": {"grid_res": 16, "sigma_thresh": 0.0, "s_thresh": 0.0},
    "cluster": {"min_cluster_size": 5, "min_samples": 3},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def chain(work):
    """synth -> train -> export -> count, shared by the tests below."""
    cfg = work / "tiny.json"
    assert run("synth", "--config", cfg, "--out", work / "ds") == 0
    assert run("train", "--config", cfg, "--dataset", work / "ds", "--out", work / "tr") == 0
    assert run("export", "--config", cfg, "--checkpoint", work / "tr/fields.ckpt", "--out", work / "c.ply") == 0
    assert run("count", "--config", cfg, "--ply", work / "c.ply", "--out", work / "count.json",
               "--labeled-ply", work / "lab.ply") == 0
    return work


def test_synth_is_deterministic(work):
    cfg = work / "tiny.json"
    assert run("synth", "--config", cfg, "--out", work / "a") == 0
    assert run("synth", "--config", cfg, "--out", work / "b") == 0
    assert tree_bytes(work / "a") == tree_bytes(work / "b")


def test_chain_artifacts_carry_hashes(chain):
    ds_hash = json.loads((chain / "ds/scene.json").read_text())["config_hash"]
    assert (chain / "tr/loss.csv").read_text().startswith("stage,iteration")
    cloud = read_ply(chain / "c.ply")
    assert cloud.meta["dataset_hash"] == ds_hash and "config_hash" in cloud.meta
    count = json.loads((chain / "count.json").read_text())
    assert count["dataset_hash"] == ds_hash and "count" in count and "config_hash" in count
    assert read_ply(chain / "lab.ply").labels is not None


def test_eval(chain, capsys):
    assert run("eval", "--count", chain / "count.json", "--scene", chain / "ds", "--out", chain / "m.json") == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    m = json.loads((chain / "m.json").read_text())
    assert "f1" in printed and m["f1"] == printed["f1"] and m["radius"] > 0


def test_eval_refuses_foreign_scene(chain, work):
    other = work / "other"
    run("synth", "--config", work / "tiny.json", "--seed", 99, "--out", other)
    assert run("eval", "--count", chain / "count.json", "--scene", other, "--out", work / "x.json") == 2
    assert run("eval", "--count", chain / "count.json", "--scene", other, "--out", work / "x.json", "--force") == 0


def test_perturb(chain):
    assert run("perturb", "--dataset", chain / "ds", "--out", chain / "noisy", "--drop-prob", 1.0) == 0
    doc = json.loads((chain / "noisy/scene.json").read_text())
    assert doc["mask_noise"]["drop_prob"] == 1.0
    assert run("perturb", "--dataset", chain / "ds", "--out", chain / "bad", "--drop-prob", 2.0) == 1


def test_count_empty_ply(work):
    write_ply(FruitPointCloud.empty(4), work / "empty.ply")
    assert run("count", "--ply", work / "empty.ply", "--out", work / "empty.json") == 0
    assert json.loads((work / "empty.json").read_text())["count"] == 0


def test_sweep_and_report(chain, work):
    out = work / "sw"
    assert run("sweep", "--config", work / "tiny.json", "--axis", "lambda_e", "--values", "0,1",
               "--out", out, "--cache", work / "cache") == 0
    lines = (out / "sweep_lambda_e.csv").read_text().splitlines()
    assert lines[0] == "axis_value,precision,recall,f1,count,runtime_s" and len(lines) == 3
    svg = out / "sweep_lambda_e.svg"
    assert svg.read_text().lstrip().startswith("<?xml")
    svg.unlink()
    shutil.copy(chain / "tr/loss.csv", out / "loss.csv")
    assert run("report", "--dir", out) == 0
    assert svg.exists() and (out / "loss.svg").exists()


def test_sweep_bad_axis(work):
    assert run("sweep", "--axis", "nope", "--values", "1", "--out", work / "sw2") == 1
    assert run("sweep", "--axis", "D", "--values", "a,b", "--out", work / "sw2") == 1


def test_pipeline(work, capsys):
    out = work / "pipe"
    assert run("pipeline", "--config", work / "tiny.json", "--out", out) == 0
    for name in ("config.json", "fields.ckpt", "loss.csv", "loss.svg", "cloud.ply", "count.json", "metrics.json"):
        assert (out / name).exists(), name
    m = json.loads((out / "metrics.json").read_text())
    assert "f1" in m and m["dataset_hash"] == json.loads((out / "dataset/scene.json").read_text())["config_hash"]


def test_print_config(work, capsys):
    assert run("train", "--config", work / "tiny.json", "--seed", 3, "--dataset", "x", "--out", "y",
               "--print-config") == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["scene"]["seed"] == 3 and cfg["train"]["seed"] == 3 and cfg["train"]["n1"] == 5


def test_usage_errors(work, capsys):
    with pytest.raises(SystemExit) as e:
        run("synth", "--out", work / "z", "--bogus")
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        run()
    assert e.value.code == 1
    (work / "badcfg.json").write_text(json.dumps({"train": {"tau": -1}}))
    assert run("synth", "--config", work / "badcfg.json", "--out", work / "z") == 1
    (work / "typo.json").write_text(json.dumps({"trian": {}}))
    assert run("synth", "--config", work / "typo.json", "--out", work / "z") == 1
    assert run("synth", "--config", work / "missing.json", "--out", work / "z") == 1


def test_runtime_failure(work, capsys):
    assert run("train", "--dataset", work / "does-not-exist", "--out", work / "t2") == 2
    assert "error" not in capsys.readouterr().out


def test_console_script():
    exe = shutil.which("fruitlift")
    assert exe, "console script not installed"
    out = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "pipeline" in out.stdout
