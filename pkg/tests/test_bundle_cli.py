import json
import re
import shutil

import numpy as np
import pytest

from octhybrid import commands
from octhybrid.bundle import Bundle, read_records
from octhybrid.cli import main
from octhybrid.config import RunConfig
from octhybrid.errors import ConfigError, IntegrityError

SMALL = {
    "cohort": {"n_normal_subjects": 8, "n_pg_subjects": 10, "scans_per_eye": [1, 2]},
    "train": {"epochs": 3, "batch_size": 16},
}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def bundle(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("run") / "bundle"
    assert main(["gen", "--config", str(small_config), "--seed", "5", "--out", str(out)]) == 0
    assert main(["maps", str(out), "--config", str(small_config), "--seed", "5"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, small_config, bundle):
    out = tmp_path_factory.mktemp("run") / "results"
    for arm in ("logit-a", "hybrid-1ch"):
        argv = ["train", str(bundle), arm, "--config", str(small_config), "--seed", "5", "--out", str(out)]
        assert main(argv) == 0
    assert main(["eval", str(bundle), "--config", str(small_config), "--seed", "5", "--out", str(out)]) == 0
    return out


def _args(cfg, *rest):
    return [*rest, "--config", str(cfg), "--seed", "5"]


# ---------------------------------------------------------------- gen


def test_gen_refuses_nonempty_without_force(tmp_path, small_config, capsys):
    out = tmp_path / "b"
    out.mkdir()
    (out / "keep.txt").write_text("mine")
    assert main(_args(small_config, "gen", "--out", str(out))) == 2
    assert "--force" in capsys.readouterr().err
    assert [p.name for p in out.iterdir()] == ["keep.txt"]
    assert main(_args(small_config, "gen", "--out", str(out), "--force")) == 0
    assert (out / "manifest.json").is_file() and not (out / "keep.txt").exists()


def test_bundle_manifest_and_hashes(bundle):
    b = Bundle(bundle)
    m = b.manifest
    assert m["format_version"].startswith("1.")
    assert m["seed"] == 5
    assert b.verify() == len(m["arrays"])
    scan = m["scans"][0]
    rel = scan["files"]["nfl_band_sum"]
    assert m["arrays"][rel]["dims"] == [13, 256]
    truth = m["ground_truth"]
    assert set(truth) >= {"eyes", "scans"}


def test_grids_are_32_by_32(bundle):
    m = Bundle(bundle).manifest
    grids = {k: v for k, v in m["arrays"].items() if k.startswith("grids/")}
    assert grids and all(v["dims"] == [32, 32] for v in grids.values())
    norms = {k: v for k, v in m["arrays"].items() if k.startswith("norms/")}
    assert len(norms) == 6


def test_normal_reflectance_mean(bundle):
    rows, cols = read_records(bundle / "records.csv")
    assert {"nflr_avg", "nflr_flv"} <= set(cols)
    normal = [r["nflr_avg"] for r in rows if r["group"] == "normal"]
    assert abs(np.mean(normal) + 8.11) <= 0.5
    assert all(r["nflr_flv"] <= 0 for r in rows)


def test_corrupted_array_detected(bundle, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(bundle, copy)
    b = Bundle(copy)
    rel = next(iter(b.manifest["arrays"]))
    data = bytearray((copy / rel).read_bytes())
    data[0] ^= 0xFF
    (copy / rel).write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        Bundle(copy).read_array(rel)


def test_maps_is_repeatable(bundle, small_config, tmp_path):
    copy = tmp_path / "again"
    shutil.copytree(bundle, copy)
    assert main(_args(small_config, "maps", str(copy), "--threads", "2")) == 0
    a, b = Bundle(bundle).manifest["arrays"], Bundle(copy).manifest["arrays"]
    assert {k: v["sha256"] for k, v in a.items()} == {k: v["sha256"] for k, v in b.items()}
    assert (bundle / "records.csv").read_bytes() == (copy / "records.csv").read_bytes()


# ---------------------------------------------------------------- train


def test_train_without_grids_is_refused(tmp_path, small_config, capsys):
    raw = tmp_path / "raw"
    assert main(_args(small_config, "gen", "--out", str(raw))) == 0
    out = tmp_path / "m"
    assert main(_args(small_config, "train", str(raw), "hybrid-2ch", "--out", str(out))) == 2
    err = capsys.readouterr().err
    assert "maps" in err and "first" in err
    assert not out.exists()


def test_training_reads_only_training_fold(bundle, small_config, tmp_path):
    cfg = RunConfig.load(small_config, seed=5)
    accessed = []
    ctx = commands.Context(cfg=cfg, out=tmp_path / "audit")
    commands.cmd_train(ctx, bundle, "hybrid-2ch", audit=accessed)
    test_scans, _ = commands._fold(Bundle(bundle), cfg, "test")
    train_scans, _ = commands._fold(Bundle(bundle), cfg, "train")
    assert accessed
    test_ids = {s["scan_id"] for s in test_scans}
    touched = {p.split("/")[1] for p in accessed}
    assert not touched & test_ids
    assert touched == {s["scan_id"] for s in train_scans}


def test_train_refuses_existing_model(run_dir, bundle, small_config):
    argv = _args(small_config, "train", str(bundle), "logit-a", "--out", str(run_dir))
    before = (run_dir / "models" / "logit-a" / "model.json").read_bytes()
    assert main(argv) == 2
    assert (run_dir / "models" / "logit-a" / "model.json").read_bytes() == before


def test_channel_conflict_is_config_error(bundle, tmp_path):
    cfg = RunConfig.from_dict({**SMALL, "model": {"channels": 1}}, seed=5)
    with pytest.raises(ConfigError, match="conflicts"):
        commands.cmd_train(commands.Context(cfg=cfg, out=tmp_path / "x"), bundle, "hybrid-2ch")


def test_unknown_config_key(tmp_path):
    with pytest.raises(ConfigError, match="trian"):
        RunConfig.from_dict({"trian": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"epoch": 3}})


def test_config_echo_reproduces(run_dir):
    doc = json.loads((run_dir / "config.json").read_text())
    assert RunConfig.from_dict(doc).to_json() == doc


# ---------------------------------------------------------------- eval and report


def test_eval_outputs(run_dir):
    rows = (run_dir / "metrics.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["model", "n", "auc"]
    assert [r.split(",")[0] for r in rows[1:]] == ["logit-a", "hybrid-1ch"]
    comps = json.loads((run_dir / "comparisons.json").read_text())
    assert comps["split_seed"] == 5 and len(comps["pairs"]) == 1
    for name in ("logit-a", "hybrid-1ch"):
        lines = (run_dir / f"roc_{name}.csv").read_text().splitlines()
        assert lines[0] == "threshold,fpr,tpr,split_seed,unit"


def test_roc_svg_curves_span_the_square(run_dir):
    svg = (run_dir / "roc.svg").read_text()
    curves = re.findall(r'<polyline class="roc" data-model="([^"]+)"[^>]*points="([^"]+)"', svg)
    assert [c[0] for c in curves] == ["logit-a", "hybrid-1ch"]
    for _, pts in curves:
        xy = [tuple(map(float, p.split(","))) for p in pts.split()]
        assert xy[0] == (50.0, 370.0)
        assert xy[-1] == (370.0, 50.0)


def test_eval_refuses_split_seed_mismatch(run_dir, bundle, small_config, capsys):
    argv = ["eval", str(bundle), "--config", str(small_config), "--seed", "6", "--out", str(run_dir)]
    assert main(argv) == 2
    assert "split seed" in capsys.readouterr().err


def test_report_marks_missing_arms_and_is_idempotent(run_dir, small_config):
    argv = _args(small_config, "report", str(run_dir))
    assert main(argv) == 0
    first = (run_dir / "report.md").read_bytes()
    assert main(argv) == 0
    assert (run_dir / "report.md").read_bytes() == first
    text = first.decode()
    assert "| logit-b | MISSING |" in text and "| hybrid-2ch | MISSING |" in text
    assert re.search(r"\| logit-a \| 0\.\d{3} \|", text)
    assert "```json" in text


def test_report_on_empty_directory(tmp_path, small_config):
    assert main(_args(small_config, "report", str(tmp_path))) == 0
    text = (tmp_path / "report.md").read_text()
    assert "metrics.csv: MISSING" in text and text.count("MISSING |") >= 4


def test_degenerate_comparison_verdict(tmp_path):
    (tmp_path / "comparisons.json").write_text(json.dumps({"pairs": [
        {"model_a": "a", "model_b": "b", "auc_a": 1.0, "auc_b": 0.9, "diff": 0.1,
         "var_diff": 0.0, "z": 0.0, "p_value": 1.0}]}))
    commands.cmd_report(commands.Context(), tmp_path)
    assert "degenerate variance; test undefined" in (tmp_path / "report.md").read_text()
