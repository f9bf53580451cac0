import json
import re
import shutil

import pytest
from click.testing import CliRunner

from treecnn.cli import main

TINY = {
    "seed": 1,
    "dataset": {"kind": "digits"},
    "schedule": [[0, 1, 2, 3], [4, 5]],
    "initial_tree": [[0, 1], [2, 3]],
    "nodes": {"root_shrink": 8, "branch_shrink": 8, "root_fc_shrink": 16, "branch_fc_shrink": 16},
    "baseline": {"shrink": 8, "fc_shrink": 16},
    "growth": {"alpha": 0.0, "beta": 1.0, "max_children": 5},
    "training": {"epochs": 1, "batch_size": 32, "lr": 0.05, "flip_prob": 0.0},
    "probe": {"count": 5},
}


def write_config(path, **changes):
    cfg = json.loads(json.dumps(TINY))
    cfg.update(changes)
    path.write_text(json.dumps(cfg))
    return str(path)


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base / "tiny.json")
    run_dir = base / "run"
    result = invoke("run", cfg, "-o", run_dir)
    assert result.exit_code == 0, result.output
    return cfg, run_dir


def fresh_copy(run_dir, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(run_dir, dst)
    return dst


# ------------------------------------------------------------ effort-table


def test_effort_table_cifar100():
    result = invoke("effort-table")
    assert result.exit_code == 0
    lines = result.output.strip().splitlines()
    assert lines[0] == "classes,B:I,B:II,B:III,B:IV,B:V"
    assert lines[1] == "20,0.08,0.17,0.19,0.20,0.20"
    assert lines[-1] == "100,0.41,0.86,0.97,1.00,1.00"
    assert len(lines) == 10


def test_effort_table_json_and_overrides():
    result = invoke("effort-table", "--classes", "10,20", "--samples-per-class", "100", "--format", "json")
    data = json.loads(result.output)
    assert [r["classes"] for r in data["rows"]] == [10, 20]
    assert data["rows"][-1]["B:V"] == 1.0


# ------------------------------------------------------------------ config


@pytest.mark.parametrize(
    "changes, field",
    [
        ({"growth": {"alpha": 2.0}}, "growth"),
        ({"probe": {"fraction": 0}}, "probe.fraction"),
        ({"colour": "blue"}, "colour"),
        ({"initial_tree": [[0, 1], [2, 9]]}, "initial_tree"),
    ],
)
def test_bad_config_exits_2(tmp_path, changes, field):
    cfg = write_config(tmp_path / "bad.json", **changes)
    result = invoke("run", cfg, "-o", tmp_path / "run")
    assert result.exit_code == 2
    assert f"config error: {field}" in result.output


def test_unparseable_config(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    result = invoke("run", path, "-o", tmp_path / "run")
    assert result.exit_code == 2 and "not valid JSON" in result.output


def test_network_too_big_for_images(tmp_path):
    cfg = write_config(tmp_path / "small.json", dataset={"kind": "digits", "downsample": 4})
    result = invoke("run", cfg, "-o", tmp_path / "run")
    assert result.exit_code == 2 and "config error: network" in result.output


def test_single_group_schedule_gives_one_report(tmp_path):
    cfg = write_config(tmp_path / "one.json", schedule=[[0, 1, 2, 3]])
    result = invoke("run", cfg, "-o", tmp_path / "run")
    assert result.exit_code == 0, result.output
    assert "1 stage(s)" in result.output
    out = invoke("report", tmp_path / "run").output
    acc = out.split("# accuracy")[1].strip().splitlines()
    assert len(acc) == 2  # header and stage 0


# ------------------------------------------------------- run/report/verify


def test_report_tables(tiny_run):
    _, run_dir = tiny_run
    result = invoke("report", run_dir)
    assert result.exit_code == 0
    effort = result.output.split("# accuracy")[0].strip().splitlines()
    assert effort[1] == "stage,classes,B:I,B:II,B:III,B:IV,B:V,Tree-CNN-5,raw_effort"
    assert [r.split(",")[:2] for r in effort[2:]] == [["0", "4"], ["1", "6"]]
    assert (run_dir / "report" / "effort.csv").exists()
    data = json.loads(invoke("report", run_dir, "--format", "json").output.split("# accuracy")[1].strip())
    assert all(0 <= r["accuracy"] <= 100 for r in data)


def test_verify_passes(tiny_run):
    result = invoke("verify", tiny_run[1])
    assert result.exit_code == 0, result.output
    assert "FAIL" not in result.output and "PASS  checkpoints" in result.output


def test_verify_catches_tampered_effort(tiny_run, tmp_path):
    run_dir = fresh_copy(tiny_run[1], tmp_path)
    path = run_dir / "stages" / "001" / "report.json"
    report = json.loads(path.read_text())
    report["effort"] += 1
    path.write_text(json.dumps(report))
    result = invoke("verify", run_dir)
    assert result.exit_code == 1
    assert "FAIL  stage 1: effort arithmetic" in result.output


def test_verify_catches_duplicated_leaf(tiny_run, tmp_path):
    run_dir = fresh_copy(tiny_run[1], tmp_path)
    path = run_dir / "stages" / "001" / "tree.json"
    tree = json.loads(path.read_text())
    leaves = [n for n in tree["nodes"] if "leaf_class" in n]
    leaves[1]["leaf_class"] = leaves[0]["leaf_class"]
    path.write_text(json.dumps(tree))
    result = invoke("verify", run_dir)
    assert result.exit_code == 1
    assert "FAIL  stage 1: tree invariants" in result.output


def test_export_dot(tiny_run, tmp_path):
    result = invoke("export-dot", tiny_run[1])
    assert result.exit_code == 0 and result.output.startswith("digraph")
    assert len(re.findall(r'class="leaf"', result.output)) == 6
    out = tmp_path / "s0.dot"
    invoke("export-dot", tiny_run[1], "--stage", 0, "-o", out)
    assert len(re.findall(r'class="leaf"', out.read_text())) == 4


def test_resume_matches_uninterrupted_run(tiny_run, tmp_path):
    cfg, run_dir = tiny_run
    resumed = fresh_copy(run_dir, tmp_path)
    manifest = json.loads((resumed / "manifest.json").read_text())
    manifest["stages"] = manifest["stages"][:1]
    (resumed / "manifest.json").write_text(json.dumps(manifest))
    shutil.rmtree(resumed / "stages" / "001")
    result = invoke("run", cfg, "-o", resumed)
    assert result.exit_code == 0, result.output
    a = json.loads((run_dir / "stages" / "001" / "report.json").read_text())
    b = json.loads((resumed / "stages" / "001" / "report.json").read_text())
    assert a == b


def test_changed_config_is_refused(tiny_run, tmp_path):
    cfg, run_dir = tiny_run
    other = write_config(tmp_path / "other.json", seed=2)
    result = invoke("run", other, "-o", fresh_copy(run_dir, tmp_path))
    assert result.exit_code != 0
