import json

import pytest

from trajbench.cli import main
from trajbench.metrics import TASK1_KEYS, TASK2_KEYS, TASK3_KEYS


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    city = str(root / "city")
    steps = [
        ["synth-city", "--out", city, "--grid", "4", "--n-traj", "40", "--no-annotate"],
        ["compress", "--city", city],
        ["sample-intents", "--city", city],
        ["annotate", "--city", city],
        ["qc", "--city", city],
        ["judge", "--city", city, "--top", "3"],
        ["split", "--city", city],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return root, city


def test_pipeline_files(built):
    root, city = built
    for name in ("phases.jsonl", "intents.jsonl", "annotations.jsonl", "qc.jsonl", "scores.jsonl", "split.json"):
        assert (root / "city" / name).exists(), name
    split = json.loads((root / "city" / "split.json").read_text())
    assert (len(split["train"]), len(split["val"]), len(split["test"])) == (28, 4, 8)


@pytest.mark.parametrize("task, keys", [(1, TASK1_KEYS), (2, TASK2_KEYS), (3, TASK3_KEYS)])
def test_eval(built, task, keys):
    root, city = built
    out = root / f"t{task}.json"
    assert main(["eval", "--city", city, "--task", str(task), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert all(report[k] is not None for k in keys)
    assert main(["figure-data", "--report", str(out), "--out", str(root / f"f{task}.csv")]) == 0
    assert (root / f"f{task}.csv").read_text().startswith("group,metric,value")


def test_method_verbs(built, capsys):
    root, city = built
    assert main(["anchor-run", "--city", city, "--mode", "destsp-bm25", "--out", str(root / "routes.jsonl")]) == 0
    params = root / "params.json"
    assert main(["fuse-train", "--city", city, "--epochs", "2", "--batch-size", "8", "--out", str(params)]) == 0
    db = root / "db.jsonl"
    argv = ["fuse-retrieve", "--city", city, "--params", str(params), "--db", str(db),
            "--query", "trips ending near the river", "--k", "3", "--out", str(root / "ranked.jsonl")]
    assert main(argv) == 0 and db.exists()
    assert main(argv) == 0  # second run reads the saved database
    rows = [json.loads(l) for l in (root / "ranked.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and len(rows[0]["ranked"]) == 3
    assert main(["rap-run", "--city", city, "--out", str(root / "caps.jsonl")]) == 0
    caps = [json.loads(l) for l in (root / "caps.jsonl").read_text().splitlines()]
    assert len(caps) == 8 and all(c["caption"] for c in caps)


def test_config_defaults_and_overrides(built, tmp_path):
    root, city = built
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("fuse-train:\n  epochs: 1\n  batch-size: 4\n")
    out = tmp_path / "p.json"
    assert main(["fuse-train", "--city", city, "--config", str(cfg), "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["losses"]) == 1
    assert main(["fuse-train", "--city", city, "--config", str(cfg), "--epochs", "3", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["losses"]) == 3
    cfg.write_text("fuse-train:\n  nonsense: 1\n")
    assert main(["fuse-train", "--city", city, "--config", str(cfg), "--out", str(out)]) == 1


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["compress", "--city", str(tmp_path / "nope")]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["eval", "--city", str(tmp_path), "--task", "9", "--out", "x"])
