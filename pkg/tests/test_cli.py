import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from rgb2point.cli import TABLE4_GRID, load_baselines, main
from rgb2point.model import read_checkpoint
from rgb2point.pointcloud import load_cloud

TINY = ["--heads", "2", "--hidden-dim", "64", "--feature-dim", "32", "--no-pretrained"]

TABLE1_OURS = dict(zip(
    load_baselines()["tables"]["table1"]["categories"],
    load_baselines()["tables"]["table1"]["ours"],
))


@pytest.fixture(scope="module")
def prepared(small_tree, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    assert main(["prepare", "--root", str(small_tree), "--out", str(out / "p128"), "--gt-resolution", "128"]) == 0
    return out / "p128" / "manifest.jsonl"


@pytest.fixture(scope="module")
def trained(prepared, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    argv = ["train", "--manifest", str(prepared), "--out", str(run), "--n-points", "128", "--max-steps", "3",
            "--batch-size", "4", "--lr", "1e-3"] + TINY
    assert main(argv) == 0
    return run


# ---------------------------------------------------------------- prepare


def test_prepare_counts_and_determinism(small_tree, tmp_path, capsys):
    assert main(["prepare", "--root", str(small_tree), "--out", str(tmp_path / "a")]) == 0
    assert "6 records" in capsys.readouterr().out
    assert main(["prepare", "--root", str(small_tree), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["records"] == 6 and summary["categories"]["box"] == {"train": 3}


def test_prepare_missing_root(tmp_path, capsys):
    assert main(["prepare", "--root", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) != 0
    captured = capsys.readouterr()
    assert "not found" in captured.err and captured.out == ""


# ---------------------------------------------------------------- train


def test_train_outputs(trained):
    cfg = json.loads((trained / "config.json").read_text())
    assert (cfg["heads"], cfg["hidden_dim"], cfg["feature_dim"], cfg["n_points"]) == (2, 64, 32, 128)
    rows = (trained / "train_log.jsonl").read_text().splitlines()
    assert len(rows) == 3
    assert (trained / "last.pt").is_file()


def test_train_preset_config(prepared, tmp_path, monkeypatch):
    import rgb2point.cli as cli

    seen = {}

    def fake_fit(model, manifest, cfg, **kw):
        seen["model"], seen["train"] = model.config, cfg
        raise cli.CliError("stop")

    monkeypatch.setattr(cli, "fit", fake_fit)
    assert main(["train", "--preset", "paper", "--no-pretrained", "--manifest", str(prepared),
                 "--out", str(tmp_path)]) == 1
    m, t = seen["model"], seen["train"]
    assert (m.heads, m.hidden_dim, m.feature_dim, m.n_points) == (4, 2048, 1024, 1024)
    assert (t.alpha, t.learning_rate, t.batch_size) == (5.0, 1e-4, 32)


def test_train_n_points_sizes_head(small_tree, tmp_path):
    assert main(["prepare", "--root", str(small_tree), "--out", str(tmp_path / "p"), "--gt-resolution", "256"]) == 0
    assert main(["train", "--manifest", str(tmp_path / "p" / "manifest.jsonl"), "--out", str(tmp_path / "r"),
                 "--n-points", "256", "--max-steps", "1"] + TINY) == 0
    weights = read_checkpoint(tmp_path / "r" / "last.pt")["trainable"]
    final = sorted(k for k in weights if k.startswith("gpm.") and k.endswith(".weight"))[-1]
    assert weights[final].shape == (256 * 3, 64)


def test_train_no_cfi(prepared, tmp_path):
    assert main(["train", "--manifest", str(prepared), "--out", str(tmp_path), "--n-points", "128",
                 "--max-steps", "1", "--no-cfi"] + TINY) == 0
    cfg = json.loads(read_checkpoint(tmp_path / "last.pt")["config"])
    assert cfg["enable_cfi"] is False and cfg["enable_gpm"] is True


def test_config_file_reproduces_and_flags_override(trained, tmp_path):
    cfg = json.loads((trained / "config.json").read_text())
    cfg["out"] = str(tmp_path / "again")
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 0
    first = [json.loads(line)["loss"] for line in (trained / "train_log.jsonl").read_text().splitlines()]
    again = [json.loads(line)["loss"] for line in (tmp_path / "again" / "train_log.jsonl").read_text().splitlines()]
    np.testing.assert_allclose(again, first, atol=1e-6, rtol=0)
    assert main(["train", "--config", str(tmp_path / "c.json"), "--max-steps", "1",
                 "--out", str(tmp_path / "short")]) == 0
    assert len((tmp_path / "short" / "train_log.jsonl").read_text().splitlines()) == 1
    assert json.loads((tmp_path / "short" / "config.json").read_text())["max_steps"] == 1


def test_config_unknown_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"heads": 2, "bogus": 1}))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 1
    assert "bogus" in capsys.readouterr().err


def test_resume_continues(trained, prepared, tmp_path):
    argv = ["train", "--config", str(trained / "config.json"), "--resume", str(trained / "last.pt"),
            "--max-steps", "5", "--out", str(tmp_path)]
    assert main(argv) == 0
    steps = [json.loads(line)["step"] for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert steps == [4, 5]


# ---------------------------------------------------------------- eval


def test_eval_table_layout(trained, prepared, tmp_path):
    argv = ["eval", "--checkpoint", str(trained / "last.pt"), "--manifest", str(prepared), "--split", "train",
            "--metrics", "cd,emd,fscore", "--tau", "0.01", "--out", str(tmp_path)]
    assert main(argv) == 0
    table = (tmp_path / "metrics.txt").read_text().splitlines()
    assert table[0].split()[:4] == ["Category", "CD(x10^2)", "EMD(x10^2)", "F-score"]
    assert [line.split()[0] for line in table[2:4]] == ["box", "prism"]
    assert table[-2].startswith("Average") and table[-1].startswith("Stdev.")
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert len(report["per_sample"]) == 6
    assert set(report["aggregate"]) == {"chamfer", "emd", "fscore"}


def test_eval_resolution_mismatch(trained, small_tree, tmp_path, capsys):
    assert main(["prepare", "--root", str(small_tree), "--out", str(tmp_path / "p"), "--gt-resolution", "1024"]) == 0
    argv = ["eval", "--checkpoint", str(trained / "last.pt"), "--manifest", str(tmp_path / "p" / "manifest.jsonl"),
            "--split", "train", "--out", str(tmp_path / "e")]
    assert main(argv) == 1
    assert "128" in capsys.readouterr().err


def test_eval_precomputed_reproduces_published_footer(tmp_path):
    (tmp_path / "scores.json").write_text(json.dumps({"fscore": TABLE1_OURS}))
    assert main(["eval", "--precomputed", str(tmp_path / "scores.json"), "--metrics", "fscore",
                 "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert abs(report["aggregate"]["fscore"] - 0.505) <= 5e-4
    assert abs(report["stability"]["fscore"] - 0.045) <= 5e-4
    footer = (tmp_path / "o" / "metrics.txt").read_text().splitlines()[-2:]
    assert footer[0].split() == ["Average", "0.505"]
    assert footer[1].split() == ["Stdev.", "0.045"]


# ---------------------------------------------------------------- infer


def test_infer_writes_cloud_and_timing(trained, small_tree, tmp_path):
    image = sorted((small_tree / "box" / "box0000" / "renders").glob("*.png"))[0]
    argv = ["infer", "--checkpoint", str(trained / "last.pt"), "--image", str(image), "--out",
            str(tmp_path / "cloud.ply"), "--time", "--repeats", "100", "--mem"]
    assert main(argv) == 0
    assert load_cloud(tmp_path / "cloud.ply").points.shape == (128, 3)
    report = json.loads((tmp_path / "cloud.resources.json").read_text())
    t = report["timing"]
    assert t["repeats"] == 100 and t["warmup"] == 10
    assert 0 < t["p50_ms"] <= t["p95_ms"]
    assert report["memory"]["peak_mb"] > 0
    assert report["memory"]["kind"] == ("accelerator-max-allocated" if torch.cuda.is_available() else "host-peak-rss")


def test_infer_bad_image(trained, tmp_path, capsys):
    (tmp_path / "x.png").write_bytes(b"no")
    assert main(["infer", "--checkpoint", str(trained / "last.pt"), "--image", str(tmp_path / "x.png"),
                 "--out", str(tmp_path / "o.ply")]) == 1
    assert capsys.readouterr().err


# ---------------------------------------------------------------- ablate


def test_ablate_table4_plan(prepared, tmp_path):
    assert main(["ablate", "--manifest", str(prepared), "--out", str(tmp_path), "--dry-run"]) == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert len(plan) == 16
    assert [(p["cell"]["heads"], p["cell"]["hidden_dim"], p["cell"]["feature_dim"]) for p in plan] == TABLE4_GRID
    cfg = json.loads(open(plan[7]["dir"] + "/train_config.json").read())
    assert (cfg["heads"], cfg["hidden_dim"], cfg["feature_dim"]) == (4, 2048, 1024)


def test_ablate_backbone_plan(prepared, tmp_path):
    assert main(["ablate", "--manifest", str(prepared), "--out", str(tmp_path), "--backbone", "resnet50",
                 "--dry-run"]) == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert [p["cell"]["backbone"] for p in plan] == ["vit-imagenet", "resnet50-imagenet"]


def test_ablate_runs_cell_with_difference_column(prepared, tmp_path):
    common = ["ablate", "--manifest", str(prepared), "--n-points", "128", "--max-steps", "1",
              "--eval-split", "train", "--rows", "7"]
    assert main(common + ["--no-pretrained", "--out", str(tmp_path / "np")]) == 0
    result = json.loads((tmp_path / "np" / "ablation.json").read_text())
    assert result["difference_reference"] == "published"
    row = result["rows"][0]
    assert (row["heads"], row["hidden_dim"], row["feature_dim"]) == (4, 2048, 1024)
    assert row["chamfer_diff_pct"] == pytest.approx(100 * (row["chamfer_avg"] - 4.06) / 4.06)
    text = (tmp_path / "np" / "ablation.txt").read_text()
    assert "CD Diff(%)" in text and "EMD Avg." in text

    # the same row as its own reference gives zero difference
    assert main(common + ["--no-pretrained", "--reference", str(tmp_path / "np" / "ablation.json"),
                          "--out", str(tmp_path / "np2")]) == 0
    again = json.loads((tmp_path / "np2" / "ablation.json").read_text())["rows"][0]
    assert again["chamfer_diff_pct"] == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------- report


def test_report_published_percentages(tmp_path):
    assert main(["report", "--published", "--out", str(tmp_path)]) == 0
    tables = json.loads((tmp_path / "report.json").read_text())["tables"]
    got = {
        ("table1", "fscore"): tables["table1"]["metrics"]["fscore"]["improvement_percent"],
        ("table2", "chamfer"): tables["table2"]["metrics"]["chamfer"]["improvement_percent"],
        ("table2", "emd"): tables["table2"]["metrics"]["emd"]["improvement_percent"],
        ("table3", "chamfer"): tables["table3"]["metrics"]["chamfer"]["improvement_percent"],
        ("table3", "emd"): tables["table3"]["metrics"]["emd"]["improvement_percent"],
    }
    expected = {("table1", "fscore"): 47.16, ("table2", "chamfer"): 39.26, ("table2", "emd"): 26.95,
                ("table3", "chamfer"): 51.15, ("table3", "emd"): 36.17}
    for key, value in expected.items():
        assert abs(got[key] - value) <= 0.1, key
    assert "+47.2" in (tmp_path / "report.txt").read_text()


def test_report_from_result_files(tmp_path):
    per_cat = {"chamfer": {"car": 0.0405, "chair": 0.0538, "aircraft": 0.0273},
               "emd": {"car": 0.0359, "chair": 0.0780, "aircraft": 0.0501}}
    (tmp_path / "s.json").write_text(json.dumps(per_cat))
    assert main(["eval", "--precomputed", str(tmp_path / "s.json"), "--metrics", "cd,emd",
                 "--out", str(tmp_path / "e")]) == 0
    assert main(["report", "table2=" + str(tmp_path / "e" / "metrics.json"), "--out", str(tmp_path / "r")]) == 0
    t2 = json.loads((tmp_path / "r" / "report.json").read_text())["tables"]["table2"]["metrics"]
    assert t2["chamfer"]["improvement_percent"] == pytest.approx(39.26, abs=0.01)
    assert t2["emd"]["improvement_percent"] == pytest.approx(26.95, abs=0.01)
    assert main(["report", "table3", "--out", str(tmp_path / "bad")]) == 1


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "rgb2point", "report", "--published", "--out", str(tmp_path)],
                        capture_output=True, text=True)
    assert ok.returncode == 0 and (tmp_path / "report.json").is_file()
    bad = subprocess.run([sys.executable, "-m", "rgb2point", "prepare", "--root", str(tmp_path / "missing"),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert bad.returncode == 1 and "error" in bad.stderr and bad.stdout == ""
