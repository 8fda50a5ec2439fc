import json

import numpy as np
import pytest
from PIL import Image

from facecloak.harness.cli import EXIT_CODES, main
from facecloak.harness.manifest import load_manifest


def _run(*argv):
    return main([str(a) for a in argv])


def _last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, fixture_models):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--count", "4", "--seed", "21", "--out", str(root / "data")]) == 0
    for k in ("A", "B"):
        fixture_models[k].save(root / f"{k}.pt")
    return root


def test_gen_data_refuses_existing_run_dir(workspace):
    assert _run("gen-data", "--count", "1", "--out", workspace / "data") == EXIT_CODES["output_exists"]


def test_gray_zero_sigma_matches_white(workspace):
    common = ["--model", workspace / "A.pt", "--manifest", workspace / "data/manifest.jsonl", "--iters", 6, "--limit", 2]
    assert _run("attack", "--mode", "white", *common, "--out", workspace / "white") == 0
    assert _run("attack", "--mode", "gray", "--sigma", 0, *common, "--out", workspace / "gray0") == 0
    for name in ("00000.png", "00001.png"):
        assert (workspace / "white/images" / name).read_bytes() == (workspace / "gray0/images" / name).read_bytes()
    rows = [json.loads(line) for line in (workspace / "white/attacks.jsonl").read_text().splitlines()]
    assert all(r["max_budget"] <= 5e-5 + 1e-12 for r in rows)
    assert len(load_manifest(workspace / "white/clean_manifest.jsonl")) == 2


def test_evaluate_with_reference_reports_drop(workspace):
    out = workspace / "eval"
    rc = _run(
        "evaluate", "--manifest", workspace / "white/manifest.jsonl", "--model", workspace / "A.pt",
        "--reference", workspace / "white/clean_manifest.jsonl", "--out", out,
    )
    assert rc == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["duq_drop"] == pytest.approx(rep["clean_duq"] - rep["attacked_duq"])
    assert 0 < rep["evaluation"]["attacked"]["ssim_mean"] <= 1
    run = json.loads((out / "run.json").read_text())
    assert run["seeds"] == {"seed": 0} and run["config"]["iou_min"] == 0.5
    assert (out / "per_image.csv").exists() and (out / "duq.png").stat().st_size > 0


def test_ground_truth_detections_score_perfectly(workspace):
    m = load_manifest(workspace / "data/manifest.jsonl")
    dets = workspace / "gt_dets.jsonl"
    dets.write_text("".join(json.dumps({"detections": [[*b.as_tuple(), 1.0] for b in r.boxes]}) + "\n" for r in m.records))
    assert _run("evaluate", "--manifest", workspace / "data/manifest.jsonl", "--detections", dets, "--out", workspace / "gt_eval") == 0
    rep = json.loads((workspace / "gt_eval/report.json").read_text())
    assert rep["evaluation"]["attacked"]["duq"] == 1.0
    assert rep["evaluation"]["attacked"]["ap"] == pytest.approx(1.0)


def test_robustness_zero_severity_equals_evaluate(workspace, capsys):
    data = workspace / "data/manifest.jsonl"
    assert _run("evaluate", "--manifest", data, "--model", workspace / "A.pt", "--out", workspace / "eval_clean") == 0
    duq_clean = json.loads((workspace / "eval_clean/report.json").read_text())["evaluation"]["attacked"]["duq"]
    rc = _run(
        "robustness", "--model", workspace / "A.pt", "--clean", data, "--perturbed", data,
        "--jpeg-qualities", "100", "--noise-stds", "0,4", "--blur-stds", "0", "--out", workspace / "rob",
    )
    assert rc == 0
    rep = json.loads((workspace / "rob/report.json").read_text())
    zero = [p for p in rep["curves"] if p["operation"] in ("noise", "blur") and p["severity"] == 0]
    assert zero and all(p["duq"] == duq_clean for p in zero)
    assert (workspace / "rob/curves.csv").exists() and (workspace / "rob/robustness.png").exists()


def test_report_summarizes_runs(workspace):
    rc = _run("report", "--runs", workspace / "eval", workspace / "rob", "--out", workspace / "summary")
    assert rc == 0
    rep = json.loads((workspace / "summary/report.json").read_text())
    assert rep["schema"] == "facecloak.report"
    assert any(r.get("duq_drop") is not None for r in rep["rows"])
    assert (workspace / "summary/duq_summary.png").exists()


def test_config_file_sets_defaults(workspace):
    cfg = workspace / "eval.yaml"
    cfg.write_text("iou-min: 0.3\nap-mode: step\n")
    out = workspace / "eval_cfg"
    assert _run("evaluate", "--config", cfg, "--manifest", workspace / "data/manifest.jsonl", "--model", workspace / "A.pt", "--out", out) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["iou_min"] == 0.3 and run["config"]["ap_mode"] == "step"
    bad = workspace / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert _run("evaluate", "--config", bad, "--manifest", "x", "--model", "y") == EXIT_CODES["usage"]


def test_exit_codes(workspace, tmp_path, capsys):
    assert _run("attack", "--mode", "white") == EXIT_CODES["usage"]
    assert _run("frobnicate") == EXIT_CODES["usage"]
    assert _run("evaluate", "--manifest", tmp_path / "nope.jsonl", "--model", workspace / "A.pt", "--out", tmp_path / "o1") == EXIT_CODES["missing_input"]
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "missing_input" and (tmp_path / "o1/error.json").exists()

    lines = (workspace / "data/manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    (tmp_path / "images").mkdir()
    for i in range(4):
        Image.open(workspace / f"data/images/{i:05d}.png").save(tmp_path / f"images/{i:05d}.png")
    header["version"] = 7
    (tmp_path / "v7.jsonl").write_text("\n".join([json.dumps(header), *lines[1:]]) + "\n")
    assert _run("evaluate", "--manifest", tmp_path / "v7.jsonl", "--model", workspace / "A.pt", "--out", tmp_path / "o2") == EXIT_CODES["schema_version"]

    rec = json.loads(lines[1])
    rec["boxes"][0][3] = -1
    (tmp_path / "bad.jsonl").write_text("\n".join([lines[0], json.dumps(rec)]) + "\n")
    assert _run("evaluate", "--manifest", tmp_path / "bad.jsonl", "--model", workspace / "A.pt", "--out", tmp_path / "o3") == EXIT_CODES["invalid_input"]
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "record 0" in err["message"]

    rc = _run("train-toy", "--manifest", workspace / "data/manifest.jsonl", "--epochs", 1, "--min-recall", 0.99, "--out", tmp_path / "o4")
    assert rc == EXIT_CODES["training_failed"]
