import csv
import json
import os

import pytest

from dave.config import build_run_config, get_user_config_path, parse_kv_text
from dave.errors import ConfigError
from dave.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, TRAIN_DEFAULTS, main

DEFAULTS = {"seed": 0, "deterministic": False, "batch_size": 64, "phase1_lr": 1e-3, "aln_tasks": ("pose", "type")}


# -------------------- Config layering --------------------

def test_parse_kv_text():
    out = parse_kv_text("# comment\nbatch-size = 8  # trailing\n\n Phase1_LR=0.5\n")
    assert out == {"batch_size": "8", "phase1_lr": "0.5"}
    with pytest.raises(ConfigError, match="x.conf:2"):
        parse_kv_text("seed = 1\nnot a pair\n", source="x.conf")


def test_precedence_flags_over_file_over_user(tmp_path, monkeypatch):
    home = tmp_path / "home"
    home.mkdir()
    monkeypatch.setenv("DAVE_CONFIG_HOME", str(home))
    (home / "dave.conf").write_text("batch_size = 16\nphase1_lr = 0.1\nseed = 3\n", encoding="utf-8")
    run_file = tmp_path / "run.conf"
    run_file.write_text("batch_size = 32\naln_tasks = pose\n", encoding="utf-8")
    assert get_user_config_path() == str(home / "dave.conf")

    cfg = build_run_config("train", DEFAULTS, {"phase1_lr": 0.01, "seed": None}, config_path=str(run_file))
    assert cfg.batch_size == 32
    assert cfg.phase1_lr == 0.01
    assert cfg.seed == 3
    assert cfg.aln_tasks == ("pose",)
    assert cfg.get("--batch-size") == 32


def test_unknown_and_bad_keys(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("wheels = 4\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown key 'wheels'"):
        build_run_config("train", DEFAULTS, {}, config_path=str(bad))
    with pytest.raises(ConfigError, match="unknown option"):
        build_run_config("train", DEFAULTS, {"wheels": 4})
    bad.write_text("batch_size = many\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="batch_size"):
        build_run_config("train", DEFAULTS, {}, config_path=str(bad))
    with pytest.raises(ConfigError, match="not found"):
        build_run_config("train", DEFAULTS, {}, config_path=str(tmp_path / "none.conf"))


def test_deterministic_from_environment(monkeypatch):
    monkeypatch.setenv("DAVE_DETERMINISTIC", "1")
    assert build_run_config("train", DEFAULTS, {}).deterministic
    monkeypatch.setenv("DAVE_DETERMINISTIC", "0")
    assert not build_run_config("train", DEFAULTS, {}).deterministic
    assert build_run_config("train", DEFAULTS, {"deterministic": "yes"}).deterministic


# -------------------- Parser --------------------

def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert f"(default: {TRAIN_DEFAULTS['batch_size']})" in out
    assert "--phase1-lr" in out and "--no-knowledge" in out


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--batch-size", "lots"])
    assert exc.value.code == EXIT_USAGE
    assert "[DAVE] error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


def test_runtime_errors_exit_two(tmp_path, capsys):
    code = main(["eval", "--quiet", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "e")])
    assert code == EXIT_RUNTIME
    assert "manifest not found" in capsys.readouterr().err


def test_infer_without_inputs_is_a_usage_error(tmp_path, tiny_model):
    model = tiny_model.save(str(tmp_path / "m.daveckpt"))
    assert main(["infer", "--quiet", "--model", model, "--out", str(tmp_path / "d.jsonl")]) == EXIT_USAGE


# -------------------- Commands --------------------

def test_synth_command(tmp_path, capsys):
    out = str(tmp_path / "data")
    code = main(["synth", "--quiet", "--out", out, "--count", "3", "--width", "120", "--height", "100",
                 "--max-vehicles", "1", "--types", "12", "--seed", "2"])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    with open(os.path.join(out, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    assert len(manifest["vocabularies"]["type"]) == 13
    assert manifest["seed"] == 2


def test_synth_rejects_bad_type_count(tmp_path):
    assert main(["synth", "--quiet", "--out", str(tmp_path / "d"), "--count", "1", "--types", "7"]) == EXIT_USAGE


def test_train_infer_eval_round(tmp_path, tiny_dataset, capsys):
    run = tmp_path / "run"
    code = main([
        "train", "--quiet", "--data", tiny_dataset.root, "--out", str(run),
        "--batch-size", "4", "--phase1-epochs", "1", "--phase2-epochs", "0", "--steps-per-epoch", "1",
        "--knowledge-dim", "8", "--aln-side", "16", "--aln-depth", "shallow-4", "--deterministic",
    ])
    assert code == EXIT_OK
    model = str(run / "model.daveckpt")
    assert os.path.exists(model) and os.path.exists(model + ".json")

    dets = str(tmp_path / "out" / "detections.jsonl")
    overlays = tmp_path / "overlays"
    code = main([
        "infer", "--quiet", "--model", model, "--data", tiny_dataset.root, "--split", "test",
        "--out", dets, "--levels", "2", "--overlays", str(overlays), "--deterministic",
    ])
    assert code == EXIT_OK
    test_ids = tiny_dataset.split_ids("test")
    with open(dets, encoding="utf-8") as f:
        assert sorted(json.loads(line)["image"] for line in f) == sorted(test_ids)
    with open(str(tmp_path / "out" / "detections_timings.csv"), encoding="utf-8") as f:
        assert len(list(csv.DictReader(f))) == len(test_ids)
    assert sorted(os.listdir(overlays)) == sorted(f"{i}.png" for i in test_ids)

    ev = tmp_path / "eval"
    capsys.readouterr()
    code = main([
        "eval", "--quiet", "--detections", dets, "--data", tiny_dataset.root, "--split", "test",
        "--out", str(ev), "--iou", "0.5", "--plot",
        "--attributes-split", "test", "--model", model, "--resolutions", "8,16", "--compare-models", model,
    ])
    assert code == EXIT_OK
    assert capsys.readouterr().out.startswith("AP@0.5 = ")
    for name in ("metrics.csv", "pr_curve.csv", "pr_curve.png", "attributes_gt_crops.csv",
                 "attributes_gt_crops.json", "resolution_study.csv", "model_comparison.csv"):
        assert (ev / name).exists(), name
    with open(ev / "metrics.csv", encoding="utf-8") as f:
        metrics = {r["metric"] for r in csv.DictReader(f)}
    assert {"ap", "iou_threshold", "fps"} <= metrics


def test_eval_needs_attributes_split_for_studies(tmp_path, tiny_dataset):
    dets = tmp_path / "d.jsonl"
    dets.write_text("", encoding="utf-8")
    code = main(["eval", "--quiet", "--detections", str(dets), "--data", tiny_dataset.root,
                 "--out", str(tmp_path / "e"), "--resolutions", "8"])
    assert code == EXIT_USAGE
    code = main(["eval", "--quiet", "--detections", str(dets), "--data", tiny_dataset.root,
                 "--out", str(tmp_path / "e"), "--ap", "101point"])
    assert code == EXIT_USAGE


def test_bad_option_values_are_usage_errors(tmp_path, tiny_model):
    model = tiny_model.save(str(tmp_path / "m.daveckpt"))
    (tmp_path / "imgs").mkdir()
    code = main(["infer", "--quiet", "--model", model, "--images", str(tmp_path / "imgs"),
                 "--ratio", "1.5", "--out", str(tmp_path / "d.jsonl")])
    assert code == EXIT_USAGE
    assert main(["synth", "--quiet", "--out", str(tmp_path / "d"), "--count", "0"]) == EXIT_USAGE


def test_value_errors_inside_a_command_are_runtime_errors(tmp_path, tiny_model, tiny_dataset, monkeypatch, capsys):
    from dave.pyramid import Detector

    def broken(self, image):
        raise ValueError("operands could not be broadcast together")

    monkeypatch.setattr(Detector, "detect", broken)
    model = tiny_model.save(str(tmp_path / "m.daveckpt"))
    code = main(["infer", "--quiet", "--model", model, "--data", tiny_dataset.root,
                 "--out", str(tmp_path / "d.jsonl")])
    assert code == EXIT_RUNTIME
    assert "could not be broadcast" in capsys.readouterr().err
