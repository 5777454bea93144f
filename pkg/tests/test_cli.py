import json

import numpy as np
import pytest

from piba import cli
from piba import synthdata as sd
from piba.attribmap import read_map


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny gen-data -> train -> attribute run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data, model, maps = root / "data", root / "model", root / "maps"
    assert cli.main(["gen-data", "--out", str(data), "--n", "20",
                     "--seed", "4"]) == 0
    assert cli.main(["train", "--out", str(model), "--data", str(data),
                     "--lr", "1e-3", "--epochs", "3", "--seed", "1"]) == 0
    assert cli.main(["attribute", "--out", str(maps), "--model", str(model),
                     "--data", str(data), "--method", "ig",
                     "--count", "3"]) == 0
    return root, data, model, maps


def test_gen_data_artifact_loads(pipeline):
    _, data, _, _ = pipeline
    ds = sd.load_dataset(data / "dataset.piba")
    assert ds.kind == "image"
    assert ds["train"].images.shape[0] == 20


def test_train_artifacts(pipeline):
    _, _, model, _ = pipeline
    assert (model / "model.pibc").exists()
    lines = (model / "accuracy.csv").read_text().splitlines()
    assert lines[0] == "x,y,std"
    assert len(lines) == 4  # header + one row per epoch


def test_attribute_artifacts(pipeline):
    _, _, _, maps = pipeline
    amap = read_map(maps / "map_test_0001.pibm")
    assert amap.values.shape == (16, 16)
    assert amap.provenance["method"] == "ig"
    assert (maps / "map_test_0001.pgm").exists()


def test_manifest_lists_artifact_hashes(pipeline):
    _, _, model, _ = pipeline
    manifest = json.loads((model / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seeds"] == [1]
    assert set(manifest["artifacts"]) == {"model.pibc", "accuracy.csv"}
    for digest in manifest["artifacts"].values():
        assert len(digest) == 64


def test_no_temp_files_left_behind(pipeline):
    root, _, _, _ = pipeline
    assert not list(root.rglob("*.tmp"))


def test_eval_commands_and_report(pipeline, tmp_path):
    _, data, model, maps = pipeline
    out = tmp_path / "eval"
    common = ["--model", str(model), "--data", str(data), "--maps", str(maps),
              "--count", "2"]
    assert cli.main(["eval-ehr", "--out", str(out), "--data", str(data),
                     "--maps", str(maps), "--count", "2"]) == 0
    assert cli.main(["eval-sensn", "--out", str(out), "--k-sets", "20"]
                    + common) == 0
    assert cli.main(["eval-insdel", "--out", str(out)] + common) == 0
    assert cli.main(["report", "--out", str(out)]) == 0

    ehr = json.loads((out / "ehr.json").read_text())
    assert ehr["report_version"] == 1
    assert ehr["scalars"]["maps"]["ehr"]["n"] == 2
    assert (out / "insertion_mean.csv").read_text().startswith("x,y\n")
    report = json.loads((out / "report.json").read_text())
    assert report["report_version"] == 1
    assert {"ehr", "sensn", "insdel"} <= set(report["sections"])


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    root, data, model, _ = pipeline
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"data = {data}\nlr = 1e-3\nepochs = 3\nseed = 1\n")
    out = tmp_path / "m2"
    assert cli.main(["train", "--out", str(out), "--config", str(cfg),
                     "--epochs", "2"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 2  # flag beats file
    assert manifest["config"]["lr"] == 1e-3


def test_rerun_from_resolved_config_is_byte_identical(pipeline, tmp_path):
    _, _, model, _ = pipeline
    out = tmp_path / "retrain"
    assert cli.main(["train", "--out", str(out), "--config",
                     str(model / "train.config")]) == 0
    a = json.loads((model / "manifest.json").read_text())["artifacts"]
    b = json.loads((out / "manifest.json").read_text())["artifacts"]
    assert a == b


def test_exit_code_2_on_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no equals sign here\n")
    assert cli.main(["report", "--out", str(tmp_path), "--config",
                     str(bad)]) == 2
    err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert err["error"]["code"] == 2

    bad.write_text("unknown_key = 1\n")
    assert cli.main(["report", "--out", str(tmp_path), "--config",
                     str(bad)]) == 2
    assert cli.main(["train", "--out", str(tmp_path), "--data", "x",
                     "--lr", "not-a-number"]) == 2
    assert cli.main(["gen-data", "--out", str(tmp_path),
                     "--kind", "audio"]) == 2


def test_exit_code_3_on_missing_artifacts(pipeline, tmp_path, capsys):
    _, data, _, _ = pipeline
    assert cli.main(["train", "--out", str(tmp_path), "--data",
                     str(tmp_path / "nope"), "--lr", "1e-3"]) == 3
    err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert err["error"]["kind"] == "MissingArtifact"
    assert cli.main(["eval-ehr", "--out", str(tmp_path), "--data", str(data),
                     "--maps", str(tmp_path), "--count", "1"]) == 3


def test_out_dir_from_environment(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("PIBA_OUT_DIR", str(tmp_path / "envout"))
    assert cli.main(["gen-data", "--n", "5", "--seed", "2"]) == 0
    assert (tmp_path / "envout" / "dataset.piba").exists()


def test_missing_out_dir_is_a_config_error(monkeypatch, capsys):
    monkeypatch.delenv("PIBA_OUT_DIR", raising=False)
    assert cli.main(["gen-data", "--n", "5"]) == 2


def test_token_kind_guard(pipeline, tmp_path):
    out = tmp_path / "tok"
    assert cli.main(["gen-data", "--out", str(out), "--kind", "token",
                     "--n", "10"]) == 0
    assert cli.main(["eval-ehr", "--out", str(out), "--data", str(out),
                     "--maps", str(out), "--count", "1"]) == 2
