import json
from pathlib import Path

import numpy as np
import pytest

from fettl.cli import cmd_compare, cmd_gen_data, cmd_pretrain, cmd_run, main
from fettl.errors import ConfigError
from fettl.metrics import RunReport
from fettl.params import ParamSet


TINY = {
    "task": "segmentation",
    "strategy": "fettl",
    "image_size": 16,
    "sites": [{"site_id": "A", "n": 8}, {"site_id": "B", "n": 6}],
    "rounds": 2, "local_iters": 2, "batch_size": 4,
    "eta": 1e-3, "beta": 1e-3, "seed": 1,
    "pretrain": {"pool_images": 8, "pool_epochs": 2, "rounds": 1,
                 "local_steps": 2, "batch_size": 4},
    "init_task": {"epochs": 1, "lr": 5e-4, "batch_size": 4},
}


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_gen_data_writes_sites_and_manifest(config_file, tmp_path):
    out = tmp_path / "data"
    manifest = cmd_gen_data(config_file, str(out))
    assert (out / "manifest.json").exists()
    assert sorted(manifest["sites"]) == ["A", "B"]
    assert (out / "A").is_dir() and (out / "B").is_dir()


def test_gen_data_refuses_overwrite_without_force(config_file, tmp_path):
    out = tmp_path / "data"
    cmd_gen_data(config_file, str(out))
    with pytest.raises(ConfigError):
        cmd_gen_data(config_file, str(out))
    cmd_gen_data(config_file, str(out), force=True)  # --force allows rerun


def test_gen_data_digest_deterministic(config_file, tmp_path):
    m1 = cmd_gen_data(config_file, str(tmp_path / "d1"))
    m2 = cmd_gen_data(config_file, str(tmp_path / "d2"))
    assert m1["digest"] == m2["digest"]


def test_pretrain_emits_checkpoints_and_log(config_file, tmp_path):
    out = tmp_path / "ckpt"
    payload = cmd_pretrain(config_file, str(out))
    for name in ("encoder.params", "decoder_init.params", "decoder.params",
                 "pretrain_log.json", "transcript.log"):
        assert (out / name).exists()
    assert payload["rounds"] == 1
    # the checkpoint parses as a ParamSet
    ps = ParamSet.load(out / "encoder.params")
    assert "enc1.w" in ps


def test_pretrain_improves_l1(tmp_path):
    cfg = dict(TINY)
    cfg["pretrain"] = {"pool_images": 12, "pool_epochs": 4, "rounds": 6,
                       "local_steps": 5, "batch_size": 4}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    payload = cmd_pretrain(str(path), str(tmp_path / "ck"))
    hist = payload["val_l1_per_round"]
    assert hist[-1] < hist[0]


def test_pretrain_zero_rounds_keeps_decoder_at_init(config_file, tmp_path):
    out = tmp_path / "ck0"
    cmd_pretrain(config_file, str(out), rounds=0)
    init = (out / "decoder_init.params").read_bytes()
    final = (out / "decoder.params").read_bytes()
    assert init == final


def test_run_writes_reports_and_checkpoints(config_file, tmp_path):
    out = tmp_path / "run"
    written = cmd_run(config_file, output=str(out))
    assert written == [str(out / "report.json")]
    for name in ("report.json", "report.csv", "transcript.log"):
        assert (out / name).exists()
    assert (out / "checkpoints" / "fettl_model.params").exists()
    assert (out / "checkpoints" / "fettl_template.params").exists()
    report = RunReport.load_json(out / "report.json")
    assert report.strategy == "fettl"
    assert "dice" in report.final_test["pooled"]


def test_run_multiple_seeds(config_file, tmp_path):
    out = tmp_path / "runs"
    written = cmd_run(config_file, seeds="1,2,3", output=str(out), rounds=1)
    assert len(written) == 3
    seeds = {RunReport.load_json(p).seed for p in written}
    assert seeds == {1, 2, 3}


def test_run_strategy_override_and_unknown(config_file, tmp_path):
    cmd_run(config_file, strategy="fedavg", output=str(tmp_path / "r1"))
    report = RunReport.load_json(tmp_path / "r1" / "report.json")
    assert report.strategy == "fedavg"
    with pytest.raises(ConfigError):
        cmd_run(config_file, strategy="fedmagic", output=str(tmp_path / "r2"))


def test_run_refuses_existing_output(config_file, tmp_path):
    out = tmp_path / "run"
    cmd_run(config_file, output=str(out), rounds=1)
    with pytest.raises(ConfigError):
        cmd_run(config_file, output=str(out), rounds=1)


def test_run_byte_identical_reports(config_file, tmp_path):
    cmd_run(config_file, output=str(tmp_path / "a"), rounds=1)
    cmd_run(config_file, output=str(tmp_path / "b"), rounds=1)
    ra = (tmp_path / "a" / "report.json").read_bytes()
    rb = (tmp_path / "b" / "report.json").read_bytes()
    assert ra == rb


def test_compare_self_is_null_result(config_file, tmp_path):
    out = tmp_path / "run"
    cmd_run(config_file, output=str(out), rounds=1)
    result = cmd_compare(str(out / "report.json"), str(out / "report.json"))
    assert result["p_value"] == 1.0
    assert result["mean_paired_diff"] == 0.0


def test_compare_mismatched_tasks_refused(tmp_path):
    a = RunReport(task="segmentation", strategy="x", seed=0, config_digest="d")
    b = RunReport(task="classification", strategy="y", seed=0, config_digest="d")
    a.save_json(tmp_path / "a.json")
    b.save_json(tmp_path / "b.json")
    with pytest.raises(ConfigError):
        cmd_compare(str(tmp_path / "a.json"), str(tmp_path / "b.json"))


def test_compare_different_strategies(config_file, tmp_path):
    cmd_run(config_file, strategy="fedavg", output=str(tmp_path / "a"), rounds=1)
    cmd_run(config_file, strategy="fedprox", output=str(tmp_path / "b"), rounds=1)
    result = cmd_compare(str(tmp_path / "a" / "report.json"),
                         str(tmp_path / "b" / "report.json"))
    p = result["p_value"]
    assert p is None or 0.0 < p <= 1.0
    assert result["n_pairs"] > 0


def test_main_exit_codes(config_file, tmp_path, capsys):
    assert main(["gen-data", "--config", config_file,
                 "--output", str(tmp_path / "d")]) == 0
    # config error -> 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"task": "segmentation", "unknown_key": 1}))
    assert main(["run", "--config", str(bad), "--output", str(tmp_path / "x")]) == 2
    # malformed JSON -> 2 with line info
    ugly = tmp_path / "ugly.json"
    ugly.write_text("{not json")
    assert main(["gen-data", "--config", str(ugly), "--output", str(tmp_path / "y")]) == 2
    # missing file -> 4 (I/O)
    assert main(["compare", str(tmp_path / "nope.json"), str(tmp_path / "nope.json")]) == 4


def test_main_run_and_compare_end_to_end(config_file, tmp_path, capsys):
    assert main(["run", "--config", config_file, "--rounds", "1",
                 "--output", str(tmp_path / "r1")]) == 0
    assert main(["run", "--config", config_file, "--strategy", "fedavg", "--rounds", "1",
                 "--output", str(tmp_path / "r2")]) == 0
    assert main(["compare", str(tmp_path / "r1" / "report.json"),
                 str(tmp_path / "r2" / "report.json")]) == 0
    out = capsys.readouterr().out
    assert "wilcoxon" in out
