import json

import pytest

from switch_attention.harness.cli import main
from switch_attention.harness.configuration import SEED_ENVIRONMENT_VARIABLE, ExperimentConfig
from switch_attention.harness.schedule import TrainConfig
from switch_attention.harness.synthetic_data import DataConfig
from switch_attention.model.config import ModelConfig

from ..utils_for_tests import write_raw_checkpoint


@pytest.fixture(autouse=True)
def no_seed_environment(monkeypatch):
    monkeypatch.delenv(SEED_ENVIRONMENT_VARIABLE, raising=False)


@pytest.fixture
def config_file(tmp_path) -> str:
    training = TrainConfig(total_steps=4, batch_size=2, seq_len=16, warmup_steps=1, log_every=1)
    config = ExperimentConfig(
        model=ModelConfig.toy(window=4),
        pretrain=training,
        cpt=training,
        data=DataConfig(niah_context_lengths=[12], niah_depths=[0.0, 100.0], niah_samples=1, eval_batches=1),
    )
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config.to_json()))
    return str(path)


def parse(line: str) -> dict:
    return dict(item.split("=", 1) for item in line.split())


def test_cost_at_position_32(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(ExperimentConfig(model=ModelConfig.toy(window=16)).to_json()))
    for gates, expected in (("all_swa", "16.0"), ("all_full", "32.0")):
        assert main(["cost", "--config", str(path), "--gates", gates, "--pos", "32"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert parse(lines[0]) == {"pos": "32", "mem_access": expected, "window": "16"}
        assert parse(lines[1])["gates"] == gates


def test_cost_writes_its_table(tmp_path, config_file, capsys):
    out = tmp_path / "cost"
    assert main(["cost", "--config", config_file, "--gates", "alternating", "--pos", "2", "8", "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [parse(line)["pos"] for line in lines[:2]] == ["2", "8"]
    assert parse(lines[1])["mem_access"] == "6.0"
    assert len((out / "cost.csv").read_text().splitlines()) == 1 + 8


def test_continual_pretraining_needs_a_donor(config_file):
    with pytest.raises(SystemExit) as exit_info:
        main(["cpt", "--config", config_file])
    assert exit_info.value.code == 2


def test_selftest_command(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 8
    assert all(" status=ok" in line for line in lines)


def test_errors_become_one_line_on_stderr(tmp_path, config_file, capsys):
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(b"NOTACKPT" + bytes(16))
    assert main(["eval-ppl", "--config", config_file, "--checkpoint", str(broken)]) == 1
    error = capsys.readouterr().err.strip().splitlines()[-1]
    assert error.startswith("error=CheckpointManifestError message=")
    assert main(["cost", "--config", config_file, "--gates", "sometimes"]) == 1
    assert "error=ConfigurationError" in capsys.readouterr().err


def test_checkpoint_without_model_config_is_a_clean_error(tmp_path, config_file, capsys):
    broken = tmp_path / "headless.ckpt"
    write_raw_checkpoint(broken, {"version": 1}, [])
    assert main(["generate", "--config", config_file, "--checkpoint", str(broken), "--prompt", "1,2"]) == 1
    error = capsys.readouterr().err.strip().splitlines()[-1]
    assert error.startswith("error=CheckpointManifestError message=")


def test_full_pipeline(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    common = ["--config", config_file, "--out", str(out), "--seed", "1"]

    assert main(["pretrain-full", *common]) == 0
    assert parse(capsys.readouterr().out.splitlines()[-1])["steps"] == "4"
    assert (out / "donor.ckpt").exists() and (out / "loss.csv").exists()

    assert main(["cpt", *common, "--donor", str(out / "donor.ckpt")]) == 0
    assert parse(capsys.readouterr().out.splitlines()[-1])["mode"] == "swiattn"
    checkpoint = str(out / "swiattn.ckpt")

    assert main(["cpt", *common, "--donor", str(out / "donor.ckpt"), "--mode", "full_only"]) == 1
    assert "error=ConfigurationError" in capsys.readouterr().err

    assert main(["eval-ppl", *common, "--checkpoint", checkpoint]) == 0
    values = parse(capsys.readouterr().out.splitlines()[-1])
    assert float(values["ppl"]) > 1.0
    assert main(["eval-ppl", *common, "--checkpoint", checkpoint, "--mode", "swa_only"]) == 0
    assert parse(capsys.readouterr().out.splitlines()[-1])["mode"] == "swa_only"

    assert main(["generate", *common, "--checkpoint", checkpoint, "--prompt", "1,8,9", "--max-new", "3"]) == 0
    assert len(parse(capsys.readouterr().out.splitlines()[-1])["tokens"].split(",")) == 3
    assert len((out / "gates.csv").read_text().splitlines()) == 1 + 2 * 2

    assert main(["niah", *common, "--checkpoint", checkpoint]) == 0
    summary = [parse(line) for line in capsys.readouterr().out.splitlines()]
    assert sum(int(line["instances"]) for line in summary) == 2
    assert len((out / "niah.csv").read_text().splitlines()) == 1 + 2

    assert main(["route-stats", *common, "--checkpoint", checkpoint, "--source", "niah"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [parse(line)["layer"] for line in lines[:2]] == ["0", "1"]
    assert "overall_full_ratio" in parse(lines[2])

    assert main(["cost", *common, "--gates", "corpus", "--checkpoint", checkpoint]) == 0
    values = parse(capsys.readouterr().out.splitlines()[0])
    assert values["pos"] == "16"
    assert 4.0 <= float(values["mem_access"]) <= 16.0
    assert main(["cost", *common, "--gates", "simple", "--checkpoint", checkpoint]) == 1
    assert "error=EmptyCostReportError" in capsys.readouterr().err


def test_measured_costs_need_a_model(config_file, capsys):
    assert main(["cost", "--config", config_file, "--gates", "corpus"]) == 1
    assert "error=ConfigurationError" in capsys.readouterr().err
