import json
import os

import pytest

from priordistill import cli
from priordistill.bundle import MANIFEST
from priordistill.config import DATA_ROOT_ENV
from priordistill.evaluation import account_storage
import priordistill.federated as federated

TINY = """
dataset: {name: digits, preproc: {image_size: 16}}
experts: {n_experts: 1, epochs: 2, width: 8, block_count: 2}
distill:
  steps: 2
  decoder: {latent_dim: 8, projection_channels: 8, channels: [8, 8], output_shape: [16, 16, 1]}
  mtt: {N: 2, M: 1, max_start: 1}
  batch_per_class: 4
federated: {k: 2}
eval: {n_seeds: 1, epochs: 3, convnet_arch: {width: 8, block_count: 2}}
"""


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(TINY)
    return str(path)


@pytest.fixture(scope="module")
def distilled(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("bundle")
    assert cli.main(["distill", "--config", tiny_cfg, "--out", str(out)]) == 0
    return out


def test_distill_writes_bundle_with_config_echo(distilled):
    manifest = json.loads((distilled / MANIFEST).read_text())
    assert manifest["run_config"]["distill"]["steps"] == 2
    assert (distilled / "run_log.jsonl").exists()


def test_audit_matches_file_sizes(distilled, capsys):
    assert cli.main(["audit", str(distilled), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    on_disk = sum(p.stat().st_size for p in distilled.iterdir() if p.name != "run_log.jsonl")
    assert report["total_bytes"] == account_storage(distilled).total_bytes
    assert report["total_bytes"] <= on_disk
    assert cli.main(["audit", str(distilled)]) == 0
    assert "total" in capsys.readouterr().out


def test_eval_then_report(distilled, tmp_path, capsys):
    out = tmp_path / "reports"
    assert cli.main(["eval", str(distilled), "--out", str(out), "--baseline"]) == 0
    soft = out / "eval_convnet_soft.json"
    real = out / "eval_convnet_random_real.json"
    assert json.loads(soft.read_text())["architecture"] == "convnet"
    capsys.readouterr()
    plot = tmp_path / "rows.jsonl"
    assert cli.main(["report", str(soft), str(real), "--plot-data", str(plot)]) == 0
    assert len(plot.read_text().strip().splitlines()) == 2
    assert "random real" in capsys.readouterr().out


def test_eval_hard_labels_via_flag(distilled, tmp_path):
    assert cli.main(["eval", str(distilled), "--out", str(tmp_path), "--labels", "hard", "--seeds", "1"]) == 0
    assert (tmp_path / "eval_convnet_hard.json").exists()


def test_export_samples(distilled, tmp_path):
    assert cli.main(["export-samples", str(distilled), "--out", str(tmp_path), "--variations", "3", "--scale", "2"]) == 0
    pngs = sorted(p.name for p in tmp_path.glob("*.png"))
    assert "grid.png" in pngs and "class_0000.png" in pngs and len(pngs) == 11


def test_experts_train_then_distill(tiny_cfg, tmp_path):
    experts = tmp_path / "experts"
    assert cli.main(["experts-train", "--config", tiny_cfg, "--out", str(experts)]) == 0
    assert (experts / cli.RUN_CONFIG).exists()
    out = tmp_path / "bundle"
    assert cli.main(["distill", "--config", tiny_cfg, "--experts", str(experts), "--out", str(out), "--set", "distill.steps=1"]) == 0
    assert json.loads((out / MANIFEST).read_text())["run_config"]["distill"]["steps"] == 1


def test_config_error_exit_code(tiny_cfg, tmp_path, capsys):
    code = cli.main(["distill", "--config", tiny_cfg, "--out", str(tmp_path), "--set", "distill.mtt.bogus=1"])
    assert code == 1
    assert "distill.mtt.bogus" in capsys.readouterr().err


def test_missing_data_root_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    args = ["experts-train", "--set", "dataset.name=cifar10", "--data-root", str(tmp_path / "nowhere"), "--out", str(tmp_path)]
    assert cli.main(args) == 2
    assert "nowhere" in capsys.readouterr().err


def test_data_root_flag_beats_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / "env"))
    args = cli.build_parser().parse_args(["experts-train", "--out", "x", "--data-root", "/flag"])
    assert args.data_root == "/flag"
    cli.main(["experts-train", "--set", "dataset.name=cifar10", "--data-root", str(tmp_path / "flag"), "--out", str(tmp_path)])
    assert os.environ[DATA_ROOT_ENV] == str(tmp_path / "flag")


def test_missing_bundle_exit_code(tmp_path):
    assert cli.main(["audit", str(tmp_path / "absent")]) == 2


def test_federate_partial_then_resume(tiny_cfg, tmp_path, monkeypatch, capsys):
    real = federated.distill

    def flaky(data, experts, cfg, run_log=None):
        if 0 in data.class_ids:
            raise RuntimeError("worker lost")
        return real(data, experts, cfg, run_log)

    monkeypatch.setattr(federated, "distill", flaky)
    out = tmp_path / "fed"
    assert cli.main(["federate", "--config", tiny_cfg, "--out", str(out)]) == 3
    assert "resume" in capsys.readouterr().err
    monkeypatch.setattr(federated, "distill", real)
    assert cli.main(["federate", "--config", tiny_cfg, "--out", str(out)]) == 0
    assert cli.main(["eval", str(out), "--transfer", "--out", str(tmp_path / "r")]) == 0
    transfer = json.loads((tmp_path / "r" / "transfer.json").read_text())
    assert len(transfer["subtask_accuracies"]) == 2
    assert cli.main(["export-samples", str(out), "--out", str(tmp_path / "png"), "--variations", "2"]) == 0
    assert (tmp_path / "png" / "subtask_01" / "grid.png").exists()


def test_transfer_rejects_single_bundle(distilled, tmp_path):
    assert cli.main(["eval", str(distilled), "--transfer", "--out", str(tmp_path)]) == 1
