from dataclasses import replace

import pytest
import torch

from conftest import TINY_SPEC
from priordistill.bundle import DistilledBundle, serialize_bundle
from priordistill.decoder import build_decoder, buffer_count, param_count
from priordistill.errors import ConfigError
from priordistill.evaluation import (
    DownstreamConfig,
    EvalReport,
    FixedSource,
    StorageReport,
    account_storage,
    parse_tradeoff,
    prototype_storage,
    random_real_baseline,
    recovery_accuracy,
    soft_vs_hard_ablation,
    tradeoff_table,
)
from priordistill.latent import init_priors

FAST = DownstreamConfig(n_seeds=2, epochs=15, patience=5, convnet_arch=dict(width=16, block_count=2))


def test_priors_only_closed_form():
    r = StorageReport({"priors": 10 * 10 * 2 * 64 * 4}, 10, (32, 32, 3))
    assert r.total_bytes == 51_200 and r.total_mb_rounded == 0


def test_empty_components():
    r = StorageReport({}, 10, (32, 32, 3))
    assert r.total_bytes == 0 and r.total_mb_rounded == 0 and r.ipc_equivalent == 0


def test_ipc_equivalent_of_one_image_per_class():
    r = prototype_storage(10, (32, 32, 3), 10)
    assert r.ipc_equivalent == 1.0
    assert StorageReport.from_dict(r.to_dict()).to_dict() == r.to_dict()


def test_mb_rounding():
    assert StorageReport({"decoder": 2_500_001}, 1, (1, 1, 1)).total_mb_rounded == 3
    assert StorageReport({"decoder": 2_499_999}, 1, (1, 1, 1)).total_mb_rounded == 2


def test_directory_audit_matches_closed_form(tmp_path, tiny_bundle):
    serialize_bundle(tiny_bundle, tmp_path)
    disk = account_storage(tmp_path)
    mem = account_storage(tiny_bundle)
    for k in ("priors", "decoder", "soft_labels"):
        assert disk.components[k] == mem.components[k]
    assert mem.components["decoder"] == 4 * (param_count(TINY_SPEC) + buffer_count(TINY_SPEC))
    assert disk.components["routing"] == (tmp_path / "manifest.json").stat().st_size


def test_audit_rejects_truncated_payload(tmp_path, tiny_bundle):
    serialize_bundle(tiny_bundle, tmp_path)
    blob = tmp_path / "soft_labels.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ConfigError):
        account_storage(tmp_path)


def test_random_real_baseline_fits_budget(digits16):
    train, _ = digits16
    image_bytes = 16 * 16 * 1 * 4
    source, storage = random_real_baseline(train, 23 * image_bytes + 100, 0)
    assert len(source.images) == 23 and storage.total_bytes == 23 * image_bytes
    assert torch.bincount(source.labels).tolist() == [3, 3, 3] + [2] * 7
    with pytest.raises(ConfigError):
        random_real_baseline(train, 10, 0)


def test_report_determinism_and_shape(tiny_bundle, digits16):
    _, test = digits16
    a = recovery_accuracy(tiny_bundle, test, "convnet", FAST)
    b = recovery_accuracy(tiny_bundle, test, "convnet", FAST)
    assert a.accuracies == b.accuracies and a.epochs_run == b.epochs_run
    assert a.n_seeds == 2 and a.accuracy_std >= 0 and 0 <= a.accuracy_mean <= 1
    assert a.downstream_minutes > 0 and a.hardware
    one = recovery_accuracy(tiny_bundle, test, "convnet", replace(FAST, n_seeds=1))
    assert one.accuracy_std == 0.0


def test_untrained_bundle_is_near_chance(digits16):
    _, test = digits16
    pri = init_priors(range(10), 1, TINY_SPEC.latent_dim, rng=0)
    rand = DistilledBundle(pri, build_decoder(TINY_SPEC, 0), torch.full((10, 1, 10), 0.1), 0.01, manifest={"task_classes": list(range(10))})
    hard = recovery_accuracy(rand, test, "convnet", replace(FAST, n_seeds=5, label_mode="hard"))
    # ten decoded random latents carry almost no class information
    assert hard.accuracy_mean < 0.35


def test_uniform_soft_labels_carry_no_information(tiny_bundle, digits16):
    _, test = digits16
    uniform = replace(tiny_bundle, soft_labels=torch.full_like(tiny_bundle.soft_labels, 0.1))
    soft, hard = soft_vs_hard_ablation(uniform, test, "convnet", replace(FAST, n_seeds=3))
    assert soft.label_mode == "soft" and hard.label_mode == "hard"
    assert soft.accuracy_mean <= 0.2
    assert hard.accuracy_mean > soft.accuracy_mean


@pytest.mark.parametrize("arch", ["resnet", "vgg", "alexnet"])
def test_cross_architecture_uses_same_bundle(tmp_path, tiny_bundle, digits16, arch):
    _, test = digits16
    serialize_bundle(tiny_bundle, tmp_path)
    r = recovery_accuracy(tiny_bundle, test, arch, replace(FAST, n_seeds=1, epochs=2), bundle_dir=tmp_path)
    assert r.architecture == arch and r.bundle_hash


def test_shape_mismatch_is_config_error(tiny_bundle, digits16):
    _, test = digits16
    with pytest.raises(ConfigError):
        recovery_accuracy(tiny_bundle, test.restrict(range(4)), "convnet", FAST)
    with pytest.raises(ConfigError):
        recovery_accuracy(FixedSource(torch.zeros(2, 1, 16, 16), torch.zeros(2, dtype=torch.long), 10), test, "convnet", FAST)
    with pytest.raises(ConfigError):
        DownstreamConfig(n_seeds=0)


def _report(label, total, acc):
    return EvalReport(StorageReport({"decoder": total}, 10, (16, 16, 1)), 0.5, acc, 0.01, 5, "convnet", "soft", label=label)


def test_tradeoff_table_sorted_and_round_trips(tmp_path):
    reports = [_report("big", 900, 0.9), _report("small", 100, 0.5), _report("mid", 400, 0.7)]
    human, machine = tradeoff_table(reports)
    rows = parse_tradeoff(machine)
    assert [r["label"] for r in rows] == ["small", "mid", "big"]
    assert [r["total_bytes"] for r in rows] == sorted(r["total_bytes"] for r in rows)
    assert len(human.splitlines()) == 2 + 3
    _, again = tradeoff_table([_report("only", 5, 0.1)])
    assert len(parse_tradeoff(again)) == 1
    path = tmp_path / "r.json"
    reports[0].dump(path)
    assert EvalReport.load(path).to_dict() == reports[0].to_dict()
    with pytest.raises(ConfigError):
        tradeoff_table([])
