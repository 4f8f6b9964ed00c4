import json
import math

import pytest
import torch

from conftest import tiny_distill_config
from priordistill.bundle import serialize_bundle
from priordistill.distiller import Distiller, distill, generate_soft_labels, materialize
from priordistill.errors import ConfigError, DistillationAborted
from priordistill.objectives import LossWeights


def test_bundle_contents(tiny_bundle, digits16):
    train, _ = digits16
    b = tiny_bundle
    assert b.task_classes == train.class_ids
    assert b.priors.mu.shape == (10, 1, 8)
    assert b.soft_labels.shape == (10, 1, 10)
    torch.testing.assert_close(b.soft_labels.sum(-1), torch.ones(10, 1))
    assert b.alpha >= 1e-6
    assert b.manifest["config"]["steps"] == 3
    b.check()


def test_same_seed_gives_identical_blobs(tmp_path, digits16, tiny_experts):
    train, _ = digits16
    cfg = tiny_distill_config(steps=2)
    digests = []
    for name in ("a", "b"):
        m = serialize_bundle(distill(train, tiny_experts, cfg), tmp_path / name)
        digests.append([e["sha256"] for e in m["components"]])
    assert digests[0] == digests[1]
    other = serialize_bundle(distill(train, tiny_experts, tiny_distill_config(steps=2, seed=1)), tmp_path / "c")
    assert [e["sha256"] for e in other["components"]] != digests[0]


def test_fixed_mode_freezes_variance(digits16, tiny_experts):
    train, _ = digits16
    d = Distiller(train, tiny_experts, tiny_distill_config(mode="fixed"))
    lv0, mu0 = d.priors.log_var.clone(), d.priors.mu.detach().clone()
    b = d.run()
    assert torch.equal(b.priors.log_var, lv0)
    assert not torch.equal(b.priors.mu, mu0)
    assert b.sample_mode == "mean-only"


@pytest.mark.parametrize("weights", [LossWeights(1.0, 0.0), LossWeights(0.0, 1.0)])
def test_single_objective_runs(digits16, tiny_experts, weights):
    train, _ = digits16
    d = Distiller(train, tiny_experts, tiny_distill_config(steps=2, weights=weights))
    rec = d.step()
    if weights.w_mtt == 0:
        assert rec["d_mtt"] == 0.0 and rec["alpha"] == pytest.approx(0.01)
    else:
        assert rec["l_mmd"] == 0.0


def test_nan_steps_abort_with_last_good(digits16, tiny_experts, monkeypatch):
    train, _ = digits16
    d = Distiller(train, tiny_experts, tiny_distill_config(steps=20, nan_patience=2))
    good_mu = d.priors.mu.detach().clone()
    calls = {"n": 0}
    real_losses = d.losses

    def flaky():
        calls["n"] += 1
        d_mtt, l_mmd, meta = real_losses()
        if calls["n"] > 1:
            return d_mtt * math.nan, l_mmd, meta
        return d_mtt, l_mmd, meta

    monkeypatch.setattr(d, "losses", flaky)
    with pytest.raises(DistillationAborted) as info:
        d.run()
    assert info.value.step == 4  # one good step then three non-finite ones exceed patience 2
    assert info.value.last_good is not None
    assert not torch.equal(info.value.last_good.priors.mu, good_mu)  # the first (finite) update was kept


def test_run_log_records_each_step(tmp_path, digits16, tiny_experts):
    train, _ = digits16
    log = tmp_path / "log.jsonl"
    distill(train, tiny_experts, tiny_distill_config(steps=3), run_log=log)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert all(r["finite"] and r["d_mtt"] > 0 and r["l_mmd"] != 0 for r in rows)


def test_mismatched_experts_rejected(digits16, tiny_experts):
    train, _ = digits16
    with pytest.raises(ConfigError):
        Distiller(train.restrict(range(5)), tiny_experts, tiny_distill_config())
    with pytest.raises(ConfigError):
        Distiller(train, [], tiny_distill_config())
    with pytest.raises(ConfigError):
        tiny_distill_config(batch_per_class=1)
    with pytest.raises(ConfigError):
        Distiller(train, tiny_experts, tiny_distill_config(latent_dim=3))  # decoder expects 8


def test_materialize_modes(tiny_bundle):
    x, soft = materialize(tiny_bundle, 3, "soft", torch.Generator().manual_seed(0))
    assert x.shape == (30, 1, 16, 16) and soft.shape == (30, 10)
    assert x.abs().max() <= 1
    _, hard = materialize(tiny_bundle, 2, "hard", torch.Generator().manual_seed(0))
    assert hard.tolist() == [c for c in range(10) for _ in range(2)]


class Tripwire:
    def __getattr__(self, name):
        raise AssertionError("soft labels were read in hard-label mode")


def test_hard_mode_never_reads_soft_labels(tiny_bundle):
    from dataclasses import replace

    traced = replace(tiny_bundle, soft_labels=Tripwire())
    materialize(traced, 1, "hard")
    with pytest.raises(AssertionError):
        materialize(traced, 1, "soft")


def test_soft_labels_come_from_expert_softmax(tiny_bundle, tiny_experts):
    again = generate_soft_labels(tiny_bundle.priors, tiny_bundle.decoder, tiny_experts, 0)
    torch.testing.assert_close(again, tiny_bundle.soft_labels)
