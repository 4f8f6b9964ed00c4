import numpy as np
import pytest
import torch
from sklearn.linear_model import Perceptron

from priordistill.datasets import PreprocStats, build_handle
from priordistill.errors import ConfigError, TrainingError
from priordistill.experts import (
    NO_AUG,
    AugConfig,
    ExpertTrajectory,
    FeatureMap,
    augment,
    extract_features,
    load_trajectories,
    sample_expert_window,
    save_trajectories,
    train_expert,
)
from priordistill.nets import StudentArch


def separable_handle(rng, n=60):
    x = rng.normal(0, 0.3, size=(n, 8, 8, 1)).astype(np.float32)
    y = np.arange(n) % 2
    x[y == 1, :4] += 2.0  # class 1 is bright in the top half
    stats = PreprocStats(np.zeros(1, np.float32), np.ones(1, np.float32))
    return build_handle("sep", x, y, stats, 2)


def test_expert_fits_linearly_separable_data(rng):
    data = separable_handle(rng)
    oracle = Perceptron(max_iter=1000, random_state=0).fit(data.images.reshape(len(data), -1), data.labels)
    assert oracle.score(data.images.reshape(len(data), -1), data.labels) == 1.0
    arch = StudentArch(2, 1, 8, 1, 8)
    traj = train_expert(data, arch, epochs=15, lr=0.05, batch_size=16)
    assert traj.final_train_accuracy == 1.0


def test_checkpoint_schedule_and_determinism(digits16, tiny_arch):
    train, _ = digits16
    a = train_expert(train, tiny_arch, epochs=4, save_interval=2, seed=5)
    b = train_expert(train, tiny_arch, epochs=4, save_interval=2, seed=5)
    assert a.iterations == [0, 2, 4] and len(a) == 3
    assert all(torch.equal(p, q) for p, q in zip(a.checkpoints, b.checkpoints))
    assert not torch.equal(a.checkpoints[0], a.checkpoints[-1])


def test_train_experts_get_distinct_seeds(tiny_experts):
    assert len({e.seed for e in tiny_experts}) == len(tiny_experts)
    assert [e.expert_id for e in tiny_experts] == [0, 1]


def test_divergence_raises_training_error(digits16, tiny_arch):
    train, _ = digits16
    with pytest.raises(TrainingError) as info:
        train_expert(train, tiny_arch, epochs=3, lr=1e6, momentum=0.0, expert_id=9)
    assert info.value.expert_id == 9


def test_store_round_trip(tmp_path, tiny_experts):
    save_trajectories(tiny_experts, tmp_path)
    back = load_trajectories(tmp_path)
    assert len(back) == len(tiny_experts)
    for a, b in zip(tiny_experts, back):
        assert a.arch == b.arch and a.iterations == b.iterations and a.task_classes == b.task_classes
        assert all(torch.equal(p, q) for p, q in zip(a.checkpoints, b.checkpoints))
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        load_trajectories(tmp_path / "empty")


def test_window_sampling(tiny_experts):
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(50):
        w0, w1, meta = sample_expert_window(tiny_experts, 1, 2, rng)
        traj = tiny_experts[meta["expert_index"]]
        assert torch.equal(w0, traj.checkpoints[meta["start"]])
        assert torch.equal(w1, traj.checkpoints[meta["start"] + 2])
        seen.add((meta["expert_index"], meta["start"]))
    assert seen == {(0, 0), (0, 1), (1, 0), (1, 1)}
    with pytest.raises(ConfigError):
        sample_expert_window(tiny_experts, 2, 2, rng)  # 4 checkpoints cannot host start 2 + offset 2


def test_trajectory_validation(tiny_arch):
    w = torch.zeros(tiny_arch.param_count)
    with pytest.raises(ConfigError):
        ExpertTrajectory(tiny_arch, [w, w], 1, 0, tuple(range(10)), [3, 1])
    with pytest.raises(Exception):
        ExpertTrajectory(tiny_arch, [torch.zeros(3)], 1, 0, tuple(range(10)))


def test_feature_extraction(tiny_experts, digits16):
    train, _ = digits16
    x = torch.from_numpy(train.images[:5].copy()).permute(0, 3, 1, 2)
    f = extract_features(tiny_experts, FeatureMap(expert_id=1, checkpoint=-1), x)
    assert f.shape == (5, tiny_experts[1].arch.feature_dim())
    with pytest.raises(ConfigError):
        extract_features(tiny_experts, FeatureMap(expert_id=7), x)


def test_augment_identity_when_disabled():
    x = torch.randn(4, 1, 8, 8)
    assert torch.equal(augment(x, NO_AUG, torch.Generator()), x)
    y = augment(x, AugConfig(), torch.Generator().manual_seed(0))
    assert y.shape == x.shape and not torch.equal(x, y)
