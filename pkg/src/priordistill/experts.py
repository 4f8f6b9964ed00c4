"""Expert training, trajectory storage, window sampling and ψ feature extraction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import blobs
from .datasets import DatasetHandle
from .errors import ConfigError, ShapeError, TrainingError
from .nets import StudentArch, convnet_features, convnet_forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugConfig:
    flip: bool = True
    rotate_deg: float = 10.0
    translate: float = 0.1
    brightness: float = 0.1
    contrast: float = 0.1

    @property
    def enabled(self) -> bool:
        return bool(self.flip or self.rotate_deg or self.translate or self.brightness or self.contrast)


NO_AUG = AugConfig(False, 0.0, 0.0, 0.0, 0.0)


@dataclass
class ExpertTrajectory:
    arch: StudentArch
    checkpoints: list[torch.Tensor]
    save_interval: int
    expert_id: int
    task_classes: tuple[int, ...]
    iterations: list[int] = field(default_factory=list)
    seed: int | None = None
    final_train_accuracy: float | None = None

    def __post_init__(self):
        if not self.iterations:
            self.iterations = [i * self.save_interval for i in range(len(self.checkpoints))]
        if any(b <= a for a, b in zip(self.iterations, self.iterations[1:])):
            raise ConfigError("trajectory checkpoints must be strictly ordered")
        dims = {c.numel() for c in self.checkpoints}
        if len(dims) > 1 or (dims and dims.pop() != self.arch.param_count):
            raise ShapeError("checkpoint dimensionality differs from arch parameter count")
        if len(self.task_classes) != self.arch.class_count:
            raise ConfigError("task_classes length must equal arch.class_count")

    def __len__(self) -> int:
        return len(self.checkpoints)


@dataclass(frozen=True)
class FeatureMap:
    expert_id: int = 0
    checkpoint: int = -1
    tap: int | None = None


def augment(x: torch.Tensor, aug: AugConfig, gen: torch.Generator) -> torch.Tensor:
    """Random flip / rotation / translation in one affine resample, then brightness/contrast jitter."""
    if not aug.enabled:
        return x
    n = x.shape[0]
    u = lambda: torch.rand(n, generator=gen) * 2 - 1  # noqa: E731
    theta = u() * math.radians(aug.rotate_deg)
    sx = torch.ones(n)
    if aug.flip:
        sx = torch.where(torch.rand(n, generator=gen) < 0.5, -1.0, 1.0)
    cos, sin = torch.cos(theta), torch.sin(theta)
    mat = torch.stack(
        [torch.stack([cos * sx, -sin, u() * aug.translate * 2], 1), torch.stack([sin * sx, cos, u() * aug.translate * 2], 1)], 1
    )
    grid = F.affine_grid(mat.to(x.dtype), list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, padding_mode="border", align_corners=False)
    if aug.brightness or aug.contrast:
        mean = out.mean(dim=(1, 2, 3), keepdim=True)
        c = 1 + u().view(n, 1, 1, 1) * aug.contrast
        b = u().view(n, 1, 1, 1) * aug.brightness
        out = (out - mean) * c + mean + b
    return out


def accuracy(arch: StudentArch, flat: torch.Tensor, x: torch.Tensor, y: torch.Tensor, batch: int = 1024) -> float:
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            correct += (convnet_forward(arch, flat, x[i : i + batch]).argmax(1) == y[i : i + batch]).sum().item()
    return correct / max(1, len(x))


def train_expert(
    data: DatasetHandle,
    arch: StudentArch,
    epochs: int,
    save_interval: int = 1,
    aug: AugConfig = NO_AUG,
    seed: int = 0,
    expert_id: int = 0,
    lr: float = 0.01,
    batch_size: int = 256,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> ExpertTrajectory:
    if save_interval < 1:
        raise ConfigError("save_interval must be >= 1", "experts.save_interval")
    if arch.class_count != data.class_count:
        raise ConfigError(f"arch has {arch.class_count} classes, dataset has {data.class_count}")
    gen = torch.Generator().manual_seed(seed)
    x, y = data.tensors()
    w = init_params(arch, gen).requires_grad_(True)
    opt = torch.optim.SGD([w], lr=lr, momentum=momentum, weight_decay=weight_decay)
    checkpoints, iterations = [w.detach().clone()], [0]
    for epoch in range(1, epochs + 1):
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            idx = order[i : i + batch_size]
            loss = F.cross_entropy(convnet_forward(arch, w, augment(x[idx], aug, gen)), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"expert {expert_id} diverged at epoch {epoch}", expert_id)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if epoch % save_interval == 0:
            checkpoints.append(w.detach().clone())
            iterations.append(epoch)
    acc = accuracy(arch, checkpoints[-1], x, y)
    if epochs and acc <= 1.0 / data.class_count:
        log.warning("expert %d final train accuracy %.3f is not above chance", expert_id, acc)
    return ExpertTrajectory(arch, checkpoints, save_interval, expert_id, tuple(data.class_ids), iterations, seed, acc)


def train_experts(
    data: DatasetHandle,
    arch: StudentArch,
    n_experts: int,
    epochs: int,
    save_interval: int = 1,
    aug: AugConfig = NO_AUG,
    rng: int = 0,
    **train_kw,
) -> list[ExpertTrajectory]:
    if n_experts < 1:
        raise ConfigError("n_experts must be >= 1", "experts.n_experts")
    seeds = np.random.SeedSequence(rng).generate_state(n_experts)
    out = []
    for i, s in enumerate(seeds):
        traj = train_expert(data, arch, epochs, save_interval, aug, int(s), i, **train_kw)
        log.info("expert %d: %d checkpoints, train acc %.3f", i, len(traj), traj.final_train_accuracy or 0.0)
        out.append(traj)
    return out


def sample_expert_window(trajectories: Sequence[ExpertTrajectory], max_start: int, M: int, rng=None):
    """Pick an expert uniformly and a start index ``t`` uniformly in ``[0, max_start]``.

    Returns ``(w_t, w_{t+M}, meta)`` where meta has ``expert_id``, ``expert_index`` and ``start``.
    """
    if M < 1:
        raise ConfigError("M must be >= 1", "distill.mtt.M")
    if max_start < 0:
        raise ConfigError("max_start must be >= 0", "distill.mtt.max_start")
    shortest = min(len(t) for t in trajectories)
    if shortest < max_start + M + 1:
        raise ConfigError(
            f"window max_start={max_start} + M={M} needs {max_start + M + 1} checkpoints, shortest trajectory has {shortest}",
            "distill.mtt",
        )
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    e = int(gen.integers(0, len(trajectories)))
    t = int(gen.integers(0, max_start + 1))
    traj = trajectories[e]
    return traj.checkpoints[t], traj.checkpoints[t + M], {"expert_index": e, "expert_id": traj.expert_id, "start": t}


def extract_features(trajectory_pool: Sequence[ExpertTrajectory], tap: FeatureMap, x: torch.Tensor) -> torch.Tensor:
    """ψ(x): flattened activations at ``tap.tap`` under the selected checkpoint.

    Instance/layer norm have no running statistics, so there is no train/eval distinction.
    """
    traj = next((t for t in trajectory_pool if t.expert_id == tap.expert_id), None)
    if traj is None:
        raise ConfigError(f"no expert with id {tap.expert_id}")
    return convnet_features(traj.arch, traj.checkpoints[tap.checkpoint], x, tap.tap)


# --- trajectory store: one directory per expert, one fp32 blob per checkpoint ---


def save_trajectory(traj: ExpertTrajectory, root: Path) -> Path:
    d = Path(root) / f"expert_{traj.expert_id:03d}"
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ckpt in enumerate(traj.checkpoints):
        name = f"ckpt_{i:04d}.bin"
        shape, nbytes, digest = blobs.write_blob(d / name, ckpt.numpy())
        entries.append({"file": name, "iteration": traj.iterations[i], "bytes": nbytes, "sha256": digest})
    manifest = {
        "expert_id": traj.expert_id,
        "arch": traj.arch.to_dict(),
        "save_interval": traj.save_interval,
        "task_classes": list(traj.task_classes),
        "seed": traj.seed,
        "final_train_accuracy": traj.final_train_accuracy,
        "checkpoints": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_trajectory(d: Path) -> ExpertTrajectory:
    d = Path(d)
    m = json.loads((d / "manifest.json").read_text())
    ckpts = [torch.from_numpy(blobs.read_blob(d / e["file"], e["sha256"], e["file"]).copy()) for e in m["checkpoints"]]
    return ExpertTrajectory(
        StudentArch(**m["arch"]),
        ckpts,
        m["save_interval"],
        m["expert_id"],
        tuple(m["task_classes"]),
        [e["iteration"] for e in m["checkpoints"]],
        m.get("seed"),
        m.get("final_train_accuracy"),
    )


def save_trajectories(trajs: Sequence[ExpertTrajectory], root: Path) -> None:
    for t in trajs:
        save_trajectory(t, root)


def load_trajectories(root: Path) -> list[ExpertTrajectory]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("expert_"))
    if not dirs:
        raise FileNotFoundError(f"no expert trajectories under {root}")
    return [load_trajectory(p) for p in dirs]
