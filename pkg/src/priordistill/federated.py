"""Class-space task decomposition: distill sub-tasks independently, then aggregate."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bundle import FORMAT_VERSION, DistilledBundle, deserialize_bundle, serialize_bundle
from .datasets import ClassPartition, DatasetHandle
from .distiller import DistillConfig, distill, materialize
from .errors import ConfigError, IncompatibleVersionError, PartialResultError
from .experts import NO_AUG, AugConfig, ExpertTrajectory, train_experts
from .nets import StudentArch

log = logging.getLogger(__name__)

ROUTING = "routing.json"
DONE = "DONE"

# classes per sub-task above which a decoder size class was observed not to converge
DECODER_CLASS_LIMIT = {"S": 200, "M": 200, "L": 1000}


def derive_seed(global_seed: int, subtask_id: int) -> int:
    digest = hashlib.sha256(f"{global_seed}:{subtask_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class ExpertPlan:
    n_experts: int = 2
    epochs: int = 10
    save_interval: int = 1
    aug: AugConfig = NO_AUG
    width: int = 32
    block_count: int | None = None
    norm: str = "instance"
    lr: float = 0.01
    batch_size: int = 128
    seed: int = 0

    def arch(self, data: DatasetHandle) -> StudentArch:
        kw = {"width": self.width, "norm": self.norm}
        if self.block_count is not None:
            kw["block_count"] = self.block_count
        return StudentArch.for_image(data.class_count, data.image_shape, **kw)

    def train(self, data: DatasetHandle, seed: int) -> list[ExpertTrajectory]:
        return train_experts(
            data, self.arch(data), self.n_experts, self.epochs, self.save_interval, self.aug, seed, lr=self.lr, batch_size=self.batch_size
        )


@dataclass
class FederatedPlan:
    partition: ClassPartition
    distill: DistillConfig
    experts: ExpertPlan = field(default_factory=ExpertPlan)
    seed: int = 0

    @property
    def subtask_ids(self) -> list[int]:
        return list(range(self.partition.k))

    def validate(self, class_count: int) -> None:
        covered = sorted(c for s in self.partition.subsets for c in s)
        if covered != list(range(class_count)):
            raise ConfigError(f"partition does not cover classes 0..{class_count - 1}", "federated.partition")
        size_class = self.distill.decoder if isinstance(self.distill.decoder, str) else self.distill.decoder.size_class
        limit = DECODER_CLASS_LIMIT.get(size_class)
        biggest = max(len(s) for s in self.partition.subsets)
        if limit is not None and biggest > limit:
            warnings.warn(f"decoder size {size_class} may not converge on a {biggest}-class sub-task (limit {limit})", stacklevel=2)


@dataclass
class AggregatedBundle:
    sub_bundles: list[DistilledBundle]
    full_task_classes: tuple[int, ...]

    def __post_init__(self):
        self.routing: dict[int, int] = {}
        for i, b in enumerate(self.sub_bundles):
            for c in b.task_classes:
                if c in self.routing:
                    raise ConfigError(f"class {c} routed to sub-bundles {self.routing[c]} and {i}")
                self.routing[c] = i
        if sorted(self.routing) != sorted(self.full_task_classes):
            raise ConfigError("routing table does not cover the full class set exactly")

    @property
    def image_shape(self):
        return self.sub_bundles[0].image_shape

    def global_soft_labels(self, i: int) -> torch.Tensor:
        """Sub-bundle ``i``'s soft labels zero-padded to full-task width."""
        b = self.sub_bundles[i]
        local = b.soft_labels
        c, lpc, width = local.shape
        if width == len(self.full_task_classes) and width != len(b.task_classes):
            return local  # already full width (regenerated by a full-task expert)
        out = torch.zeros(c, lpc, len(self.full_task_classes))
        cols = [self.full_task_classes.index(g) for g in b.task_classes]
        if width != len(cols):
            raise ConfigError("sub-bundle soft label width differs from its class count")
        out[:, :, cols] = local
        return out


class AggregatedSource:
    """Concatenated draws from every sub-bundle with labels in full-task indices."""

    def __init__(self, agg: AggregatedBundle, samples_per_prior: int = 1, label_mode: str = "soft"):
        self.agg, self.samples_per_prior, self.label_mode = agg, samples_per_prior, label_mode
        self.class_count = len(agg.full_task_classes)
        self.image_shape = agg.image_shape
        alphas = [b.alpha for b in agg.sub_bundles]
        self.learned_lr = float(np.mean(alphas))
        self.priors_per_class = agg.sub_bundles[0].priors.priors_per_class
        self._maps = [torch.tensor([agg.full_task_classes.index(g) for g in b.task_classes]) for b in agg.sub_bundles]
        self._soft = [agg.global_soft_labels(i) for i in range(len(agg.sub_bundles))] if label_mode == "soft" else None

    def epoch(self, gen):
        xs, ys = [], []
        for i, b in enumerate(self.agg.sub_bundles):
            x, local = materialize(b, self.samples_per_prior, "hard", gen)
            xs.append(x)
            if self.label_mode == "hard":
                ys.append(self._maps[i][local])
            else:
                c, lpc, w = self._soft[i].shape
                ys.append(self._soft[i].reshape(c * lpc, w).repeat_interleave(self.samples_per_prior, 0))
        return torch.cat(xs), torch.cat(ys)


# --- serialization ---


def serialize_aggregated(
    agg: AggregatedBundle, directory: str | Path, subdirs: Sequence[str] | None = None, meta: dict | None = None, overwrite: bool = False
) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    subdirs = list(subdirs or [f"subtask_{i:02d}" for i in range(len(agg.sub_bundles))])
    for b, name in zip(agg.sub_bundles, subdirs):
        if overwrite or not (d / name / DONE).exists():
            serialize_bundle(b, d / name)
            (d / name / DONE).write_text("")
    routing = {
        "format_version": FORMAT_VERSION,
        "kind": "aggregated",
        "full_task_classes": list(agg.full_task_classes),
        "subtasks": [{"id": i, "dir": n, "classes": list(b.task_classes)} for i, (b, n) in enumerate(zip(agg.sub_bundles, subdirs))],
        **(meta or {}),
    }
    (d / ROUTING).write_text(json.dumps(routing, sort_keys=True, separators=(",", ":")))
    return routing


def deserialize_aggregated(directory: str | Path) -> AggregatedBundle:
    d = Path(directory)
    routing = json.loads((d / ROUTING).read_text())
    if routing.get("format_version") != FORMAT_VERSION:
        raise IncompatibleVersionError(f"aggregated format {routing.get('format_version')} is not supported")
    subs = [deserialize_bundle(d / s["dir"]) for s in routing["subtasks"]]
    return AggregatedBundle(subs, tuple(routing["full_task_classes"]))


def load_any(directory: str | Path):
    d = Path(directory)
    return deserialize_aggregated(d) if (d / ROUTING).exists() else deserialize_bundle(d)


# --- orchestration ---


def _subtask_done(d: Path) -> bool:
    if not (d / DONE).exists():
        return False
    try:
        deserialize_bundle(d)
    except Exception:  # corrupted partial output is recomputed
        return False
    return True


def run_subtask(data: DatasetHandle, classes: Sequence[int], plan: FederatedPlan, subtask_id: int, out_dir: str | Path) -> str:
    """Restrict, train local experts, distill, serialize. Returns the output directory."""
    out = Path(out_dir)
    if _subtask_done(out):
        log.info("subtask %d already complete, reusing %s", subtask_id, out)
        return str(out)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    seed = derive_seed(plan.seed, subtask_id)
    local = data.restrict(classes)
    experts = plan.experts.train(local, seed)
    cfg = replace(plan.distill, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    bundle = distill(local, experts, cfg, run_log=out / "run_log.jsonl")
    bundle.manifest["subtask_id"] = subtask_id
    serialize_bundle(bundle, out)
    (out / DONE).write_text("")
    return str(out)


def run_federated(
    data: DatasetHandle, plan: FederatedPlan, workdir: str | Path, parallel: int = 1, meta: dict | None = None
) -> AggregatedBundle:
    """Distill every class subset independently (``parallel`` worker processes) and aggregate.

    Completed sub-tasks found in ``workdir`` are reused. If any sub-task fails,
    :class:`PartialResultError` names what finished so a rerun only redoes the rest.
    """
    plan.validate(data.class_count)
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    dirs = [work / f"subtask_{i:02d}" for i in plan.subtask_ids]
    global_classes = [[data.class_ids[c] for c in subset] for subset in plan.partition.subsets]
    completed, failed, errors = [], [], {}
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel, mp_context=get_context("spawn")) as pool:
            futures = {i: pool.submit(run_subtask, data, global_classes[i], plan, i, dirs[i]) for i in plan.subtask_ids}
            for i, fut in futures.items():
                try:
                    fut.result()
                    completed.append(i)
                except Exception as exc:  # noqa: BLE001 - reported through PartialResultError
                    failed.append(i)
                    errors[i] = exc
    else:
        for i in plan.subtask_ids:
            try:
                run_subtask(data, global_classes[i], plan, i, dirs[i])
                completed.append(i)
            except Exception as exc:  # noqa: BLE001
                failed.append(i)
                errors[i] = exc
    if failed:
        detail = "; ".join(f"subtask {i}: {errors[i]!r}" for i in failed)
        raise PartialResultError(f"completed subtasks {completed}, failed {failed}: {detail}", completed, failed)
    agg = AggregatedBundle([deserialize_bundle(d) for d in dirs], tuple(data.class_ids))
    serialize_aggregated(agg, work, [d.name for d in dirs], meta)
    return agg


def regenerate_soft_labels(agg: AggregatedBundle, full_experts: Sequence[ExpertTrajectory], expert_index: int = 0) -> AggregatedBundle:
    """Replace padded local labels with full-task expert softmax over every class.

    The sub-bundles then carry full-width labels; the routing is unchanged.
    """
    from .distiller import generate_soft_labels

    subs = []
    for b in agg.sub_bundles:
        soft = generate_soft_labels(b.priors, b.decoder, full_experts, expert_index)
        subs.append(replace(b, soft_labels=soft))
    return AggregatedBundle(subs, agg.full_task_classes)


@dataclass
class TransferMatrix:
    sub_reports: list
    full_report: object

    @property
    def subtask_accuracies(self) -> list[float]:
        return [r.accuracy_mean for r in self.sub_reports]

    @property
    def full_accuracy(self) -> float:
        return self.full_report.accuracy_mean

    @property
    def chg(self) -> float:
        """Full-task accuracy over mean sub-task accuracy."""
        return self.full_accuracy / float(np.mean(self.subtask_accuracies))

    def to_dict(self) -> dict:
        return {
            "subtask_accuracies": self.subtask_accuracies,
            "full_accuracy": self.full_accuracy,
            "chg": self.chg,
            "sub_reports": [r.to_dict() for r in self.sub_reports],
            "full_report": self.full_report.to_dict(),
        }


def evaluate_transfer(agg: AggregatedBundle, full_test: DatasetHandle, eval_cfg=None, arch: str = "convnet") -> TransferMatrix:
    """Each sub-bundle on its own sub-task test split, and the aggregate on the full test split."""
    from .evaluation import DownstreamConfig, recovery_accuracy

    eval_cfg = eval_cfg or DownstreamConfig()
    subs = []
    for i, b in enumerate(agg.sub_bundles):
        subs.append(recovery_accuracy(b, full_test.restrict(b.task_classes), arch, eval_cfg, label=f"subtask {i}"))
    full = recovery_accuracy(agg, full_test, arch, eval_cfg, label="aggregate")
    return TransferMatrix(subs, full)
