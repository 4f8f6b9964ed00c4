"""Storage accounting, downstream recovery accuracy and trade-off tables."""

from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import blobs
from .bundle import MANIFEST, DistilledBundle, bundle_hash, element_counts, hardware_descriptor, read_manifest
from .datasets import DatasetHandle, to_nchw
from .distiller import materialize
from .errors import ConfigError
from .nets import StudentArch, build_eval_net

log = logging.getLogger(__name__)

FP32 = 4
STORAGE_GROUPS = ("priors", "decoder", "soft_labels", "routing", "prototypes")


@dataclass
class StorageReport:
    components: dict[str, int]
    class_count: int
    image_shape: tuple[int, int, int]

    @property
    def total_bytes(self) -> int:
        return sum(self.components.values())

    @property
    def total_mb_rounded(self) -> int:
        return int(round(self.total_bytes / 1e6))

    @property
    def total_mb(self) -> float:
        return self.total_bytes / 1e6

    @property
    def ipc_equivalent(self) -> float:
        h, w, c = self.image_shape
        return self.total_bytes / (self.class_count * h * w * c * FP32)

    def to_dict(self) -> dict:
        return {
            "components": dict(self.components),
            "total_bytes": self.total_bytes,
            "total_mb_rounded": self.total_mb_rounded,
            "ipc_equivalent": self.ipc_equivalent,
            "class_count": self.class_count,
            "image_shape": list(self.image_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StorageReport":
        return cls(dict(d["components"]), d["class_count"], tuple(d["image_shape"]))


def _dir_storage(d: Path) -> tuple[dict[str, int], dict]:
    from .bundle import component_group

    m = read_manifest(d)
    comps = {g: 0 for g in ("priors", "decoder", "soft_labels")}
    for e in m["components"]:
        size = blobs.payload_size(d / e["file"])
        if size != e["length"] or e["length"] != FP32 * math.prod(e["shape"]):
            raise ConfigError(f"component {e['name']} payload {size} B disagrees with manifest {e['length']} B")
        group = component_group(e["name"])
        comps[group] = comps.get(group, 0) + size
    comps["routing"] = (d / MANIFEST).stat().st_size
    return comps, m


def account_storage(target) -> StorageReport:
    """Byte-exact storage of a bundle directory, aggregated directory, or in-memory bundle.

    Every tensor counts ``4 x elements``; manifest text counts under ``routing``.
    In-memory bundles have no manifest yet, so their ``routing`` is 0.
    """
    from .federated import ROUTING, AggregatedBundle

    if isinstance(target, DistilledBundle):
        counts = element_counts(target)
        comps = {k: FP32 * v for k, v in counts.items()}
        comps["routing"] = 0
        return StorageReport(comps, len(target.task_classes), target.image_shape)
    if isinstance(target, AggregatedBundle):
        comps: dict[str, int] = {}
        for b in target.sub_bundles:
            for k, v in account_storage(b).components.items():
                comps[k] = comps.get(k, 0) + v
        return StorageReport(comps, len(target.full_task_classes), target.image_shape)
    d = Path(target)
    if (d / ROUTING).exists():
        routing = json.loads((d / ROUTING).read_text())
        comps = {"routing": (d / ROUTING).stat().st_size}
        shape = None
        for sub in routing["subtasks"]:
            sub_comps, m = _dir_storage(d / sub["dir"])
            shape = tuple(m["decoder_spec"]["output_shape"])
            for k, v in sub_comps.items():
                comps[k] = comps.get(k, 0) + v
        return StorageReport(comps, len(routing["full_task_classes"]), shape)
    comps, m = _dir_storage(d)
    return StorageReport(comps, len(m["task_classes"]), tuple(m["decoder_spec"]["output_shape"]))


def prototype_storage(n_images: int, image_shape, class_count: int) -> StorageReport:
    h, w, c = image_shape
    return StorageReport({"prototypes": FP32 * n_images * h * w * c}, class_count, tuple(image_shape))


# --- training sources ---


class SampleSource(Protocol):
    class_count: int
    image_shape: tuple[int, int, int]
    learned_lr: float | None

    def epoch(self, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]: ...


class BundleSource:
    """Fresh decoder draws every epoch."""

    def __init__(self, bundle: DistilledBundle, samples_per_prior: int = 1, label_mode: str = "soft"):
        self.bundle, self.samples_per_prior, self.label_mode = bundle, samples_per_prior, label_mode
        self.class_count = len(bundle.task_classes)
        self.image_shape = bundle.image_shape
        self.learned_lr = bundle.alpha
        self.priors_per_class = bundle.priors.priors_per_class

    def epoch(self, gen):
        return materialize(self.bundle, self.samples_per_prior, self.label_mode, gen)


class FixedSource:
    """A fixed labeled image set (e.g. randomly selected real images)."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, class_count: int, learned_lr: float | None = None):
        self.images, self.labels = images, labels
        self.class_count = class_count
        self.image_shape = (images.shape[2], images.shape[3], images.shape[1])
        self.learned_lr = learned_lr
        self.priors_per_class = max(1, len(images) // class_count)

    def epoch(self, gen):
        return self.images, self.labels


def random_real_baseline(train: DatasetHandle, budget_bytes: int, rng=0) -> tuple[FixedSource, StorageReport]:
    """As many real training images as fit in ``budget_bytes``, spread evenly over classes.

    Leftover images (budget not divisible by class count) go to the lowest class ids.
    """
    h, w, c = train.image_shape
    n = budget_bytes // (FP32 * h * w * c)
    if n < 1:
        raise ConfigError(f"budget {budget_bytes} B does not fit a single image")
    gen = np.random.default_rng(rng)
    per = [n // train.class_count + (1 if k < n % train.class_count else 0) for k in range(train.class_count)]
    idx, labels = [], []
    for k, cnt in enumerate(per):
        if cnt:
            members = train.class_members(k)
            idx.extend(gen.choice(members, size=min(cnt, len(members)), replace=False).tolist())
            labels.extend([k] * min(cnt, len(members)))
    x = to_nchw(train.images[np.asarray(idx)])
    return FixedSource(x, torch.tensor(labels), train.class_count), prototype_storage(len(idx), train.image_shape, train.class_count)


# --- downstream training ---


@dataclass
class DownstreamConfig:
    n_seeds: int = 5
    epochs: int = 2000  # upper bound; early termination usually stops far sooner
    lr: float | None = None  # None: learned lr for convnet when the source has one, else fallback_lr
    fallback_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int | None = None  # None: one draw per prior per batch (C * LPC)
    samples_per_prior: int = 10
    label_mode: Literal["soft", "hard"] = "soft"
    patience: int = 30
    tol: float = 1e-3
    seed: int = 0
    convnet_arch: dict | None = None  # StudentArch kwargs (minus class_count)

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1", "eval.n_seeds")


@dataclass
class EvalReport:
    storage: StorageReport
    downstream_minutes: float
    accuracy_mean: float
    accuracy_std: float
    n_seeds: int
    architecture: str
    label_mode: str
    accuracies: list[float] = field(default_factory=list)
    epochs_run: list[int] = field(default_factory=list)
    label: str = ""
    bundle_hash: str | None = None
    hardware: dict = field(default_factory=dict)

    @property
    def minutes_per_model(self) -> float:
        return self.downstream_minutes / self.n_seeds

    def to_dict(self) -> dict:
        d = asdict(self)
        d["storage"] = self.storage.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["storage"] = StorageReport.from_dict(d["storage"])
        return cls(**d)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _test_accuracy(net, x: torch.Tensor, y: torch.Tensor, batch: int = 1024) -> float:
    net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            correct += (net(x[i : i + batch]).argmax(1) == y[i : i + batch]).sum().item()
    net.train()
    return correct / len(x)


def train_downstream(source, arch: str, cfg: DownstreamConfig, seed: int) -> tuple[torch.nn.Module, int]:
    gen = torch.Generator().manual_seed(seed)
    convnet_arch = None
    if arch == "convnet":
        kw = dict(cfg.convnet_arch or {})
        convnet_arch = StudentArch.for_image(source.class_count, source.image_shape, **kw)
    net = build_eval_net(arch, source.image_shape, source.class_count, gen, convnet_arch)
    lr = cfg.lr
    if lr is None:
        lr = source.learned_lr if (arch == "convnet" and source.learned_lr) else cfg.fallback_lr
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    batch = cfg.batch_size or source.class_count * getattr(source, "priors_per_class", 1)
    best, stale, epoch = math.inf, 0, 0
    net.train()
    for epoch in range(1, cfg.epochs + 1):
        x, y = source.epoch(gen)
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), batch):
            idx = order[i : i + batch]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        total /= len(x)
        if not math.isfinite(total):
            break
        if total < best - cfg.tol:
            best, stale = total, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return net, epoch


def recovery_accuracy(
    source,
    test_data: DatasetHandle,
    arch: str = "convnet",
    cfg: DownstreamConfig | None = None,
    storage: StorageReport | None = None,
    label: str = "",
    bundle_dir: str | Path | None = None,
) -> EvalReport:
    """Train ``cfg.n_seeds`` fresh networks on ``source``; test on ``test_data``.

    ``source`` may be a :class:`DistilledBundle` (wrapped with the configured
    label mode), an aggregated bundle, or any object with ``epoch(gen)``.
    """
    cfg = cfg or DownstreamConfig()
    if isinstance(source, DistilledBundle):
        storage = storage or account_storage(source)
        source = BundleSource(source, cfg.samples_per_prior, cfg.label_mode)
    else:
        from .federated import AggregatedBundle, AggregatedSource

        if isinstance(source, AggregatedBundle):
            storage = storage or account_storage(source)
            source = AggregatedSource(source, cfg.samples_per_prior, cfg.label_mode)
    if storage is None:
        raise ConfigError("storage report required for custom sources")
    if tuple(source.image_shape) != tuple(test_data.image_shape) or source.class_count != test_data.class_count:
        raise ConfigError(
            f"source ({source.image_shape}, {source.class_count} classes) does not match test data "
            f"({test_data.image_shape}, {test_data.class_count} classes)"
        )
    x_test, y_test = test_data.tensors()
    accs, epochs = [], []
    start = time.perf_counter()
    for s in range(cfg.n_seeds):
        net, ep = train_downstream(source, arch, cfg, cfg.seed + 1000 * s)
        accs.append(_test_accuracy(net, x_test, y_test))
        epochs.append(ep)
    minutes = (time.perf_counter() - start) / 60
    report = EvalReport(
        storage=storage,
        downstream_minutes=minutes,
        accuracy_mean=float(np.mean(accs)),
        accuracy_std=float(np.std(accs)),
        n_seeds=cfg.n_seeds,
        architecture=arch,
        label_mode=cfg.label_mode if hasattr(source, "label_mode") else "hard",
        accuracies=accs,
        epochs_run=epochs,
        label=label,
        bundle_hash=bundle_hash(bundle_dir) if bundle_dir else None,
        hardware=hardware_descriptor(),
    )
    log.info("%s [%s/%s]: %.2f%% +- %.2f", label or arch, arch, report.label_mode, 100 * report.accuracy_mean, 100 * report.accuracy_std)
    return report


def soft_vs_hard_ablation(bundle, test_data: DatasetHandle, arch: str = "convnet", cfg: DownstreamConfig | None = None):
    cfg = cfg or DownstreamConfig()
    soft = recovery_accuracy(bundle, test_data, arch, _with(cfg, label_mode="soft"), label="soft labels")
    hard = recovery_accuracy(bundle, test_data, arch, _with(cfg, label_mode="hard"), label="hard labels")
    return soft, hard


def _with(cfg: DownstreamConfig, **kw) -> DownstreamConfig:
    d = asdict(cfg)
    d.update(kw)
    return DownstreamConfig(**d)


# --- trade-off table ---

_COLUMNS = ("label", "architecture", "label_mode", "total_bytes", "storage_mb", "ipc_equivalent", "minutes", "accuracy_mean", "accuracy_std")


def tradeoff_rows(reports: Sequence[EvalReport]) -> list[dict]:
    if not reports:
        raise ConfigError("need at least one report")
    rows = [
        {
            "label": r.label or r.architecture,
            "architecture": r.architecture,
            "label_mode": r.label_mode,
            "total_bytes": r.storage.total_bytes,
            "storage_mb": r.storage.total_mb_rounded,
            "ipc_equivalent": round(r.storage.ipc_equivalent, 4),
            "minutes": round(r.downstream_minutes, 4),
            "accuracy_mean": round(r.accuracy_mean, 6),
            "accuracy_std": round(r.accuracy_std, 6),
        }
        for r in reports
    ]
    return sorted(rows, key=lambda row: row["total_bytes"])


def tradeoff_table(reports: Sequence[EvalReport]) -> tuple[str, str]:
    """Returns ``(human table, JSON-lines rows)`` sorted by storage."""
    rows = tradeoff_rows(reports)
    header = f"{'label':<28} {'arch':<8} {'labels':<6} {'bytes':>12} {'MB':>4} {'~IPC':>7} {'minutes':>8} {'accuracy':>15}"
    lines = [header, "-" * len(header)]
    for r in rows:
        acc = f"{100 * r['accuracy_mean']:.2f} +- {100 * r['accuracy_std']:.2f}"
        lines.append(
            f"{r['label'][:28]:<28} {r['architecture']:<8} {r['label_mode']:<6} {r['total_bytes']:>12} {r['storage_mb']:>4} "
            f"{r['ipc_equivalent']:>7.2f} {r['minutes']:>8.2f} {acc:>15}"
        )
    machine = "".join(json.dumps({k: r[k] for k in _COLUMNS}) + "\n" for r in rows)
    return "\n".join(lines), machine


def parse_tradeoff(machine: str) -> list[dict]:
    return [json.loads(line) for line in io.StringIO(machine) if line.strip()]
