"""Training losses: normalized trajectory distance, unbiased multi-kernel MMD², and their mix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F

from .datasets import DatasetHandle, sample_class_batch, to_nchw
from .errors import ClassCoverageError, ConfigError, DegenerateWindowError, EstimatorUndefinedError, NumericError


@dataclass(frozen=True)
class MTTConfig:
    N: int = 20  # student inner steps
    M: int = 2  # expert checkpoint offset
    alpha: float = 0.01  # initial inner learning rate (learned)
    max_start: int = 10

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ConfigError("N and M must be >= 1", "distill.mtt")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0", "distill.mtt.alpha")


@dataclass(frozen=True)
class KernelMixture:
    bandwidths: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)

    def __post_init__(self):
        if not self.bandwidths or any(not s > 0 for s in self.bandwidths):
            raise ConfigError("bandwidths must be a non-empty list of positive values", "distill.kernels")

    @property
    def K(self) -> int:
        return len(self.bandwidths)


@dataclass(frozen=True)
class LossWeights:
    w_mtt: float = 1.0
    w_mmd: float = 1.0

    def __post_init__(self):
        if self.w_mtt < 0 or self.w_mmd < 0:
            raise ConfigError("loss weights must be >= 0", "distill.weights")
        if self.w_mtt == 0 and self.w_mmd == 0:
            raise ConfigError("loss weights cannot both be zero", "distill.weights")


# --- trajectory matching ---


def normalized_distance(w_student: torch.Tensor, w_start: torch.Tensor, w_target: torch.Tensor) -> torch.Tensor:
    """``||w_student - w_target||² / ||w_start - w_target||²``."""
    denom = (w_start - w_target).pow(2).sum()
    if denom.item() == 0:
        raise DegenerateWindowError("expert window has zero displacement")
    return (w_student - w_target).pow(2).sum() / denom


def unroll_student(
    w_start: torch.Tensor,
    alpha: torch.Tensor,
    batches: Iterator[tuple[torch.Tensor, torch.Tensor]],
    steps: int,
    forward: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """``steps`` differentiable SGD steps from ``w_start``; ``batches`` yields ``(x, target)``.

    ``target`` may be integer class labels or probability rows.
    """
    w = w_start.detach().clone().requires_grad_(True)
    for _ in range(steps):
        x, y = next(batches)
        logits = forward(w, x)
        loss = F.cross_entropy(logits, y)
        (grad,) = torch.autograd.grad(loss, w, create_graph=True)
        w = w - alpha * grad
    if not torch.isfinite(w).all():
        raise NumericError("non-finite student parameters during unroll")
    return w


def mtt_loss(
    w_start: torch.Tensor,
    w_target: torch.Tensor,
    synth_sampler: Callable[[], tuple[torch.Tensor, torch.Tensor]],
    cfg: MTTConfig,
    forward: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    alpha: torch.Tensor | None = None,
) -> torch.Tensor:
    """Normalized distance between ``N`` student steps on synthetic data and the expert ``M`` checkpoints later."""
    if w_start.shape != w_target.shape:
        raise ConfigError("w_start and w_target differ in shape")
    if (w_start - w_target).pow(2).sum().item() == 0:
        raise DegenerateWindowError("expert window has zero displacement")
    alpha = torch.tensor(cfg.alpha, dtype=w_start.dtype) if alpha is None else alpha
    batches = iter(synth_sampler, None)
    w_end = unroll_student(w_start, alpha, batches, cfg.N, forward)
    return normalized_distance(w_end, w_start.detach(), w_target.detach())


# --- MMD ---


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aa = a.pow(2).sum(1, keepdim=True)
    bb = b.pow(2).sum(1, keepdim=True)
    return (aa + bb.T - 2 * a @ b.T).clamp_min(0)


def mixture_kernel(d2: torch.Tensor, bandwidths: Sequence[float]) -> torch.Tensor:
    return sum(torch.exp(-d2 / (2.0 * s * s)) for s in bandwidths)


def mmd2_unbiased(X: torch.Tensor, Y: torch.Tensor, kernels: KernelMixture = KernelMixture()) -> torch.Tensor:
    """Unbiased MMD² U-statistic with ``k = Σ_q exp(-||x - x'||² / 2σ_q²)``.

    ``1/(n(n-1)) Σ_{i≠j} k(x_i,x_j) - 2/(nm) Σ_{i,j} k(x_i,y_j) + 1/(m(m-1)) Σ_{i≠j} k(y_i,y_j)``
    """
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise EstimatorUndefinedError(f"unbiased MMD needs n, m >= 2 (got n={n}, m={m})")
    if X.shape[1:] != Y.shape[1:]:
        raise ConfigError(f"feature dims differ: {tuple(X.shape)} vs {tuple(Y.shape)}")
    X, Y = X.reshape(n, -1), Y.reshape(m, -1)
    bw = kernels.bandwidths
    kxx = mixture_kernel(_sq_dists(X, X), bw)
    kyy = mixture_kernel(_sq_dists(Y, Y), bw)
    kxy = mixture_kernel(_sq_dists(X, Y), bw)
    xx = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
    yy = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
    return xx + yy - 2.0 * kxy.mean()


def mmd_loss(
    real_features: Mapping[int, torch.Tensor],
    synth_features: Mapping[int, torch.Tensor],
    kernels: KernelMixture = KernelMixture(),
    classes: Sequence[int] | None = None,
) -> torch.Tensor:
    """Σ_c MMD²(ψ(D_c), ψ(S_c)). Real features are detached; gradient reaches the synthetic side only."""
    classes = sorted(real_features) if classes is None else list(classes)
    missing = [c for c in classes if c not in real_features or c not in synth_features]
    if missing:
        raise ClassCoverageError(f"classes {missing} missing on the real or synthetic side")
    return sum(mmd2_unbiased(real_features[c].detach(), synth_features[c], kernels) for c in classes)


def class_mmd_loss(
    real: DatasetHandle,
    synth_sampler: Callable[[int], tuple[torch.Tensor, torch.Tensor]],
    psi: Callable[[torch.Tensor], torch.Tensor],
    classes: Sequence[int],
    batch_per_class: int,
    kernels: KernelMixture = KernelMixture(),
    rng=None,
    unit_norm: bool = False,
) -> torch.Tensor:
    """Class-wise MMD in ψ space between real draws and a synthetic sampler.

    ``synth_sampler(per_class)`` returns ``(images NCHW, local labels)`` with
    ``per_class`` rows for every class. Real images are drawn per class with
    replacement from ``real`` using ``rng``, in the order of ``classes``.
    """
    if batch_per_class < 2:
        raise EstimatorUndefinedError("batch_per_class must be >= 2")
    real_x = [to_nchw(sample_class_batch(real, c, batch_per_class, rng)) for c in classes]
    sx, sy = synth_sampler(batch_per_class)
    with torch.no_grad():
        fr = psi(torch.cat(real_x))
    fs = psi(sx)
    if unit_norm:
        fr, fs = F.normalize(fr, dim=1), F.normalize(fs, dim=1)
    fr_by_class = dict(zip(classes, torch.split(fr, [len(r) for r in real_x])))
    fs_by_class = {c: fs[sy == c] for c in classes}
    return mmd_loss(fr_by_class, fs_by_class, kernels, classes)


def combined_loss(d_mtt, l_mmd, w: LossWeights):
    return w.w_mtt * d_mtt + w.w_mmd * l_mmd
