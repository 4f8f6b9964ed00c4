"""Per-class diagonal Gaussian latent priors and their sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import torch

from .errors import ClassCoverageError, ConfigError

SampleMode = Literal["reparameterized", "mean-only"]


@dataclass(frozen=True)
class InitConfig:
    mu_scale: float = 1.0
    var0: float = 1.0


@dataclass
class LatentPriorSet:
    """``mu`` and ``log_var`` are ``[C, LPC, d]`` leaf tensors, one Gaussian per (class, prior)."""

    class_ids: tuple[int, ...]
    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 3:
            raise ConfigError(f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} must both be [C, LPC, d]")
        if self.mu.shape[0] != len(self.class_ids):
            raise ConfigError("mu first axis must match class_ids")
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    @property
    def class_count(self) -> int:
        return self.mu.shape[0]

    @property
    def priors_per_class(self) -> int:
        return self.mu.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[2]

    @property
    def param_count(self) -> int:
        return 2 * self.mu.numel()

    def row(self, class_id: int) -> int:
        try:
            return self._index[class_id]
        except KeyError:
            raise ClassCoverageError(f"class {class_id} has no priors") from None

    def variance(self) -> torch.Tensor:
        return self.log_var.exp()

    def detached(self) -> "LatentPriorSet":
        return LatentPriorSet(self.class_ids, self.mu.detach().clone(), self.log_var.detach().clone())


@dataclass
class LatentSample:
    z: torch.Tensor
    class_ids: torch.Tensor
    prior_index: torch.Tensor


def init_priors(class_ids: Sequence[int], lpc: int, d: int, init: InitConfig = InitConfig(), rng: int | torch.Generator = 0) -> LatentPriorSet:
    if lpc < 1 or d < 1:
        raise ConfigError("priors_per_class and latent_dim must be >= 1")
    if not init.var0 > 0:
        raise ConfigError(f"var0 must be positive, got {init.var0}", "distill.init.var0")
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng))
    ids = tuple(sorted(int(c) for c in class_ids))
    mu = torch.randn(len(ids), lpc, d, generator=gen) * init.mu_scale
    log_var = torch.full((len(ids), lpc, d), math.log(init.var0))
    return LatentPriorSet(ids, mu, log_var)


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * log_var) * eps


def sample_latents(
    priors: LatentPriorSet, class_id: int, n: int, mode: SampleMode = "reparameterized", rng: torch.Generator | None = None
) -> LatentSample:
    """Draw ``n`` latents for ``class_id``; the prior index is uniform per row."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    row = priors.row(class_id)
    idx = torch.randint(0, priors.priors_per_class, (n,), generator=rng)
    mu = priors.mu[row, idx]
    if mode == "mean-only":
        z = mu
    elif mode == "reparameterized":
        z = reparameterize(mu, priors.log_var[row, idx], torch.randn(mu.shape, generator=rng))
    else:
        raise ConfigError(f"unknown sample mode {mode!r}")
    return LatentSample(z, torch.full((n,), class_id, dtype=torch.long), idx)


def sample_every_prior(priors: LatentPriorSet, per_prior: int = 1, mode: SampleMode = "reparameterized", rng: torch.Generator | None = None):
    """``per_prior`` draws from every (class, prior); returns ``(z, local_class_index)`` ordered class-major."""
    c, lpc, d = priors.mu.shape
    mu = priors.mu.unsqueeze(2).expand(c, lpc, per_prior, d)
    if mode == "reparameterized":
        lv = priors.log_var.unsqueeze(2).expand(c, lpc, per_prior, d)
        z = reparameterize(mu, lv, torch.randn(mu.shape, generator=rng))
    else:
        z = mu
    labels = torch.arange(c).repeat_interleave(lpc * per_prior)
    return z.reshape(-1, d), labels


def sample_balanced(priors: LatentPriorSet, per_class: int, mode: SampleMode = "reparameterized", rng: torch.Generator | None = None):
    """``per_class`` draws for every class, prior index uniform per draw. Returns ``(z [C*per_class, d], local labels)``."""
    c, lpc, d = priors.mu.shape
    idx = torch.randint(0, lpc, (c, per_class), generator=rng)
    rows = torch.arange(c).unsqueeze(1).expand(c, per_class)
    mu = priors.mu[rows, idx]
    z = reparameterize(mu, priors.log_var[rows, idx], torch.randn(mu.shape, generator=rng)) if mode == "reparameterized" else mu
    return z.reshape(-1, d), rows.reshape(-1)


def freeze_to_codes(priors: LatentPriorSet) -> tuple[torch.Tensor, torch.Tensor]:
    """Means only: ``(codes [C*LPC, d], global class id per code)``. Variances are dropped."""
    c, lpc, d = priors.mu.shape
    codes = priors.mu.detach().reshape(c * lpc, d).clone()
    ids = torch.tensor(priors.class_ids, dtype=torch.long).repeat_interleave(lpc)
    return codes, ids
