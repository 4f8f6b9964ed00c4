"""Joint optimization of latent priors, decoder and inner learning rate."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .bundle import DistilledBundle
from .datasets import DatasetHandle
from .decoder import Decoder, DecoderSpec, build_decoder, preset
from .errors import ConfigError, DegenerateWindowError, DistillationAborted, NumericError
from .experts import ExpertTrajectory, sample_expert_window
from .latent import InitConfig, LatentPriorSet, init_priors, sample_balanced, sample_every_prior
from .nets import convnet_features, convnet_forward
from .objectives import KernelMixture, LossWeights, MTTConfig, class_mmd_loss, combined_loss, mtt_loss

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    steps: int = 500
    priors_per_class: int = 1
    latent_dim: int | None = None  # None: decoder spec's latent dim
    decoder: DecoderSpec | str = "S"
    init: InitConfig = field(default_factory=InitConfig)
    outer_lr_priors: float = 0.05
    outer_lr_decoder: float = 0.01
    outer_lr_alpha: float = 1e-5
    outer_momentum: float = 0.5
    mtt: MTTConfig = field(default_factory=MTTConfig)
    kernels: KernelMixture = field(default_factory=KernelMixture)
    weights: LossWeights = field(default_factory=LossWeights)
    batch_per_class: int = 16
    mode: Literal["distributional", "fixed"] = "distributional"
    feature_tap: int | None = None
    unit_norm_features: bool = False
    label_expert: int = 0
    nan_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1", "distill.steps")
        for k in ("outer_lr_priors", "outer_lr_decoder", "outer_lr_alpha"):
            if not getattr(self, k) > 0:
                raise ConfigError("learning rates must be > 0", f"distill.{k}")
        if self.batch_per_class < 2:
            raise ConfigError("batch_per_class must be >= 2 for the unbiased MMD", "distill.batch_per_class")
        if self.mode not in ("distributional", "fixed"):
            raise ConfigError(f"unknown mode {self.mode!r}", "distill.mode")
        if self.priors_per_class < 1:
            raise ConfigError("priors_per_class must be >= 1", "distill.priors_per_class")

    def decoder_spec(self, image_shape) -> DecoderSpec:
        spec = preset(self.decoder, image_shape) if isinstance(self.decoder, str) else self.decoder
        if tuple(spec.output_shape) != tuple(image_shape):
            raise ConfigError(f"decoder output {spec.output_shape} != dataset image shape {tuple(image_shape)}", "distill.decoder")
        return spec.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.decoder, DecoderSpec):
            d["decoder"] = self.decoder.to_dict()
        return d


def generate_soft_labels(
    priors: LatentPriorSet, decoder: Decoder, experts: Sequence[ExpertTrajectory], expert_index: int = 0
) -> torch.Tensor:
    """Expert softmax on the decoded prior means: ``[C, LPC, C_task]``."""
    expert = experts[expert_index]
    c, lpc, d = priors.mu.shape
    with torch.no_grad():
        was = decoder.training
        decoder.eval()
        x = decoder(priors.mu.detach().reshape(c * lpc, d))
        decoder.train(was)
        probs = F.softmax(convnet_forward(expert.arch, expert.checkpoints[-1], x), dim=1)
    return probs.reshape(c, lpc, -1)


def materialize(
    bundle: DistilledBundle,
    samples_per_prior: int = 1,
    label_mode: Literal["soft", "hard"] = "soft",
    rng: torch.Generator | None = None,
):
    """Decode ``samples_per_prior`` draws per prior.

    Returns ``(images NCHW, targets)``: probability rows in soft mode, local class
    indices in hard mode. Hard mode never touches ``bundle.soft_labels``.
    """
    if samples_per_prior < 1:
        raise ConfigError("samples_per_prior must be >= 1")
    pri = bundle.priors
    with torch.no_grad():
        z, labels = sample_every_prior(pri, samples_per_prior, bundle.sample_mode, rng)
        was = bundle.decoder.training
        bundle.decoder.eval()
        x = bundle.decoder(z)
        bundle.decoder.train(was)
    if label_mode == "hard":
        return x, labels
    if label_mode != "soft":
        raise ConfigError(f"unknown label mode {label_mode!r}", "eval.label_mode")
    soft = bundle.soft_labels
    if soft is None:
        raise ConfigError("bundle has no soft labels")
    c, lpc = pri.class_count, pri.priors_per_class
    targets = soft.reshape(c * lpc, -1).repeat_interleave(samples_per_prior, dim=0)
    return x, targets


class Distiller:
    """One distillation run. State is owned here; :meth:`run` returns a bundle."""

    def __init__(self, data: DatasetHandle, experts: Sequence[ExpertTrajectory], cfg: DistillConfig, run_log: str | Path | None = None):
        if not experts:
            raise ConfigError("no expert trajectories supplied")
        for e in experts:
            if tuple(e.task_classes) != tuple(data.class_ids):
                raise ConfigError(f"expert {e.expert_id} was trained on classes {e.task_classes}, data has {data.class_ids}")
        self.data, self.experts, self.cfg = data, list(experts), cfg
        self.arch = experts[0].arch
        self.spec = cfg.decoder_spec(data.image_shape)
        d = cfg.latent_dim or self.spec.latent_dim
        if d != self.spec.latent_dim:
            raise ConfigError(f"latent_dim {d} != decoder latent dim {self.spec.latent_dim}", "distill.latent_dim")

        seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
        self.gen = torch.Generator().manual_seed(int(seeds[0]))
        self.np_rng = np.random.default_rng(int(seeds[1]))
        self.priors = init_priors(data.class_ids, cfg.priors_per_class, d, cfg.init, int(seeds[2]))
        self.initial_log_var = self.priors.log_var.clone()
        self.decoder = build_decoder(self.spec, int(seeds[3]))
        self.alpha = torch.tensor(cfg.mtt.alpha)

        self.priors.mu.requires_grad_(True)
        groups = [self.priors.mu]
        if cfg.mode == "distributional":
            self.priors.log_var.requires_grad_(True)
            groups.append(self.priors.log_var)
        self.opt_priors = torch.optim.SGD(groups, lr=cfg.outer_lr_priors, momentum=cfg.outer_momentum)
        self.opt_decoder = torch.optim.SGD(self.decoder.parameters(), lr=cfg.outer_lr_decoder, momentum=cfg.outer_momentum)
        self.alpha.requires_grad_(cfg.weights.w_mtt > 0)
        self.opt_alpha = torch.optim.SGD([self.alpha], lr=cfg.outer_lr_alpha)

        self.sample_mode = "mean-only" if cfg.mode == "fixed" else "reparameterized"
        self.run_log = Path(run_log) if run_log else None
        self.history: list[dict] = []

    # -- samplers --

    def _synthetic_mtt_batch(self):
        z, y = sample_every_prior(self.priors, 1, self.sample_mode, self.gen)
        return self.decoder(z), y

    def _synthetic_balanced(self, per_class: int):
        z, y = sample_balanced(self.priors, per_class, self.sample_mode, self.gen)
        return self.decoder(z), y

    def _window(self):
        for _ in range(10):
            w0, w1, meta = sample_expert_window(self.experts, self.cfg.mtt.max_start, self.cfg.mtt.M, self.np_rng)
            if not torch.equal(w0, w1):
                return w0, w1, meta
        raise DegenerateWindowError("ten consecutive degenerate expert windows")

    # -- one outer step --

    def losses(self):
        cfg = self.cfg
        self.decoder.train()
        w0, w1, meta = self._window()
        zero = torch.zeros(())
        d_mtt = zero
        if cfg.weights.w_mtt > 0:
            fwd = lambda w, x: convnet_forward(self.arch, w, x)  # noqa: E731
            d_mtt = mtt_loss(w0, w1, self._synthetic_mtt_batch, cfg.mtt, fwd, self.alpha)
        l_mmd = zero
        if cfg.weights.w_mmd > 0:
            classes = list(range(self.data.class_count))
            psi = lambda x: convnet_features(self.arch, w0, x, cfg.feature_tap)  # noqa: E731
            l_mmd = class_mmd_loss(
                self.data,
                self._synthetic_balanced,
                psi,
                classes,
                cfg.batch_per_class,
                cfg.kernels,
                self.np_rng,
                cfg.unit_norm_features,
            )
        return d_mtt, l_mmd, meta

    def step(self) -> dict:
        t0 = time.perf_counter()
        d_mtt, l_mmd, meta = self.losses()
        loss = combined_loss(d_mtt, l_mmd, self.cfg.weights)
        for opt in (self.opt_priors, self.opt_decoder, self.opt_alpha):
            opt.zero_grad()
        finite = bool(torch.isfinite(loss))
        if finite:
            loss.backward()
            params = [self.priors.mu, self.priors.log_var, self.alpha, *self.decoder.parameters()]
            finite = all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)
        if finite:
            self.opt_priors.step()
            self.opt_decoder.step()
            if self.alpha.requires_grad:
                self.opt_alpha.step()
                with torch.no_grad():
                    self.alpha.clamp_(min=1e-6)
        return {
            "d_mtt": float(d_mtt.detach()),
            "l_mmd": float(l_mmd.detach()),
            "loss": float(loss.detach()),
            "alpha": float(self.alpha.detach()),
            "expert": meta["expert_id"],
            "start": meta["start"],
            "finite": finite,
            "seconds": time.perf_counter() - t0,
        }

    # -- loop --

    def _snapshot(self):
        return (self.priors.detached(), copy.deepcopy(self.decoder.state_dict()), float(self.alpha.detach()))

    def bundle_from(self, snapshot) -> DistilledBundle:
        priors, dec_state, alpha = snapshot
        decoder = build_decoder(self.spec, 0)
        decoder.load_state_dict(dec_state)
        decoder.eval()
        soft = generate_soft_labels(priors, decoder, self.experts, self.cfg.label_expert)
        manifest = {
            "task_classes": list(self.data.class_ids),
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "experts": [e.expert_id for e in self.experts],
            "expert_arch": self.arch.to_dict(),
            "dataset": self.data.name,
        }
        if self.cfg.mode == "fixed":
            manifest["frozen_log_var"] = float(self.initial_log_var.flatten()[0])
        return DistilledBundle(priors, decoder, soft, alpha, self.cfg.mode, self.data.preprocessing, manifest)

    def run(self) -> DistilledBundle:
        good = self._snapshot()
        bad = 0
        fh = self.run_log.open("w") if self.run_log else None
        start = time.perf_counter()
        try:
            for i in range(1, self.cfg.steps + 1):
                try:
                    rec = self.step()
                except NumericError as exc:
                    rec = {"finite": False, "error": str(exc), "loss": math.nan, "d_mtt": math.nan, "l_mmd": math.nan, "alpha": float(self.alpha.detach())}
                rec["step"] = i
                rec["wall"] = time.perf_counter() - start
                self.history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if rec["finite"]:
                    bad = 0
                    good = self._snapshot()
                else:
                    bad += 1
                    if bad > self.cfg.nan_patience:
                        raise DistillationAborted(
                            f"{bad} consecutive non-finite steps at step {i}", last_good=self.bundle_from(good), step=i
                        )
                if i % 50 == 0 or i == 1:
                    log.info("step %d loss %.4f d_mtt %.4f l_mmd %.4f alpha %.5f", i, rec["loss"], rec["d_mtt"], rec["l_mmd"], rec["alpha"])
        finally:
            if fh:
                fh.close()
        return self.bundle_from(good)


def distill(data: DatasetHandle, experts: Sequence[ExpertTrajectory], cfg: DistillConfig, run_log: str | Path | None = None) -> DistilledBundle:
    return Distiller(data, experts, cfg, run_log).run()
