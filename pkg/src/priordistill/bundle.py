"""The distilled artifact and its on-disk format.

A bundle directory holds one raw fp32 blob per tensor plus ``manifest.json``.
Dataset preprocessing statistics go under ``preproc/``; they describe the
source dataset, not the distilled data, and are excluded from storage audits.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import blobs
from .datasets import PreprocStats
from .decoder import Decoder, DecoderParams, DecoderSpec, build_decoder, state_entries
from .errors import ConfigError, CorruptionError, IncompatibleVersionError
from .latent import LatentPriorSet

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


@dataclass
class DistilledBundle:
    priors: LatentPriorSet
    decoder: Decoder
    soft_labels: torch.Tensor | None
    alpha: float
    mode: str = "distributional"
    preproc: PreprocStats | None = None
    manifest: dict[str, Any] = field(default_factory=dict)

    @property
    def decoder_spec(self) -> DecoderSpec:
        return self.decoder.spec

    @property
    def task_classes(self) -> tuple[int, ...]:
        return self.priors.class_ids

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.decoder.spec.output_shape)

    @property
    def sample_mode(self) -> str:
        return "mean-only" if self.mode == "fixed" else "reparameterized"

    def check(self) -> None:
        c, lpc = self.priors.class_count, self.priors.priors_per_class
        if self.soft_labels is not None:
            sl = self.soft_labels
            if sl.shape[:2] != (c, lpc):
                raise ConfigError(f"soft labels {tuple(sl.shape)} do not match priors [{c}, {lpc}]")
            if (sl < 0).any() or not torch.allclose(sl.sum(-1), torch.ones(()), atol=1e-5):
                raise ConfigError("soft label rows must be probability vectors")
        tc = self.manifest.get("task_classes")
        if tc is not None and tuple(tc) != self.task_classes:
            raise ConfigError("manifest task_classes disagree with priors")


def hardware_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
    }


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _components(bundle: DistilledBundle) -> list[tuple[str, np.ndarray]]:
    """(component, tensor) pairs in serialization order. Component names group storage accounting."""
    out: list[tuple[str, str, np.ndarray]] = []
    if bundle.mode == "fixed":
        out.append(("codes", bundle.priors.mu.detach().numpy()))
    else:
        out.append(("priors.mu", bundle.priors.mu.detach().numpy()))
        out.append(("priors.log_var", bundle.priors.log_var.detach().numpy()))
    for name, value in state_entries(bundle.decoder):
        out.append((f"decoder.{name}", value.detach().numpy()))
    if bundle.soft_labels is not None:
        out.append(("soft_labels", bundle.soft_labels.detach().numpy()))
    return out


def component_group(name: str) -> str:
    if name.startswith(("priors.", "codes")):
        return "priors"
    return name.split(".", 1)[0]


def serialize_bundle(bundle: DistilledBundle, directory: str | Path) -> dict:
    bundle.check()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    inventory = []
    for name, array in _components(bundle):
        fname = name.replace("/", "_") + ".bin"
        shape, nbytes, digest = blobs.write_blob(d / fname, array)
        inventory.append(
            {"name": name, "dtype": "float32", "shape": list(shape), "file": fname, "offset": blobs.HEADER_SIZE, "length": nbytes, "sha256": digest}
        )
    preproc_meta = None
    if bundle.preproc is not None:
        preproc_meta = bundle.preproc.to_manifest()
        if bundle.preproc.zca_matrix is not None:
            (d / "preproc").mkdir(exist_ok=True)
            blobs.write_blob(d / "preproc" / "zca_matrix.bin", bundle.preproc.zca_matrix)
            blobs.write_blob(d / "preproc" / "zca_mean.bin", bundle.preproc.zca_mean)
    extra = {k: v for k, v in bundle.manifest.items() if k not in ("task_classes",)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "bundle",
        "components": inventory,
        "task_classes": list(bundle.task_classes),
        "priors_per_class": bundle.priors.priors_per_class,
        "latent_dim": bundle.priors.latent_dim,
        "mode": bundle.mode,
        "alpha": bundle.alpha,
        "decoder_spec": bundle.decoder_spec.to_dict(),
        "decoder_shapes": [[k, list(v.shape)] for k, v in state_entries(bundle.decoder)],
        "preproc": preproc_meta,
        "hardware": hardware_descriptor(),
        "created": _timestamp(),
        **extra,
    }
    # compact separators: manifest bytes count toward storage
    (d / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")))
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"manifest is not valid JSON: {exc}", "manifest") from exc
    if m.get("format_version") != FORMAT_VERSION:
        raise IncompatibleVersionError(f"bundle format {m.get('format_version')} is not supported (expected {FORMAT_VERSION})")
    return m


def deserialize_bundle(directory: str | Path) -> DistilledBundle:
    d = Path(directory)
    m = read_manifest(d)
    arrays = {}
    for entry in m["components"]:
        arr = blobs.read_blob(d / entry["file"], entry["sha256"], entry["name"])
        if list(arr.shape) != entry["shape"] or arr.size * 4 != entry["length"]:
            raise CorruptionError(f"component {entry['name']} shape/length disagree with manifest", entry["name"])
        arrays[entry["name"]] = arr
    ids = tuple(m["task_classes"])
    if m["mode"] == "fixed":
        mu = torch.from_numpy(arrays["codes"].copy())
        log_var = torch.full_like(mu, float(m.get("frozen_log_var", 0.0)))
    else:
        mu = torch.from_numpy(arrays["priors.mu"].copy())
        log_var = torch.from_numpy(arrays["priors.log_var"].copy())
    spec = DecoderSpec.from_dict(m["decoder_spec"])
    decoder = build_decoder(spec, 0)
    shapes = [(k, tuple(s)) for k, s in m["decoder_shapes"]]
    flat = np.concatenate([arrays[f"decoder.{k}"].reshape(-1) for k, _ in shapes])
    DecoderParams(flat, shapes).load_into(decoder)
    decoder.eval()
    soft = torch.from_numpy(arrays["soft_labels"].copy()) if "soft_labels" in arrays else None
    preproc = None
    if m.get("preproc"):
        p = m["preproc"]
        zm = zmean = None
        if p.get("zca"):
            zm = blobs.read_blob(d / "preproc" / "zca_matrix.bin")
            zmean = blobs.read_blob(d / "preproc" / "zca_mean.bin")
        preproc = PreprocStats(
            np.asarray(p["per_channel_mean"], np.float32), np.asarray(p["per_channel_std"], np.float32), zm, zmean, p.get("zca_epsilon")
        )
    known = {"format_version", "kind", "components", "priors_per_class", "latent_dim", "mode", "alpha", "decoder_spec", "decoder_shapes", "preproc", "hardware", "created"}
    extra = {k: v for k, v in m.items() if k not in known}
    return DistilledBundle(LatentPriorSet(ids, mu, log_var), decoder, soft, float(m["alpha"]), m["mode"], preproc, extra)


def bundle_hash(directory: str | Path) -> str:
    """Digest over component checksums (manifest timestamps do not affect it)."""
    m = read_manifest(directory)
    h = hashlib.sha256()
    for e in m["components"]:
        h.update(e["name"].encode())
        h.update(e["sha256"].encode())
    return h.hexdigest()[:16]


def element_counts(bundle: DistilledBundle) -> dict[str, int]:
    """Closed-form fp32 element count per storage group."""
    pri = bundle.priors
    n = pri.class_count * pri.priors_per_class * pri.latent_dim
    from .decoder import buffer_count, param_count

    counts = {"priors": n if bundle.mode == "fixed" else 2 * n, "decoder": param_count(bundle.decoder_spec) + buffer_count(bundle.decoder_spec)}
    if bundle.soft_labels is not None:
        counts["soft_labels"] = math.prod(bundle.soft_labels.shape)
    return counts
