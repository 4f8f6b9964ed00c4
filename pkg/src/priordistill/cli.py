"""Command-line entry point.

Verbs: experts-train, distill, federate, eval, report, audit, export-samples.
Exit status: 0 success, 1 configuration error, 2 runtime or numeric error,
3 partial federated result (rerun the same command to resume).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .bundle import DistilledBundle, bundle_hash, read_manifest, serialize_bundle
from .config import DATA_ROOT_ENV, RunConfig, config_from_dict, dump_config, load_config
from .datasets import load_splits
from .errors import ConfigError, PriorDistillError
from .evaluation import EvalReport, account_storage, random_real_baseline, recovery_accuracy, tradeoff_table
from .experts import load_trajectories, save_trajectories

log = logging.getLogger("priordistill")

RUN_CONFIG = "run_config.yaml"


def _load_cfg(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def _cfg_for_artifact(args, path: Path) -> RunConfig:
    """Explicit ``--config`` wins; otherwise the config echoed into the artifact."""
    if args.config or args.overrides:
        return _load_cfg(args)
    from .federated import ROUTING

    meta = json.loads((path / ROUTING).read_text()) if (path / ROUTING).exists() else read_manifest(path)
    if "run_config" not in meta:
        raise ConfigError(f"{path} carries no run_config; pass --config", "config")
    return config_from_dict(meta["run_config"])


def _splits(cfg: RunConfig):
    return load_splits(cfg.dataset.name, cfg.data_root(), cfg.dataset.preproc)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# --- verbs ---


def cmd_experts_train(args) -> int:
    cfg = _load_cfg(args)
    train, _ = _splits(cfg)
    _seed_everything(cfg.experts.seed)
    trajs = cfg.experts.train(train, cfg.experts.seed)
    out = Path(args.out)
    save_trajectories(trajs, out)
    dump_config(cfg, out / RUN_CONFIG)
    print(f"saved {len(trajs)} expert trajectories to {out}")
    return 0


def cmd_distill(args) -> int:
    from .distiller import distill

    cfg = _load_cfg(args)
    train, _ = _splits(cfg)
    _seed_everything(cfg.distill.seed)
    if args.experts:
        experts = load_trajectories(Path(args.experts))
    else:
        experts = cfg.experts.train(train, cfg.experts.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = distill(train, experts, cfg.distill, run_log=out / "run_log.jsonl")
    bundle.manifest["run_config"] = cfg.to_dict()
    serialize_bundle(bundle, out)
    report = account_storage(out)
    print(f"bundle written to {out}: {report.total_bytes} bytes ({report.ipc_equivalent:.2f} images/class equivalent)")
    return 0


def cmd_federate(args) -> int:
    from .federated import deserialize_aggregated, regenerate_soft_labels, run_federated, serialize_aggregated

    cfg = _load_cfg(args)
    train, _ = _splits(cfg)
    plan = cfg.federated_plan(train.class_count)
    parallel = args.parallel if args.parallel is not None else cfg.federated.parallel
    out = Path(args.out)
    meta = {"run_config": cfg.to_dict()}
    agg = run_federated(train, plan, out, parallel, meta)
    if cfg.federated.regenerate_labels:
        full_experts = cfg.experts.train(train, cfg.experts.seed)
        agg = regenerate_soft_labels(agg, full_experts, cfg.distill.label_expert)
        serialize_aggregated(agg, out, [f"subtask_{i:02d}" for i in range(len(agg.sub_bundles))], meta, overwrite=True)
        agg = deserialize_aggregated(out)
    report = account_storage(out)
    print(f"aggregated {len(agg.sub_bundles)} sub-bundles in {out}: {report.total_bytes} bytes")
    return 0


def _write_report(report: EvalReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    report.dump(path)
    print(f"{report.label or report.architecture}: {100 * report.accuracy_mean:.2f} +- {100 * report.accuracy_std:.2f} -> {path}")


def cmd_eval(args) -> int:
    from .federated import AggregatedBundle, evaluate_transfer, load_any

    path = Path(args.bundle)
    cfg = _cfg_for_artifact(args, path)
    train, test = _splits(cfg)
    ev = cfg.eval.downstream()
    if args.labels:
        ev.label_mode = args.labels
    if args.seeds is not None:
        ev.n_seeds = args.seeds
    archs = args.arch or list(cfg.eval.architectures)
    source = load_any(path)
    storage = account_storage(path)
    digest = None if isinstance(source, AggregatedBundle) else bundle_hash(path)
    out_dir = Path(args.out) if args.out else path
    for arch in archs:
        report = recovery_accuracy(source, test, arch, ev, storage, label=f"{path.name} {arch}")
        report.bundle_hash = digest
        _write_report(report, out_dir / f"eval_{arch}_{ev.label_mode}.json")
        if args.baseline:
            real, real_storage = random_real_baseline(train, storage.total_bytes, ev.seed)
            base = recovery_accuracy(real, test, arch, ev, real_storage, label=f"random real {arch}")
            _write_report(base, out_dir / f"eval_{arch}_random_real.json")
    if args.transfer:
        if not isinstance(source, AggregatedBundle):
            raise ConfigError("--transfer needs an aggregated bundle directory", "eval.transfer")
        tm = evaluate_transfer(source, test, ev, archs[0])
        (out_dir / "transfer.json").write_text(json.dumps(tm.to_dict(), indent=1))
        print(f"subtasks {[round(100 * a, 2) for a in tm.subtask_accuracies]}, full {100 * tm.full_accuracy:.2f}, Chg {100 * tm.chg:.1f}%")
    return 0


def cmd_report(args) -> int:
    reports = [EvalReport.load(p) for p in args.reports]
    human, machine = tradeoff_table(reports)
    print(human)
    if args.plot_data:
        Path(args.plot_data).write_text(machine)
    return 0


def cmd_audit(args) -> int:
    report = account_storage(Path(args.path))
    if args.json:
        print(json.dumps(report.to_dict(), indent=1))
    else:
        for name, size in sorted(report.components.items()):
            print(f"{name:<12} {size:>12} B")
        print(f"{'total':<12} {report.total_bytes:>12} B  ({report.total_mb_rounded} MB, {report.ipc_equivalent:.3f} images/class equivalent)")
    return 0


def _to_uint8(bundle: DistilledBundle, x: torch.Tensor) -> np.ndarray:
    """NCHW decoder output -> NHWC uint8 in raw pixel space."""
    nhwc = x.permute(0, 2, 3, 1).numpy()
    raw = bundle.preproc.invert(nhwc) if bundle.preproc is not None else (nhwc + 1) / 2
    return (np.clip(raw, 0.0, 1.0) * 255).round().astype(np.uint8)


def _tile(rows: list[np.ndarray], pad: int = 1) -> np.ndarray:
    """Rows of NHWC uint8 images -> one HWC canvas."""
    h, w, c = rows[0].shape[1:]
    cols = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h + pad) + pad, cols * (w + pad) + pad, c), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y : y + h, x : x + w] = img
    return canvas


def _save_png(arr: np.ndarray, path: Path, scale: int = 1) -> None:
    from PIL import Image

    img = Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)


def export_samples(bundle: DistilledBundle, out: Path, variations: int = 8, seed: int = 0, scale: int = 1) -> list[Path]:
    """Per class: one row per prior with the decoded mean then ``variations`` draws."""
    from .latent import reparameterize

    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(seed)
    pri = bundle.priors
    c, lpc, d = pri.mu.shape
    written, all_rows = [], []
    bundle.decoder.eval()
    with torch.no_grad():
        for ci, gid in enumerate(pri.class_ids):
            rows = []
            for p in range(lpc):
                mu, lv = pri.mu[ci, p], pri.log_var[ci, p]
                z = [mu[None]]
                if variations and bundle.sample_mode != "mean-only":
                    eps = torch.randn(variations, d, generator=gen)
                    z.append(reparameterize(mu[None].expand(variations, d), lv[None].expand(variations, d), eps))
                rows.append(_to_uint8(bundle, bundle.decoder(torch.cat(z))))
            path = out / f"class_{gid:04d}.png"
            _save_png(_tile(rows), path, scale)
            written.append(path)
            all_rows.extend(rows)
    _save_png(_tile(all_rows), out / "grid.png", scale)
    written.append(out / "grid.png")
    return written


def cmd_export_samples(args) -> int:
    from .federated import AggregatedBundle, load_any

    source = load_any(Path(args.bundle))
    bundles = source.sub_bundles if isinstance(source, AggregatedBundle) else [source]
    total = 0
    for i, b in enumerate(bundles):
        out = Path(args.out) / (f"subtask_{i:02d}" if len(bundles) > 1 else "")
        total += len(export_samples(b, out, args.variations, args.seed, args.scale))
    print(f"wrote {total} images to {args.out}")
    return 0


# --- parser ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priordistill", description="Distill datasets into latent priors plus a decoder.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="YAML or JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. distill.steps=400")
        p.add_argument("--data-root", help="dataset root (also PRIORDISTILL_DATA_ROOT)")
        return p

    p = with_config(sub.add_parser("experts-train", help="train expert trajectories"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experts_train)

    p = with_config(sub.add_parser("distill", help="distill a bundle"))
    p.add_argument("--experts", help="trajectory directory from experts-train (trained in-process when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = with_config(sub.add_parser("federate", help="distill class subsets independently and aggregate"))
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, help="worker processes (default: federated.parallel)")
    p.set_defaults(func=cmd_federate)

    p = with_config(sub.add_parser("eval", help="recovery accuracy of a bundle"))
    p.add_argument("bundle")
    p.add_argument("--arch", action="append", help="architecture (repeatable; default: eval.architectures)")
    p.add_argument("--labels", choices=("soft", "hard"))
    p.add_argument("--seeds", type=int)
    p.add_argument("--out", help="report directory (default: the bundle directory)")
    p.add_argument("--baseline", action="store_true", help="also evaluate random real images at equal storage")
    p.add_argument("--transfer", action="store_true", help="sub-task vs full-task accuracy of an aggregated bundle")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="storage / time / accuracy trade-off table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--plot-data", help="write JSON-lines rows here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="byte-exact storage of a bundle directory")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("export-samples", help="write decoded sample grids as PNG")
    p.add_argument("bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--variations", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=4, help="nearest-neighbour upscaling factor")
    p.set_defaults(func=cmd_export_samples)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .errors import PartialResultError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "data_root", None):
        os.environ[DATA_ROOT_ENV] = args.data_root  # flag beats environment beats config file
    try:
        return args.func(args)
    except PartialResultError as exc:
        print(f"partial result: {exc}\nrerun the same command to resume", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"config error at {exc.key_path or '?'}: {exc}", file=sys.stderr)
        return exc.exit_code
    except PriorDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
