"""Command-line interface: ``biastransfer {synth,train,transform,evaluate,baseline,report}``.

Exit codes: 0 success, 1 unexpected package error, 2 configuration, 3 image
dimensions, 4 data, 5 checkpoint/spec mismatch, 6 training diverged, 7 benchmark
invalid, 8 selection guard, 9 file system, 10 channel count.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .color_transfer import color_transfer, pick_reference
from .config import ExperimentConfig, load_config
from .downstream import load_downstream, save_downstream, train_downstream
from .errors import BiasTransferError, DataError, TrainingDivergedError
from .evaluation import evaluate_transfer
from .experiment import translate_set, train_variant
from .imaging import read_image, write_image
from .networks import load_checkpoint, make_bundle
from .report import boxplot_reports, render_report
from .synthdata import benchmark_from_spec, load_domain, read_labels, write_benchmark
from .training import (
    DomainTensors,
    RunManifest,
    config_hash,
    restore_best,
    select_best,
    transform_full_resolution,
)

log = logging.getLogger("biastransfer")

IO_EXIT = 9
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


# ---------------------------------------------------------------------------
# helpers

def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, cfg: ExperimentConfig | None,
                   **details) -> Path:
    """Record everything needed to replay a command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "config": cfg.to_dict() if cfg is not None else None,
        "version": __version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **details,
    }
    path = out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    return path


def list_images(folder: str | Path) -> dict[str, Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"{folder} is not a directory")
    found = {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    if not found:
        raise DataError(f"no images in {folder}")
    return found


def _write_like(path: Path, img) -> None:
    write_image(path, img, bits=16 if path.suffix.lower() in (".tif", ".tiff") else 8)


def _out(cfg: ExperimentConfig, value: str | None, default: str) -> Path:
    return cfg.resolve(value if value is not None else default)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg: ExperimentConfig) -> int:
    root = _out(cfg, args.out, cfg.data.root)
    tar, new = benchmark_from_spec(cfg.synth)
    if {tar.name, new.name} != {cfg.data.target_domain, cfg.data.new_domain}:
        raise DataError("synthetic domains are named TAR and NEW; keep data.new_domain/target_domain at defaults")
    path = write_benchmark(root, tar, new, cfg.synth)
    details = {"benchmark_manifest": str(path)}
    if not args.no_downstream:
        d = cfg.downstream
        model = train_downstream(tar.images("train"), tar.labels("train"), tar.images("val"), tar.labels("val"),
                                 seed=d.seed, epochs=d.epochs, min_accuracy=d.min_accuracy)
        save_downstream(root / "downstream.pt", model)
        details["downstream"] = str(root / "downstream.pt")
    write_manifest(root, "synth", args, cfg, **details)
    print(f"benchmark written to {root}")
    return 0


def _run_dir(cfg: ExperimentConfig, out: Path, seed: int) -> Path:
    return out / f"{cfg.architecture}_{cfg.extra.mode}" / f"seed_{seed}"


def cmd_train(args, cfg: ExperimentConfig) -> int:
    data_root = _out(cfg, args.data, cfg.data.root)
    out = _out(cfg, args.out, cfg.output_dir)
    new_name, tar_name = cfg.data.new_domain, cfg.data.target_domain
    new, tar = load_domain(data_root, new_name), load_domain(data_root, tar_name)
    side = cfg.train.image_size
    dn = DomainTensors.from_images(new.images("train"), new.images("val"), side)
    dt = DomainTensors.from_images(tar.images("train"), tar.images("val"), side)
    seeds = tuple(args.seeds) if args.seeds else cfg.train.seeds
    want_hash = config_hash(cfg.architecture, cfg.train)

    manifests, reports, reused = [], [], []
    for seed in seeds:
        run_dir = _run_dir(cfg, out, seed)
        bundle = make_bundle(cfg.architecture, ["NEW", "TAR"], base_width=cfg.train.base_width, seed=seed)
        existing = run_dir / "manifest.json"
        m = RunManifest.read(existing) if existing.exists() else None
        if m is not None and m.status == "complete" and m.config_hash == want_hash and m.checkpoint:
            reused.append(seed)
        else:
            try:
                m = train_variant(bundle, dn, dt, cfg.train, seed, run_dir)
            except TrainingDivergedError:
                log.error("seed %d diverged; manifest kept in %s", seed, run_dir)
                raise
        restore_best(bundle, m)
        with torch.no_grad():
            moved = translate_set(bundle, new.images("val"), side)
        rep = evaluate_transfer(new.images("val"), moved, tar.images("val"), "val", names=new.split.val)
        rep.write(run_dir, "metrics_val")
        if rep.report_id not in m.metric_report_ids:
            m.metric_report_ids.append(rep.report_id)
        m.write(run_dir / "manifest.json")
        manifests.append(m)
        reports.append(rep)
        print(f"seed {seed}: epoch {m.selected_epoch}, val loss {m.best_val_loss:.4f}, val FID {rep.fid:.4f}")

    best_seed, best_epoch = select_best(manifests, reports, split="val")
    best = manifests[[m.seed for m in manifests].index(best_seed)]
    selection = {"seed": best_seed, "epoch": best_epoch, "checkpoint": best.checkpoint,
                 "criterion": "validation FID, then validation SSIM; epoch by lowest validation generator loss"}
    variant_dir = out / f"{cfg.architecture}_{cfg.extra.mode}"
    (variant_dir / "selection.json").write_text(json.dumps(selection, indent=2))
    write_manifest(variant_dir, "train", args, cfg, seeds=list(seeds), reused=reused, selection=selection,
                   runs=[str(_run_dir(cfg, out, s)) for s in seeds])
    print(f"selected seed {best_seed} epoch {best_epoch}: {best.checkpoint}")
    return 0


def cmd_transform(args, cfg: ExperimentConfig | None) -> int:
    expected = None
    if cfg is not None:
        expected = make_bundle(cfg.architecture, ["NEW", "TAR"], base_width=cfg.train.base_width).spec_dict()
    bundle, meta = load_checkpoint(args.checkpoint, expected)
    base_side = args.base_side or (cfg.train.image_size if cfg is not None else None)
    if base_side is None:
        raise DataError("pass --base-side or a config giving train.image_size")
    translate = bundle.translator(args.source, args.target)
    for net in bundle.generators.values():
        net.eval()
    out = Path(args.output)
    images = list_images(args.input)
    for stem, path in images.items():
        img = read_image(path)
        _write_like(out / path.name, transform_full_resolution(translate, img, base_side))
    write_manifest(out, "transform", args, cfg, checkpoint_epoch=meta["epoch"], checkpoint_seed=meta["seed"],
                   images=sorted(images), base_side=base_side)
    print(f"{len(images)} images written to {out}")
    return 0


def _aligned(original: str, transformed: str, target: str):
    o, t, g = list_images(original), list_images(transformed), list_images(target)
    if set(o) != set(t):
        missing = sorted(set(o) ^ set(t))
        raise DataError(f"original and transformed folders differ by filename: {missing[:5]}")
    names = sorted(o)
    return (names, [read_image(o[n]) for n in names], [read_image(t[n]) for n in names],
            [read_image(g[n]) for n in sorted(g)])


def cmd_evaluate(args, cfg: ExperimentConfig | None) -> int:
    out = Path(args.out)
    model = load_downstream(args.downstream) if args.downstream else None
    labels = None
    if args.labels:
        labels = {r["image_id"]: int(r["label"]) for r in read_labels(args.labels) if r.get("label", "") != ""}
    splits = {"val": args.val, "test": args.test}
    if not any(splits.values()):
        raise DataError("give --val and/or --test folder triples")
    reports = {}
    for split, folders in splits.items():
        if not folders:
            continue
        names, originals, transformed, targets = _aligned(*folders)
        y = None
        if model is not None:
            if labels is None or any(n not in labels for n in names):
                raise DataError("downstream scores need --labels covering every evaluated image")
            y = [labels[n] for n in names]
        rep = evaluate_transfer(originals, transformed, targets, split, names=names, labels=y,
                                downstream=model if y is not None else None)
        rep.write(out, f"metrics_{split}")
        reports[split] = rep
        print(f"{split}: SSIM {rep.ssim_mean:.4f}  FID {rep.fid:.4f} (original {rep.fid_original:.4f})"
              + (f"  accuracy {rep.accuracy:.3f} (original {rep.accuracy_original:.3f})" if y else ""))
    boxplot_reports(reports, out / "ssim_boxplot.png", "ssim")
    boxplot_reports(reports, out / "ms_ssim_boxplot.png", "ms_ssim")
    # validation and test stay separate entries; nothing is pooled across splits
    (out / "summary.json").write_text(json.dumps({s: r.summary() for s, r in reports.items()}, indent=2))
    write_manifest(out, "evaluate", args, cfg, report_ids={s: r.report_id for s, r in reports.items()})
    return 0


def cmd_baseline(args, cfg: ExperimentConfig | None) -> int:
    targets = list_images(args.target)
    spec = pick_reference(list(targets), args.seed)
    ref = read_image(targets[spec.reference_image_id])
    out = Path(args.output)
    images = list_images(args.input)
    for stem, path in images.items():
        _write_like(out / path.name, color_transfer(read_image(path), ref))
    write_manifest(out, "baseline", args, cfg, reference_image_id=spec.reference_image_id,
                   reference_path=str(targets[spec.reference_image_id]), rng_seed=spec.rng_seed,
                   images=sorted(images))
    print(f"{len(images)} images written to {out} (reference {spec.reference_image_id})")
    return 0


def cmd_report(args, cfg: ExperimentConfig | None) -> int:
    root = Path(args.root) if args.root else (cfg or ExperimentConfig()).output_path
    path = render_report(root, args.out)
    write_manifest(path.parent, "report", args, cfg)
    print(f"report written to {path}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biastransfer", description="Bias transfer for microscopy image domains.")
    p.add_argument("--config", help="YAML experiment config (defaults reproduce the full-scale protocol)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic two-domain benchmark")
    s.add_argument("--out", help="dataset root (default: data.root)")
    s.add_argument("--no-downstream", action="store_true", help="skip training the toy downstream classifier")
    s.set_defaults(func=cmd_synth, needs_config=True)

    s = sub.add_parser("train", help="train the configured variant over its seeds and select the best run")
    s.add_argument("--data", help="dataset root (default: data.root)")
    s.add_argument("--out", help="output directory (default: output_dir)")
    s.add_argument("--seeds", type=int, nargs="+", help="subset of seeds (default: train.seeds)")
    s.set_defaults(func=cmd_train, needs_config=True)

    s = sub.add_parser("transform", help="translate a folder of images at full resolution")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--source", default="NEW")
    s.add_argument("--target", default="TAR")
    s.add_argument("--base-side", type=int, help="model input side (default: train.image_size)")
    s.set_defaults(func=cmd_transform, needs_config=False)

    s = sub.add_parser("evaluate", help="SSIM, FID and downstream scores per split")
    s.add_argument("--val", nargs=3, metavar=("ORIGINAL", "TRANSFORMED", "TARGET"))
    s.add_argument("--test", nargs=3, metavar=("ORIGINAL", "TRANSFORMED", "TARGET"))
    s.add_argument("--downstream", help="saved downstream classifier")
    s.add_argument("--labels", help="labels.csv with image_id and label columns")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate, needs_config=False)

    s = sub.add_parser("baseline", help="colour transfer to one seeded random target image")
    s.add_argument("--input", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_baseline, needs_config=False)

    s = sub.add_parser("report", help="render a markdown report with loss curves")
    s.add_argument("--root", help="directory holding runs and metric reports (default: output_dir)")
    s.add_argument("--out", help="report directory (default: <root>/report)")
    s.set_defaults(func=cmd_report, needs_config=False)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.needs_config:
            cfg = load_config(args.config)
        else:
            cfg = load_config(args.config) if args.config else None
        return args.func(args, cfg)
    except BiasTransferError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
