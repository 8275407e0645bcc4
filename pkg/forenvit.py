#!/usr/bin/env python3
"""
forenvit - deepfake detection with compact vision transformers

Usage:
    python forenvit.py generate --out corpus --seed 7
    python forenvit.py pretrain --manifest corpus/manifest.tsv --recipe masked
    python forenvit.py train --manifest corpus/manifest.tsv --approach 2 --k 2
    python forenvit.py eval --checkpoint runs/detector.fvt --manifest corpus/manifest.tsv
    python forenvit.py visualize --checkpoint runs/detector.fvt corpus/test/*.pgm

Run ``python help.py`` for the full guide.
"""

import argparse
import logging
import sys
from pathlib import Path

import data
import explain
import probes
import trainer
from backbone import Backbone, backbone_from_checkpoint, load_checkpoint, save_checkpoint
from config import RunConfig
from errors import ConfigurationError, ForenvitError, ForenvitIOError
from help import EPILOG
from metrics import calibrate, evaluate
from numerics import Rng

logger = logging.getLogger("forenvit")

SNAPSHOT_NAME = "resolved_config.ini"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ForenvitIOError(f"cannot write {path}: {e}") from e
    return path


def out_dir(config):
    return Path(config.get("run", "out"))


def make_backbone(config):
    """Fresh backbone, or the pretrained one named by model.backbone."""
    path = config.get("model", "backbone")
    if path:
        return backbone_from_checkpoint(load_checkpoint(path), Rng(config.seed).split("backbone"))
    return Backbone(config.vit_config(), Rng(config.seed).split("backbone"))


def load_model(path, seed=0):
    """(detector or None, backbone, policy or None) from any forenvit checkpoint."""
    checkpoint = load_checkpoint(path)
    if "train" in checkpoint.metadata:
        detector, _, policy = trainer.detector_from_checkpoint(checkpoint)
        return detector, detector.backbone, policy
    return None, backbone_from_checkpoint(checkpoint, Rng(seed).split("backbone")), None


def load_manifest_split(config, split):
    manifest = data.load_manifest(config.get("data", "manifest"))
    return data.load_split(manifest, split, config.get("model", "channels"))


def apply_train_flags(config, args):
    config.override("train", "approach", args.approach)
    approach = config.get("train", "approach")
    config.override("fusion" if approach == 1 else "finetune", "k", args.k)
    config.override("fusion", "mode", args.fusion)
    config.override("fusion", "scope", args.scope)
    config.override("fusion", "adaptor", args.adaptor)
    config.override("fusion", "dropout", args.dropout)
    config.override("finetune", "head", args.head)
    config.override("train", "epochs", args.epochs)
    config.override("train", "batch_size", args.batch_size)
    config.override("train", "learning_rate", args.lr)
    config.override("model", "backbone", args.backbone)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args, config):
    for split in data.SPLITS:
        config.override("data", f"{split}_real", getattr(args, f"{split}_reals"))
        config.override("data", f"{split}_fake", getattr(args, f"{split}_fakes"))
    config.override("data", "image_size", args.image_size)
    spec = config.corpus_spec()
    target = Path(args.out) if args.out else Path(config.get("data", "manifest")).parent
    print(f"🎨 Rendering corpus into {target} ...")
    manifest = data.generate_corpus(spec, target)
    config.set("data", "manifest", str(target / data.MANIFEST_NAME))
    config.snapshot(target / SNAPSHOT_NAME)
    print(f"✅ {len(manifest.records)} images, manifest at {target / data.MANIFEST_NAME}")


def cmd_pretrain(args, config):
    config.override("pretrain", "recipe", args.recipe)
    config.override("pretrain", "mask_ratio", args.mask_ratio)
    config.override("pretrain", "epochs", args.epochs)
    settings = config.pretrain_config()
    backbone = Backbone(config.vit_config(), Rng(config.seed).split("backbone"))
    target = out_dir(config)
    rng = Rng(config.seed).split("pretrain")
    print(f"🧠 Pretraining ({settings.recipe}) ...")
    if settings.recipe == "masked":
        images = load_manifest_split(config, "train").images
        backbone, losses = trainer.pretrain_masked(backbone, images, settings, rng)
        log = "step\tloss\n" + "".join(f"{i}\t{loss:.6f}\n" for i, loss in enumerate(losses, 1))
    else:
        images, labels = data.generate_class_images(
            config.get("pretrain", "class_images"),
            settings.num_classes,
            config.get("data", "image_size"),
            rng.split("class_images"),
        )
        backbone, history = trainer.pretrain_supervised(backbone, images, labels, settings, rng)
        log = "epoch\taccuracy\n" + "".join(f"{i}\t{acc:.4f}\n" for i, acc in enumerate(history, 1))
    path = trainer.save_backbone(backbone, target / "backbone.fvt", {"recipe": settings.recipe})
    write_text(target / "pretrain_log.txt", log)
    config.snapshot(target / SNAPSHOT_NAME)
    print(f"✅ Backbone saved to {path}")


def cmd_train(args, config):
    apply_train_flags(config, args)
    settings = config.train_config()
    detector = trainer.detector_from_config(settings, make_backbone(config))
    train_data = load_manifest_split(config, "train")
    val_data = load_manifest_split(config, "val")
    print(f"🏋️ Training approach {settings.approach} with k={settings.k} ...")
    result = trainer.train(settings, detector, train_data, val_data)
    target = out_dir(config)
    path = trainer.save_detector(result.detector, target / "detector.fvt", settings)
    result.log.save(target / "train_log.txt")
    config.snapshot(target / SNAPSHOT_NAME)
    if result.best_eer is not None:
        print(f"📈 Best validation EER {result.best_eer:.2f}% at step {result.best_step}")
    print(f"✅ Detector saved to {path}")


def cmd_probe(args, config):
    config.override("model", "backbone", args.backbone)
    config.override("probe", "k_neighbors", args.k_neighbors)
    config.override("eval", "split", args.split)
    config.override("probe", "kind", args.probe)
    settings = config.probe_config()
    backbone = make_backbone(config)
    split = config.get("eval", "split")
    train_features = trainer.extract_cls_features(backbone, load_manifest_split(config, "train"))
    test_features = trainer.extract_cls_features(backbone, load_manifest_split(config, split))
    kind_setting = config.get("probe", "kind")
    if kind_setting not in probes.PROBE_KINDS + ("all",):
        raise ConfigurationError(f"unknown probe '{kind_setting}'; choose from {', '.join(probes.PROBE_KINDS)} or all")
    kinds = probes.PROBE_KINDS if kind_setting == "all" else (kind_setting,)
    target = out_dir(config)
    rng = Rng(config.seed).split("probe")
    for kind in kinds:
        scores, state = probes.run_probe(kind, train_features, test_features, settings, rng.split(kind))
        report = evaluate(scores, 0.5, split)
        write_text(target / f"probe_{kind}.txt", report.to_text())
        write_text(target / f"probe_{kind}.json", report.to_json())
        if state:
            params = dict(backbone.state_dict())
            params.update(state)
            save_checkpoint(params, target / f"probe_{kind}.fvt", {
                "model": backbone.config.to_dict(), "probe": kind,
            })
        print(f"🔎 {kind}: accuracy {report.accuracy:.2f}%, EER {report.eer:.2f}%")
    config.snapshot(target / SNAPSHOT_NAME)


def _policy_for(config, detector, stored):
    calibrate_on = config.get("eval", "calibrate_on")
    if calibrate_on:
        return calibrate(trainer.score_split(detector, load_manifest_split(config, calibrate_on)), calibrate_on)
    if config.get("eval", "fixed_threshold"):
        return config.get("eval", "threshold")
    if stored is not None and stored.kind == "validation_eer":
        return stored
    return config.get("eval", "threshold")


def cmd_eval(args, config):
    config.override("eval", "split", args.split)
    config.override("eval", "threshold", args.threshold)
    if args.threshold is not None:
        config.set("eval", "fixed_threshold", True)
    config.override("eval", "calibrate_on", args.calibrate_on)
    config.override("run", "checkpoint", args.checkpoint)
    checkpoint_path = config.require("run", "checkpoint", "--checkpoint")
    detector, _, stored = load_model(checkpoint_path, config.seed)
    if detector is None:
        raise ConfigurationError(f"{checkpoint_path} holds a bare backbone; train a detector first")
    split = config.get("eval", "split")
    policy = _policy_for(config, detector, stored)
    report = evaluate(trainer.score_split(detector, load_manifest_split(config, split)), policy, split)
    target = out_dir(config)
    write_text(target / f"report_{split}.txt", report.to_text())
    write_text(target / f"report_{split}.json", report.to_json())
    config.snapshot(target / SNAPSHOT_NAME)
    print(report.to_text(), end="")
    print(f"✅ Report written to {target / f'report_{split}.txt'}")


def cmd_calibrate(args, config):
    config.override("eval", "calibrate_split", args.split)
    config.override("run", "checkpoint", args.checkpoint)
    split = config.get("eval", "calibrate_split")
    checkpoint_path = config.require("run", "checkpoint", "--checkpoint")
    detector, _, _ = load_model(checkpoint_path, config.seed)
    if detector is None:
        raise ConfigurationError(f"{checkpoint_path} holds a bare backbone; train a detector first")
    checkpoint = load_checkpoint(checkpoint_path)
    policy = calibrate(trainer.score_split(detector, load_manifest_split(config, split)), split)
    metadata = dict(checkpoint.metadata)
    metadata["policy"] = policy.to_dict()
    target = out_dir(config)
    path = save_checkpoint(checkpoint.params, target / "calibrated.fvt", metadata)
    config.snapshot(target / SNAPSHOT_NAME)
    print(f"🎯 tau = {policy.tau:.6f} (calibrated on {split})")
    print(f"✅ Calibrated checkpoint saved to {path}")


def cmd_ablate(args, config):
    apply_train_flags(config, args)
    settings = config.train_config()
    config.override("ablate", "k_list", args.k_list)
    k_values = config.k_list()
    train_data = load_manifest_split(config, "train")
    val_data = load_manifest_split(config, "val")
    test_data = load_manifest_split(config, config.get("eval", "split"))
    print(f"🧪 Ablating k over {k_values} ...")
    table = trainer.ablate_k(settings, k_values, lambda: make_backbone(config), train_data, val_data, test_data)
    target = out_dir(config)
    write_text(target / "ablation.tsv", table.to_text())
    trainer.plot_ablation(table, target / "ablation.png")
    config.snapshot(target / SNAPSHOT_NAME)
    best = table.best()
    print(f"✅ {len(table.rows)} runs; best k={best.k} with test EER {best.eer:.2f}%")


def cmd_visualize(args, config):
    config.override("explain", "alpha", args.alpha)
    config.override("explain", "scale", args.scale)
    config.override("run", "checkpoint", args.checkpoint)
    config.override("explain", "compare", args.compare)
    config.set_list("explain", "images", args.images)
    settings = config.section("explain")
    images = config.get_list("explain", "images")
    if not images:
        raise ConfigurationError("visualize needs at least one image (or explain.images in the config)")
    _, backbone, _ = load_model(config.require("run", "checkpoint", "--checkpoint"), config.seed)
    compare = load_model(settings["compare"], config.seed)[1] if settings["compare"] else None
    target = out_dir(config)
    options = {
        "alpha": settings["alpha"],
        "scale": settings["scale"],
        "normalization": settings["normalization"],
        "direction": settings["direction"],
        "order": settings["order"],
    }
    for image_path in images:
        image = data.read_image(image_path, backbone.config.channels)
        stem = Path(image_path).stem
        shown = explain.visualize(backbone, image, **options)
        explain.export(shown.overlay, target / f"{stem}_overlay.ppm")
        panels = shown.panels()
        if compare is not None:
            other = explain.visualize(compare, image, **options)
            explain.export(other.overlay, target / f"{stem}_compare_overlay.ppm")
            panels.extend(other.panels()[1:])
        explain.export(explain.montage(panels), target / f"{stem}_montage.ppm")
        print(f"🖼️ {image_path} -> {target / f'{stem}_overlay.ppm'}")
    config.snapshot(target / SNAPSHOT_NAME)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value settings")
    common.add_argument("--seed", type=int, help="Seed every random stream derives from")
    common.add_argument("--out", help="Output directory (default: run.out)")
    common.add_argument("--manifest", help="Corpus manifest (default: data.manifest)")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return common


def _train_flags(parser):
    parser.add_argument("--approach", type=int, choices=(1, 2), help="1: frozen backbone + fusion, 2: fine-tune")
    parser.add_argument("--k", type=int, help="Blocks fused (approach 1) or fine-tuned (approach 2)")
    parser.add_argument("--fusion", choices=("weighted_sum", "concat"), help="Fusion of adapted features")
    parser.add_argument("--scope", choices=("cls_only", "all_tokens"), help="Token rows read from each block")
    parser.add_argument("--adaptor", choices=("none", "linear"), help="Per-block adaptor")
    parser.add_argument("--dropout", type=float, help="Adaptor dropout rate")
    parser.add_argument("--head", choices=("linear", "mlp2"), help="Classifier head")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float, help="Learning rate")
    parser.add_argument("--backbone", help="Pretrained backbone checkpoint")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="forenvit",
        description="Deepfake detection with compact vision transformers",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("generate", parents=[common], help="Render the synthetic seen/unseen corpus")
    for split in data.SPLITS:
        flag = split.replace("_", "-")
        p.add_argument(f"--{flag}-reals", type=int, dest=f"{split}_reals")
        p.add_argument(f"--{flag}-fakes", type=int, dest=f"{split}_fakes")
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", parents=[common], help="Pretrain a backbone (masked or supervised)")
    p.add_argument("--recipe", choices=("masked", "supervised"))
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="Train a detector with approach 1 or 2")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", parents=[common], help="Conventional classifiers on frozen CLS features")
    p.add_argument("--backbone", help="Backbone checkpoint to probe")
    p.add_argument("--probe", choices=probes.PROBE_KINDS + ("all",), help="Probe to run (default: probe.kind)")
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--split", choices=data.SPLITS)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", parents=[common], help="Metric report for one split")
    p.add_argument("--checkpoint", help="Detector or backbone checkpoint (default: run.checkpoint)")
    p.add_argument("--split", choices=data.SPLITS)
    p.add_argument("--threshold", type=float, help="Fixed decision threshold")
    p.add_argument("--calibrate-on", choices=data.SPLITS, help="Use the EER threshold of this split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", parents=[common], help="Store the EER threshold of a split in the checkpoint")
    p.add_argument("--checkpoint", help="Detector or backbone checkpoint (default: run.checkpoint)")
    p.add_argument("--split", choices=data.SPLITS, help="Split to calibrate on (default: eval.calibrate_split)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("ablate", parents=[common], help="Train and test once per k")
    _train_flags(p)
    p.add_argument("--k-list", help="Comma-separated k values (default: ablate.k_list)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", parents=[common], help="CLS attention overlays")
    p.add_argument("--checkpoint", help="Detector or backbone checkpoint (default: run.checkpoint)")
    p.add_argument("--compare", help="Second checkpoint rendered into the same montage")
    p.add_argument("--alpha", type=float)
    p.add_argument("--scale", type=int)
    p.add_argument("images", nargs="*", help="Images to render (default: explain.images)")
    p.set_defaults(func=cmd_visualize)
    return parser


def resolve_config(args):
    config = RunConfig.load(args.config)
    config.override("run", "seed", args.seed)
    config.override("run", "out", args.out)
    config.override("data", "manifest", args.manifest)
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args, resolve_config(args))
    except ForenvitError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
