"""Command-line entry point wiring data, models, training, and metrics.

Subcommands: synth, pretrain-vae, train, eval, heatmap, features, grad-check.
Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("oct_engine")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract here is 1
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _resolve_seed(value) -> int:
    from .config import ENV_SEED, ConfigError

    if value is not None:
        return int(value)
    env = os.environ.get(ENV_SEED, "").strip()
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"${ENV_SEED} is not an integer: {env!r}") from e
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="oct-engine",
                     description="Desk-scale OCT classification engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic 4-class dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-per-class", type=int, default=16)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, default=None)

    for name, help_text in (
        ("pretrain-vae", "pretrain the two-head variational encoder"),
        ("train", "train the classifier (optionally from a VAE checkpoint)"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--manifest", default=None, help="training manifest CSV")
        p.add_argument("--val-manifest", default=None, help="validation manifest CSV")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key (repeatable)")
        if name == "train":
            p.add_argument("--init-from", default=None,
                           help="checkpoint whose matching tensors seed the model")

    p = sub.add_parser("eval", help="evaluate checkpoints on a manifest")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="model checkpoint (repeat for an ensemble)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("heatmap", help="occlusion heatmaps for listed images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=None, help="occluder side (default side/8)")
    p.add_argument("--stride", type=int, default=None, help="occluder step (default patch/2)")
    p.add_argument("--target-class", type=int, default=None,
                   help="class to explain (default: the predicted class)")
    p.add_argument("images", nargs="+", help="image files (PNG or PGM)")

    p = sub.add_parser("features", help="export penultimate features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=10, help="seeded instances per op")
    p.add_argument("--tolerance", type=float, default=1e-3)

    return parser


# ---------------------------------------------------------------------------
# subcommands


def _collect_overrides(args) -> dict[str, str]:
    from .config import ConfigError

    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.manifest is not None:
        overrides["data.manifest"] = args.manifest
    if args.val_manifest is not None:
        overrides["data.val_manifest"] = args.val_manifest
    if args.steps is not None:
        overrides["train.steps"] = str(args.steps)
    if args.batch_size is not None:
        overrides["train.batch_size"] = str(args.batch_size)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return overrides


def cmd_synth(args) -> int:
    from .data import synth_generate

    seed = _resolve_seed(args.seed)
    manifest = synth_generate(args.n_per_class, args.size, seed, args.out)
    print(f"wrote {args.n_per_class * 4} images; manifest at {manifest}")
    return 0


def _run_training(args, phase: str) -> int:
    from .config import ConfigError, build_run_config, read_config_file
    from .data import load_manifest
    from .models import build_classifier, build_vae_twohead, transfer_encoder
    from .training import load_checkpoint, train

    file_values = read_config_file(args.config) if args.config else {}
    rc = build_run_config(file_values, _collect_overrides(args), phase=phase)
    if not rc.manifest:
        raise ConfigError("no training manifest (set data.manifest or --manifest)")
    records = load_manifest(rc.manifest, rc.golden_weight, rc.tfl_weight)
    val_records = None
    if rc.val_manifest:
        val_records = load_manifest(rc.val_manifest, rc.golden_weight, rc.tfl_weight)

    if phase == "vae":
        model = build_vae_twohead(rc.model, seed=rc.seed)
    else:
        model = build_classifier(rc.model, seed=rc.seed)
    if getattr(args, "init_from", None):
        ckpt = load_checkpoint(args.init_from)
        report = transfer_encoder(ckpt, model)
        logger.info("transfer from %s: matched %d tensors, skipped %d",
                    args.init_from, report["matched"], len(report["skipped"]))
    result = train(model, records, rc.train, rc.augment, args.out,
                   val_records=val_records)
    final = result["history"][-1]
    print(f"{phase} training done: {rc.train.max_steps} steps, "
          f"final loss {final['loss']:.4f}")
    print(f"checkpoints: {result['last']} | {result['best']}")
    print(f"metrics log: {result['metrics_path']}")
    return 0


def cmd_pretrain_vae(args) -> int:
    return _run_training(args, "vae")


def cmd_train(args) -> int:
    return _run_training(args, "classifier")


def _eval_inputs(checkpoint_path):
    """Model plus the augmentation config recorded at training time."""
    from .data import AugmentConfig
    from .training import load_checkpoint, load_classifier

    model = load_classifier(checkpoint_path)
    meta = load_checkpoint(checkpoint_path).metadata
    if "augment" in meta:
        aug = AugmentConfig.from_dict(meta["augment"])
    else:
        side = model.cfg.input_size[1]
        aug = AugmentConfig(resize=(side, side), crop=(side, side))
    return model, aug


def cmd_eval(args) -> int:
    from .data import decode_image, eval_transform, load_manifest
    from .metrics import classification_report
    from .training import ensemble_predict

    records = load_manifest(args.manifest)
    _, aug = _eval_inputs(args.checkpoint[0])
    images = np.stack([eval_transform(decode_image(r.path), aug) for r in records])
    labels = np.asarray([r.label for r in records])
    probs = ensemble_predict(args.checkpoint, images)
    report = classification_report(probs, labels)
    report["accuracy"] = float((probs.argmax(axis=1) == labels).mean())
    report["n_samples"] = len(records)
    report["checkpoints"] = [str(c) for c in args.checkpoint]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    sens = "n/a" if report["sensitivity"] is None else f"{report['sensitivity']:.4f}"
    spec = "n/a" if report["specificity"] is None else f"{report['specificity']:.4f}"
    auc = "n/a" if report["binary_auc"] is None else f"{report['binary_auc']:.4f}"
    print(f"accuracy {report['accuracy']:.4f} | sensitivity {sens} "
          f"| specificity {spec} | binary AUC {auc}")
    print(f"report: {report_path}")
    return 0


def cmd_heatmap(args) -> int:
    from .data import decode_image, eval_transform
    from .metrics import occlusion_heatmap, save_heatmap_artifacts

    model, aug = _eval_inputs(args.checkpoint)
    side = model.cfg.input_size[1]
    patch = args.patch or max(side // 8, 2)
    stride = args.stride or max(patch // 2, 1)
    out_dir = Path(args.out) / "heatmaps"
    for image_path in args.images:
        x = eval_transform(decode_image(image_path), aug)
        if args.target_class is not None:
            target = args.target_class
        else:
            target = int(model.predict_proba(x[None])[0].argmax())
        result = occlusion_heatmap(model, x, target, patch, stride)
        written = save_heatmap_artifacts(result, out_dir / Path(image_path).stem)
        print(f"{image_path}: class {target}, "
              f"p={result.prob_original:.4f}, grid {result.grid.shape} -> "
              + ", ".join(str(w) for w in written))
    return 0


def cmd_features(args) -> int:
    from .data import load_manifest
    from .metrics import export_features

    model, aug = _eval_inputs(args.checkpoint)
    records = load_manifest(args.manifest)
    out_path = Path(args.out) / "features.csv"
    export_features(model, records, aug, out_path)
    print(f"wrote features for {len(records)} samples to {out_path}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(instances=args.instances, tolerance=args.tolerance)
    failed = False
    for r in results:
        status = "PASS" if r["pass"] else "FAIL"
        print(f"{status}  {r['name']:32s} max rel err {r['max_rel_err']:.3e}")
        failed = failed or not r["pass"]
    print(f"{sum(r['pass'] for r in results)}/{len(results)} ops within "
          f"{args.tolerance:g}")
    return 3 if failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-vae": cmd_pretrain_vae,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "features": cmd_features,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    from .config import ConfigError
    from .data import DataError
    from .models import TransferError
    from .training import CheckpointError, TrainingError

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, TrainingError, CheckpointError, TransferError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
