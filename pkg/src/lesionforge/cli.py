"""Command-line entry point: ``lesionforge <subcommand> [flags]``.

Subcommands map onto the workflow one step at a time: ``synth`` writes a
synthetic dataset, ``train-seg`` and ``train-cls`` train the two networks,
``eval`` scores a classifier, ``bridge-preview`` renders one overlay and
``finetune`` adapts a classifier to a small set.

Every flag can also come from ``--config FILE`` (flat ``key = value`` lines,
dashes or underscores in keys). Flags on the command line win over the file.
The seed falls back to ``LESIONFORGE_SEED`` and then to 0.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .bridge import BLEND_MODES, MASK_MODES, BridgeConfig, export_overlay, segment_and_blend
from .checkpoint import CheckpointError, load_model, save_checkpoint
from .dataprep import (
    DatasetError,
    ImageSample,
    SplitSpec,
    load_dataset,
    read_image,
    rebalance,
    resize_normalize,
    stratified_sample,
    stratified_split,
    synth_generate,
    write_dataset,
)
from .effnet import EffNetConfig, EffNetModel, build_effnet_b0
from .train import (
    AUGMENT_MODES,
    TrainConfig,
    evaluate_classifier,
    evaluate_segmentation,
    fine_tune,
    train_classification,
    train_segmentation,
)
from .unet import UNetConfig, UNetModel, build_unet

log = logging.getLogger("lesionforge")

SEED_ENV = "LESIONFORGE_SEED"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
LAYOUTS = ("hybrid", "isic", "ham")
SUBSETS = ("train", "val", "test", "all")
# keys that never come from a config file
_NOT_CONFIGURABLE = {"help", "command", "config", "func"}


class UsageError(Exception):
    """Invalid invocation detected after argument parsing."""


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return value


def _unit_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"seed must be >= 0, got {value}")
    return value


def _existing_file(text: str) -> str:
    if not Path(text).is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return text


def _existing_dir(text: str) -> str:
    if not Path(text).is_dir():
        raise argparse.ArgumentTypeError(f"no such directory: {text}")
    return text


def _split(text: str) -> str:
    try:
        SplitSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=_existing_file, help="flat key = value file; flags override it")
    p.add_argument("--seed", type=_seed, default=None, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--verbose", "-v", action="store_true", help="log per-epoch progress")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=_existing_dir, required=True, help="dataset directory")
    p.add_argument("--layout", choices=LAYOUTS, default="hybrid")
    p.add_argument("--split", type=_split, default="70-15-15", help="split ratios, e.g. 70-15-15 or 80-20")


def _bridge_args(p: argparse.ArgumentParser, alpha_flag: str = "--bridge-alpha") -> None:
    p.add_argument(alpha_flag, dest="alpha", type=_unit_float, default=0.5, help="overlay transparency in [0, 1]")
    p.add_argument("--mask-mode", choices=MASK_MODES, default="binarized")
    p.add_argument("--blend", choices=BLEND_MODES, default="additive")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionforge", allow_abbrev=False,
                                     description="Skin-lesion segmentation and classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", allow_abbrev=False,
                       help="write a synthetic labelled dataset with masks")
    _common(p)
    p.add_argument("--n", type=_positive_int, required=True, help="number of samples (labels alternate)")
    p.add_argument("--size", type=_positive_int, default=64, help="image side length")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", allow_abbrev=False,
                       help="train the U-Net on image/mask pairs")
    _common(p)
    _data_args(p)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=_non_negative_float)
    p.add_argument("--base-channels", type=_positive_int)
    p.add_argument("--size", type=_positive_int, help="resize inputs to this side length")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-cls", allow_abbrev=False,
                       help="train the EfficientNet classifier, optionally behind the bridge")
    _common(p)
    _data_args(p)
    p.add_argument("--seg-ckpt", type=_existing_file, help="frozen U-Net checkpoint; enables the bridge")
    _bridge_args(p)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=_non_negative_float)
    p.add_argument("--l2", type=_non_negative_float, help="L2 penalty on weights")
    p.add_argument("--size", type=_positive_int, help="input resolution (multiple of 32)")
    p.add_argument("--augment-mode", choices=AUGMENT_MODES, default="flagged")
    p.add_argument("--rebalance", type=_positive_int, help="resample each class of the train subset to this count")
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("eval", allow_abbrev=False,
                       help="score a classifier and write report + ROC CSV")
    _common(p)
    _data_args(p)
    p.add_argument("--cls-ckpt", type=_existing_file, required=True)
    p.add_argument("--seg-ckpt", type=_existing_file, help="frozen U-Net checkpoint; enables the bridge")
    _bridge_args(p)
    p.add_argument("--threshold", type=_unit_float, default=0.5)
    p.add_argument("--subset", choices=SUBSETS, help="which split subset to score (default: test, else val)")
    p.add_argument("--report-out", required=True, help="report JSON path; roc.csv is written beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bridge-preview", allow_abbrev=False,
                       help="render original | mask | blended for one image")
    _common(p)
    p.add_argument("--image", type=_existing_file, required=True)
    p.add_argument("--seg-ckpt", type=_existing_file, required=True)
    _bridge_args(p, alpha_flag="--alpha")
    p.add_argument("--size", type=_positive_int, help="resize the image to this side length first")
    p.add_argument("--out", required=True, help="triptych PNG path")
    p.set_defaults(func=cmd_bridge_preview)

    p = sub.add_parser("finetune", allow_abbrev=False,
                       help="fine-tune a classifier on a small stratified sample")
    _common(p)
    _data_args(p)
    p.add_argument("--cls-ckpt", type=_existing_file, required=True)
    p.add_argument("--seg-ckpt", type=_existing_file, help="frozen U-Net checkpoint; enables the bridge")
    _bridge_args(p)
    p.add_argument("--n", type=_positive_int, default=140, help="fine-tuning set size")
    p.add_argument("--epochs", type=_non_negative_int, default=5)
    p.add_argument("--lr-scale", type=_non_negative_float, default=0.1)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_finetune)
    return parser


def read_config_file(path) -> Dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment line."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _overlay(sub: argparse.ArgumentParser, args: argparse.Namespace, argv: Sequence[str],
             values: Dict[str, str]) -> None:
    """Apply config-file values to options that were not given on the command line."""
    given = set()
    for action in sub._actions:
        if any(tok == opt or tok.startswith(opt + "=") for opt in action.option_strings for tok in argv):
            given.add(action.dest)
    by_dest = {a.dest: a for a in sub._actions if a.option_strings}
    for key, text in values.items():
        action = by_dest.get(key)
        if action is None or key in _NOT_CONFIGURABLE:
            raise UsageError(f"unknown config key {key!r}")
        if key in given:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = _bool(text)
        else:
            try:
                value = action.type(text) if action.type else text
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} is not one of {list(action.choices)}")
        setattr(args, key, value)
    for action in sub._actions:
        if action.required and getattr(args, action.dest, None) is None:
            raise UsageError(f"missing required option {'/'.join(action.option_strings)}")


def resolve_seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return _seed(env.strip())
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"${SEED_ENV}: {exc}") from None
    return 0


def parse(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags, then overlay the config file and resolve the seed.

    Raises:
        SystemExit: with code 2 on any usage error.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # required options may live in the config file, so relax them for the first pass
    sub_actions = {}
    for name, sub in _subparsers(parser).items():
        sub_actions[name] = [a for a in sub._actions if a.required]
        for a in sub_actions[name]:
            a.required = False
    args = parser.parse_args(argv)
    sub = _subparsers(parser)[args.command]
    for a in sub_actions[args.command]:
        a.required = True
    try:
        values = read_config_file(args.config) if args.config else {}
        _overlay(sub, args, argv, values)
        args.seed = resolve_seed(args)
    except UsageError as exc:
        sub.error(str(exc))
    return args


def _subparsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def resolved_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def _echo(args: argparse.Namespace) -> None:
    print("config: " + json.dumps(resolved_config(args), sort_keys=True))
    print(f"seed: {args.seed}", flush=True)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_samples(args, size: Optional[int] = None) -> List[ImageSample]:
    samples = load_dataset(args.data, layout=args.layout)
    if not samples:
        raise DatasetError(f"no samples found in {args.data}")
    if size is not None:
        samples = [s if s.pixels.shape[:2] == (size, size) else resize_normalize(s, size) for s in samples]
    return samples


def _split_samples(args, samples: Sequence[ImageSample]) -> Dict[str, List[ImageSample]]:
    spec = SplitSpec.parse(args.split, seed=args.seed)
    names = ("train", "val") if len(spec.ratios) == 2 else spec.subset_names()
    spec = SplitSpec(spec.ratios, spec.stratify_by_label, spec.seed, names)
    parts = stratified_split(samples, spec)
    parts["all"] = sorted(samples, key=lambda s: s.id)
    return parts


def _load_typed(path, kind: type, what: str):
    model, ckpt = load_model(path)
    if not isinstance(model, kind):
        raise CheckpointError(f"{path} is not a {what} checkpoint")
    return model, ckpt


def _bridge(args) -> BridgeConfig:
    return BridgeConfig(alpha=args.alpha, mask_mode=args.mask_mode, blend=args.blend)


def _cls_train_config(preset: str, seed: int, **overrides) -> TrainConfig:
    factory = TrainConfig.cls_paper if preset == "paper" else TrainConfig.cls_desk
    return factory(seed=seed, **{k: v for k, v in overrides.items() if v is not None})


def _counts(samples: Sequence[ImageSample]) -> str:
    c = Counter(s.label for s in samples)
    return ", ".join(f"class {k}: {c[k]}" for k in sorted(c))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    samples = synth_generate(args.n, image_size=args.size, seed=args.seed)
    write_dataset(samples, args.out, layout="hybrid")
    c = Counter(s.label for s in samples)
    for label in sorted(c):
        print(f"class {label}: {c[label]}")
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    samples = _load_samples(args, args.size)
    missing = [s.id for s in samples if s.mask is None]
    if missing:
        raise DatasetError(f"{len(missing)} samples have no mask (first: {missing[0]}); segmentation needs masks")
    parts = _split_samples(args, samples)
    factory = TrainConfig.seg_paper if args.preset == "paper" else TrainConfig.seg_desk
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr}
    cfg = factory(seed=args.seed, split=args.split, **{k: v for k, v in overrides.items() if v is not None})
    ucfg = UNetConfig.paper_faithful() if args.preset == "paper" else UNetConfig.desk()
    if args.base_channels is not None:
        ucfg = UNetConfig(**{**ucfg.to_dict(), "base_channels": args.base_channels})
    model = build_unet(ucfg, init_seed=args.seed)
    model, history = train_segmentation(model, parts["train"], parts["val"], cfg)
    report = evaluate_segmentation(model, parts["val"] or parts["train"])
    meta = {**history.meta, "seed": args.seed, "cli": resolved_config(args),
            "val_dice": report["dice"], "val_pixel_accuracy": report["pixel_accuracy"]}
    out = save_checkpoint(model, meta, args.out)
    history.write_csv(out.with_suffix(".history.csv"))
    print(f"val dice: {report['dice']:.4f}")
    print(f"val pixel accuracy: {report['pixel_accuracy']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train_cls(args) -> int:
    size = args.size or (256 if args.preset == "paper" else 64)
    ecfg = EffNetConfig(resolution=size) if args.preset == "paper" else EffNetConfig.desk(resolution=size)
    samples = _load_samples(args, size)
    parts = _split_samples(args, samples)
    train = parts["train"]
    if args.rebalance:
        train = rebalance(train, args.rebalance, seed=args.seed)
    seg_model, bridge_cfg = None, None
    if args.seg_ckpt:
        seg_model, _ = _load_typed(args.seg_ckpt, UNetModel, "segmentation")
        bridge_cfg = _bridge(args)
    cfg = _cls_train_config(args.preset, args.seed, split=args.split, augment_mode=args.augment_mode,
                            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, l2_lambda=args.l2)
    model = build_effnet_b0(ecfg, init_seed=args.seed)
    print(f"train: {_counts(train)}")
    model, history = train_classification(model, seg_model, train, parts["val"], cfg, bridge_cfg)
    history.meta.update(seed=args.seed, cli=resolved_config(args))
    if args.seg_ckpt:
        history.meta["seg_ckpt_sha256"] = _file_digest(args.seg_ckpt)
    out = save_checkpoint(model, history.meta, args.out)
    history.write_csv(out.with_suffix(".history.csv"))
    out.with_suffix(".history.json").write_text(json.dumps(history.to_dict(), sort_keys=True, indent=2) + "\n",
                                                encoding="utf-8")
    print(f"bridge: {history.meta['bridge']}")
    last = history.records[-1]
    if "val_accuracy" in last:
        print(f"val accuracy: {last['val_accuracy']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, ckpt = _load_typed(args.cls_ckpt, EffNetModel, "classification")
    seg_model, bridge_cfg = None, None
    if args.seg_ckpt:
        seg_model, _ = _load_typed(args.seg_ckpt, UNetModel, "segmentation")
        bridge_cfg = _bridge(args)
    trained_with = ckpt.meta.get("bridge")
    if trained_with and trained_with.startswith("on") != (seg_model is not None):
        print(f"warning: classifier was trained with bridge {trained_with!r} but is evaluated with it "
              f"{'on' if seg_model is not None else 'off'}", file=sys.stderr)
    samples = _load_samples(args, model.config.resolution)
    parts = _split_samples(args, samples)
    subset = args.subset or ("test" if "test" in parts else "val")
    if subset not in parts:
        raise UsageError(f"split {args.split} has no {subset!r} subset")
    chosen = parts[subset]
    if not chosen:
        raise DatasetError(f"subset {subset!r} is empty")
    report = evaluate_classifier(model, chosen, seg_model, bridge_cfg, threshold=args.threshold,
                                 split=f"{args.split}:{subset}")
    report.config.update(seed=args.seed, n=len(chosen), cls_ckpt_sha256=_file_digest(args.cls_ckpt))
    if args.seg_ckpt:
        report.config["seg_ckpt_sha256"] = _file_digest(args.seg_ckpt)
    report.write(args.report_out)
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"confusion: tp={report.tp} fp={report.fp} tn={report.tn} fn={report.fn}")
    for key in ("accuracy", "precision", "recall", "f1"):
        print(f"{key}: {getattr(report, key):.4f}")
    if report.auc is not None:
        print(f"auc: {report.auc:.4f}")
    print(f"wrote {args.report_out}")
    return EXIT_OK


def cmd_bridge_preview(args) -> int:
    seg_model, _ = _load_typed(args.seg_ckpt, UNetModel, "segmentation")
    image = read_image(args.image)
    if args.size is not None and image.shape[:2] != (args.size, args.size):
        image = resize_normalize(ImageSample(id="preview", pixels=image), args.size).pixels
    blended, masks = segment_and_blend(seg_model, image[None], _bridge(args), return_masks=True)
    shown = masks[0] if args.mask_mode == "soft" else (masks[0] >= 0.5).astype(np.float32)
    export_overlay(image, shown, blended[0], args.out)
    print(f"mask coverage: {float(np.mean(masks[0] >= 0.5)):.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    model, ckpt = _load_typed(args.cls_ckpt, EffNetModel, "classification")
    samples = _load_samples(args, model.config.resolution)
    if len(samples) < args.n:
        raise DatasetError(f"dataset has {len(samples)} samples, fewer than --n {args.n}")
    small = stratified_sample(samples, args.n, seed=args.seed)
    seg_model, bridge_cfg = None, None
    if args.seg_ckpt:
        seg_model, _ = _load_typed(args.seg_ckpt, UNetModel, "segmentation")
        bridge_cfg = _bridge(args)
    cfg = _cls_train_config(model.config.preset, args.seed)
    tuned, history = fine_tune(model, small, cfg, epochs=args.epochs, lr_scale=args.lr_scale,
                               seg_model=seg_model, bridge_cfg=bridge_cfg)
    meta = {**ckpt.meta, **history.meta, "seed": args.seed, "cli": resolved_config(args),
            "base_ckpt_sha256": _file_digest(args.cls_ckpt)}
    meta.update(_bridge_summary(seg_model, bridge_cfg))
    print(f"fine-tune set: {_counts(small)}")
    out = save_checkpoint(tuned, meta, args.out)
    if history.records:
        history.write_csv(out.with_suffix(".history.csv"))
    print(f"wrote {out}")
    return EXIT_OK


def _bridge_summary(seg_model, bridge_cfg) -> dict:
    if seg_model is None:
        return {"bridge": "off"}
    return {"bridge": f"on, alpha={bridge_cfg.alpha:g}"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _echo(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
