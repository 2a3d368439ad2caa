"""Command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch
from PIL import Image
from safetensors import SafetensorError

from .config import RunConfig, echo_config, parse_config
from .data import (DatasetSpec, ImageDataset, MeanColorOracle, load_dataset, make_synthetic,
                   preprocess, save_dataset)
from .evaluation import (RandomConvExtractor, evaluate_translation, interpolate_styles,
                         save_image_tensor, save_row_grid, save_translation_grid,
                         similarity_search, write_report)
from .structs import ConfigError
from .trainer import Trainer

logger = logging.getLogger("contrast_translate")

EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_RUNTIME = 2, 3, 4, 1


class DataError(Exception):
    pass


class CheckpointError(Exception):
    pass


def _load_training_images(cfg: RunConfig) -> ImageDataset:
    if cfg.synthetic is not None:
        return make_synthetic(cfg.synthetic)
    if not cfg.data.root:
        raise DataError("no dataset configured: set data.root or a synthetic section")
    return load_dataset(cfg.data)


def _load_test_set(cfg: RunConfig, labels: str | None = None) -> ImageDataset:
    if cfg.synthetic is not None:
        spec = replace(cfg.synthetic, seed=cfg.synthetic.seed + 1,
                       num_images=cfg.eval.num_synthetic_test)
        return make_synthetic(spec)
    spec = replace(cfg.data, split="test", label_file=labels or cfg.data.label_file)
    return load_dataset(spec)


def _load_trainer(path: str) -> Trainer:
    try:
        return Trainer.from_checkpoint(path)
    except (OSError, KeyError, ValueError, SafetensorError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc


def _read_images(path: str, resolution: int) -> tuple[list[str], torch.Tensor]:
    p = Path(path)
    files = [p] if p.is_file() else sorted(
        f for f in p.rglob("*") if f.suffix.lower() in {".png", ".jpg", ".jpeg"})
    if not files:
        raise DataError(f"no images found at {path}")
    images = []
    for f in files:
        with Image.open(f) as pil:
            if pil.size != (resolution, resolution):
                raise DataError(f"{f} is {pil.size[0]}x{pil.size[1]}, the model expects "
                                f"{resolution}x{resolution}")
            images.append(preprocess(pil, resolution))
    return [f.stem for f in files], torch.stack(images)


def _resolve_extractor(cfg: RunConfig):
    if cfg.eval.extractor == "random_conv":
        return RandomConvExtractor(cfg.network.img_channels, seed=cfg.eval.seed)
    return torch.jit.load(cfg.eval.extractor).eval()


def _resolve_oracle(cfg: RunConfig, num_classes: int):
    if cfg.eval.oracle == "none":
        return None
    if cfg.eval.oracle == "mean_color":
        return MeanColorOracle(max(num_classes, 2))
    return torch.jit.load(cfg.eval.oracle).eval()


# ------------------------------------------------------------------ commands

def cmd_train(cfg: RunConfig, args) -> None:
    run_dir = cfg.run_dir
    echo_config(cfg, run_dir)
    dataset = _load_training_images(cfg)
    if args.resume:
        trainer = _load_trainer(args.resume)
        trainer.cfg = cfg.train
    else:
        trainer = Trainer(cfg.network, cfg.train, run_config=cfg.to_dict())
    trainer.fit(dataset.images, run_dir)
    print(f"trained to step {trainer.step}; outputs in {run_dir}")


def cmd_translate(cfg: RunConfig, args) -> None:
    trainer = _load_trainer(args.ckpt)
    res = trainer.net_spec.resolution
    in_names, inputs = _read_images(args.inputs, res)
    ref_names, refs = _read_images(args.refs, res)
    out = Path(args.dest or cfg.run_dir / "samples" / "translate")
    G, E = trainer.ema["G"], trainer.ema["E"]
    outs = save_translation_grid(G, E, inputs.to(trainer.dtype), refs.to(trainer.dtype),
                                 out / "grid.png")
    for i, a in enumerate(in_names):
        for j, b in enumerate(ref_names):
            save_image_tensor(outs[i, j], out / f"{a}__{b}.png")
    print(f"wrote {len(in_names) * len(ref_names)} translations to {out}")


def cmd_interpolate(cfg: RunConfig, args) -> None:
    trainer = _load_trainer(args.ckpt)
    res = trainer.net_spec.resolution
    _, x_o = _read_images(args.input, res)
    _, x_r = _read_images(args.ref, res)
    steps = args.steps or cfg.eval.interpolation_steps
    frames = interpolate_styles(x_o[:1].to(trainer.dtype), x_r[:1].to(trainer.dtype), steps,
                                trainer.ema["G"], trainer.ema["E"])
    out = Path(args.dest or cfg.run_dir / "samples" / "interpolate.png")
    save_row_grid([torch.cat([x_o[:1], frames.float(), x_r[:1]])], out)
    print(f"wrote interpolation grid to {out}")


def cmd_search(cfg: RunConfig, args) -> None:
    trainer = _load_trainer(args.ckpt)
    res = trainer.net_spec.resolution
    _, queries = _read_images(args.query, res)
    if args.corpus:
        _, corpus = _read_images(args.corpus, res)
    else:
        corpus = _load_test_set(cfg).images
    k = args.k or cfg.eval.search_k
    E = trainer.ema["E"]
    rows = []
    for q in queries:
        hits = similarity_search(q.to(trainer.dtype), corpus.to(trainer.dtype), E, k)
        rows.append(torch.cat([q[None], corpus[[i for i, _ in hits]]]))
        print(" ".join(f"{i}:{s:.4f}" for i, s in hits))
    out = Path(args.dest or cfg.run_dir / "samples" / "search.png")
    save_row_grid(rows, out)
    print(f"wrote search grid to {out}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    trainer = _load_trainer(args.ckpt)
    test = _load_test_set(cfg, args.labels)
    labels = test.labels
    num_classes = len(test.class_names) or (int(labels.max()) + 1 if labels is not None else 0)
    oracle = _resolve_oracle(cfg, num_classes)
    report = evaluate_translation(
        trainer.ema["G"], trainer.ema["E"], test.images.to(trainer.dtype), labels,
        references_per_input=cfg.eval.references_per_input, oracle=oracle,
        extractor=_resolve_extractor(cfg), seed=cfg.eval.seed,
        compute_accuracy=labels is not None and oracle is not None,
        attribute_names=test.attribute_names or None, batch_size=cfg.eval.batch_size)
    report["step"] = trainer.step
    out = Path(args.dest or cfg.run_dir / "metrics")
    write_report(report, out, name=f"metrics_{trainer.step:07d}")
    for key in ("fid", "mfid", "accuracy"):
        if key in report:
            print(f"{key}: {report[key]:.4f}")


def cmd_make_synthetic(cfg: RunConfig, args) -> None:
    spec = cfg.synthetic
    if spec is None:
        from .data import SyntheticStyleSpec
        spec = SyntheticStyleSpec(resolution=cfg.network.resolution)
    overrides = {k: v for k, v in (("num_images", args.num_images), ("num_styles", args.num_styles),
                                   ("resolution", args.resolution)) if v is not None}
    spec = replace(spec, **overrides)
    dest = Path(args.dest)
    save_dataset(make_synthetic(spec), dest / "train")
    test = replace(spec, seed=spec.seed + 1, num_images=cfg.eval.num_synthetic_test)
    save_dataset(make_synthetic(test), dest / "test")
    print(f"wrote synthetic dataset to {dest}")


def cmd_smoke(cfg: RunConfig, args) -> None:
    from .smoke import run_desk_scale
    passes = 0
    for seed in args.seeds:
        r = run_desk_scale(cfg, seed)
        passes += r["passed"]
        print(f"seed {seed}: {'PASS' if r['passed'] else 'FAIL'} accuracy {r['accuracy']:.3f} "
              f"IoU {r['iou']:.3f} after {r['iters']} iters ({r['seconds']:.0f}s)")
    print(f"{passes}/{len(args.seeds)} seeds pass")


COMMANDS = {
    "train": cmd_train,
    "translate": cmd_translate,
    "interpolate": cmd_interpolate,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "make-synthetic": cmd_make_synthetic,
    "smoke": cmd_smoke,
}


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # the flags are accepted before or after the subcommand; the subcommand copy
    # suppresses its defaults so it does not clobber values given up front
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration", **kw)
    common.add_argument("--seed", type=int, help="override train.seed", **kw)
    common.add_argument("--out", help="override out_dir", **kw)
    common.add_argument("--set", dest="sub_overrides" if suppress else "overrides", action="append",
                        metavar="KEY=VALUE", help="dotted-key config override (repeatable)", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="contrast-translate", parents=[_common_flags(False)],
                                     description="Reference-guided image translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("translate", parents=[common], help="translate inputs with references")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--inputs", required=True, help="image file or directory")
    p.add_argument("--refs", required=True, help="image file or directory")
    p.add_argument("--dest")

    p = sub.add_parser("interpolate", parents=[common], help="interpolate style codes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--dest")

    p = sub.add_parser("search", parents=[common], help="nearest neighbours in style space")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--corpus", help="image directory (default: the test split)")
    p.add_argument("--k", type=int)
    p.add_argument("--dest")

    p = sub.add_parser("evaluate", parents=[common], help="FID / mFID / translation accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--labels", help="label CSV for the test split")
    p.add_argument("--dest")

    p = sub.add_parser("make-synthetic", parents=[common], help="write the synthetic dataset")
    p.add_argument("--dest", required=True)
    p.add_argument("--num-images", type=int)
    p.add_argument("--num-styles", type=int)
    p.add_argument("--resolution", type=int)

    p = sub.add_parser("smoke", parents=[common],
                       help="desk-scale colour/shape experiment with early stopping")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        overrides = (args.overrides or []) + getattr(args, "sub_overrides", [])
        cfg = parse_config(args.config, overrides, seed=args.seed, out_dir=args.out)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
