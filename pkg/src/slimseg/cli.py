"""Command-line entry point: generate / index / train / eval / ablate / report."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import dataset, report, trainer
from .distribution import save_index
from .nn import load_checkpoint


def _cmd_generate(args):
    cfg = dataset.SynthConfig(num_images=args.num_images, height=args.size,
                              width=args.size, num_classes=args.classes,
                              seed=args.seed)
    manifest = dataset.generate_synthetic(cfg, args.out)
    print(f"wrote {len(manifest.records)} images under {args.out}")


def _cmd_index(args):
    manifest = dataset.CorpusManifest.load(args.manifest)
    samples = trainer.load_samples(manifest)
    index = trainer.index_samples(samples)
    out = args.out or os.path.join(manifest.root, "index.jsonl")
    save_index(index, out)
    print(f"fitted scale_a={index.fit.scale_a:.6g} "
          f"ks={index.fit.ks_stat:.4f} over {index.fit.n_samples} samples; "
          f"index at {out}")


def _load_config(args) -> trainer.RunConfig:
    if args.config:
        cfg = trainer.RunConfig.from_file(args.config)
    else:
        cfg = trainer.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_train(args):
    cfg = _load_config(args)
    manifest = dataset.CorpusManifest.load(args.manifest)
    result = trainer.run(cfg, manifest, out_dir=args.out)
    print(f"mIoU={result.metrics.miou:.4f} "
          f"train_flops={result.ledger.train_flops} "
          f"infer_flops/img={result.ledger.infer_flops_per_image:.0f}")
    print(f"artifacts under {args.out}")


def _cmd_eval(args):
    cfg = _load_config(args)
    manifest = dataset.CorpusManifest.load(args.manifest)
    samples = trainer.load_samples(manifest)
    index = trainer.index_samples(samples)
    net = load_checkpoint(args.checkpoint)
    split = [s for s in samples if s.split == args.split]
    metrics = trainer.evaluate(net, split, index, cfg)
    print(json.dumps({"miou": metrics.miou,
                      "pixel_accuracy": metrics.pixel_accuracy,
                      "per_class_iou": metrics.per_class_iou}))


def _cmd_ablate(args):
    cfg = _load_config(args)
    manifest = dataset.CorpusManifest.load(args.manifest)
    rows = trainer.ablation_suite(manifest, cfg, args.out)
    for row in rows:
        print(f"{row['run']:<16} mIoU={row['miou']:.4f} "
              f"train_flops={row['train_flops']}")


def _cmd_report(args):
    outputs = report.render_all(args.runs, args.out)
    for path in outputs:
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimseg",
        description="complexity-driven data slimming + channel pruning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=200)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("index", help="compute complexity scores and fit the CDF")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_index)

    for name, fn in (("train", _cmd_train), ("ablate", _cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="render figures/tables from run dirs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
