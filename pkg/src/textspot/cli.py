"""Command-line interface: gen-data, train, eval, infer."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from textspot import engine
from textspot.dataset_io import read_dataset, read_pgm, write_dataset, write_pgm
from textspot.synth import degrade_annotation, generate_sample


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, RuntimeError, OSError) as err:
        print(f"textspot {args.command}: {err}", file=sys.stderr)
        return 2


def _build_parser():
    parser = argparse.ArgumentParser(prog="textspot", description="Desk-scale scene-text spotter.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--count", required=True, type=int, help="number of samples")
    gen.add_argument("--seed", required=True, type=int, help="base seed; sample i uses seed+i")
    gen.add_argument("--kind", required=True, choices=["full", "text", "weak"])
    gen.add_argument("--size", type=int, default=64, help="square image side (default 64)")
    gen.add_argument("--max-instances", type=int, default=2)
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--max-text-len", type=int, default=4)
    gen.set_defaults(handler=_cmd_gen_data)

    tr = sub.add_parser("train", help="train from a JSON config")
    tr.add_argument("--config", required=True, help="JSON file mirroring TrainConfig fields")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.set_defaults(handler=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True, help="fully annotated dataset directory")
    ev.set_defaults(handler=_cmd_eval)

    inf = sub.add_parser("infer", help="spot text in one image")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--image", required=True, help="input PGM file")
    inf.add_argument("--out-prefix", required=True, help="writes <prefix>.overlay.pgm and <prefix>.txt")
    inf.set_defaults(handler=_cmd_infer)
    return parser


def _cmd_gen_data(args):
    if args.count < 1:
        print("gen-data: --count must be positive", file=sys.stderr)
        return 2
    samples = []
    for i in range(args.count):
        seed = args.seed + i
        sample = generate_sample(
            seed,
            size=args.size,
            max_instances=args.max_instances,
            noise=args.noise,
            max_text_len=args.max_text_len,
        )
        if args.kind != "full":
            sample = degrade_annotation(sample, args.kind, seed=seed)
        samples.append(sample)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} {args.kind} samples to {args.out}")
    return 0


def _cmd_train(args):
    config = engine.TrainConfig.from_json(args.config)
    engine.train(config, out_path=args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args):
    model, _, _, _ = engine.load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    metrics = engine.evaluate(model, samples)
    print("\t".join(f"{v:.4f}" for v in metrics.as_row()))
    return 0


def _cmd_infer(args):
    model, _, _, _ = engine.load_checkpoint(args.ckpt)
    image = read_pgm(args.image)
    results = model.spot(image)

    overlay = np.round(image * 255.0).astype(np.uint8)
    if results:
        # distinct bright gray levels, one per instance
        levels = np.linspace(255, 128, num=len(results)).round().astype(np.uint8)
        for level, res in zip(levels, results):
            overlay[res.mask] = level
    write_pgm(f"{args.out_prefix}.overlay.pgm", overlay.astype(np.float64) / 255.0)
    with open(f"{args.out_prefix}.txt", "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(f"{res.score:.4f}\t{res.transcription}\n")
    print(f"{len(results)} instances -> {args.out_prefix}.overlay.pgm, {args.out_prefix}.txt")
    return 0


if __name__ == "__main__":
    sys.exit(main())
