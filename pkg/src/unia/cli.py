"""Command-line interface.

Subcommands: synth-gen, train, eval, infer, refine, mcr, gradcheck.
Training options resolve as defaults < --config JSON < UNIA_SEED < flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import checkpoint, netpbm, pipeline
from .affinity import (
    AffinityMatrix,
    aggregate_attention,
    pixel_adaptive_refine,
    random_walk_refine,
    sinkhorn_normalize,
    symmetrize,
)
from .config import Config, coerce, field_names
from .integrity import composite_check, op_checks
from .refine import mutual_complement_refine
from .synth import SyntheticSpec, generate_dataset
from .tensor import Tensor


def _add_config_flags(parser: argparse.ArgumentParser):
    for name in field_names():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                            metavar="V", help=argparse.SUPPRESS)
    parser.add_argument("--config", default=None, help="JSON config file")


def _config_from_args(args: argparse.Namespace) -> Config:
    overrides = {}
    for name in field_names():
        raw = getattr(args, name)
        if raw is not None:
            overrides[name] = coerce(name, raw)
    return Config.load(args.config, overrides)


def _cmd_synth_gen(args) -> int:
    spec = SyntheticSpec(
        size=args.size,
        num_classes=args.classes,
        base_freq=args.base_freq,
        amplitude=args.amplitude,
        ambiguity=args.delta,
        shapes_per_image=args.shapes,
        seed=args.seed,
    )
    generate_dataset(spec, args.count, args.out_dir)
    print(f"wrote {args.count} samples to {args.out_dir}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    paths = pipeline.train(cfg)
    print(f"losses: {paths['losses_csv']}")
    print(f"checkpoint: {paths['ckpt_dir']}")
    return 0


def _cmd_eval(args) -> int:
    report = pipeline.evaluate(args.ckpt, args.data_dir)
    payload = {"segmentation": report.to_dict()}
    if args.pseudo:
        model, cfg = pipeline.load_model(args.ckpt)
        from .synth import load_dataset

        quality = pipeline.pseudo_quality(model, cfg, load_dataset(args.data_dir))
        payload["pseudo_labels"] = {
            "refined": quality["pseudo"].to_dict(),
            "raw_cam": quality["raw"].to_dict(),
        }
    out = args.out or os.path.join(args.ckpt, "..", "metrics.json")
    with open(out, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    print(f"mIoU {report.miou:.4f}  DSC {report.macro_dsc:.4f}  "
          f"mean CR {report.mean_cr if report.mean_cr is None else round(report.mean_cr, 4)}")
    print(f"metrics: {os.path.normpath(out)}")
    return 0


def _cmd_infer(args) -> int:
    paths = pipeline.infer(args.ckpt, args.image, args.out_prefix)
    print(f"mask: {paths['mask']}")
    print(f"overlay: {paths['overlay']}")
    return 0


def _cmd_refine(args) -> int:
    cams = checkpoint.load_blob(args.cam_blob, args.cam_manifest)
    attn = checkpoint.load_blob(args.attn_blob, args.attn_manifest)
    cam_stack = cams[sorted(cams)[0]]
    blocks = [Tensor(attn[k]) for k in sorted(attn)]
    aff = symmetrize(sinkhorn_normalize(
        aggregate_attention(blocks), args.sinkhorn_iters, args.sinkhorn_tol
    ))
    refined = random_walk_refine(cam_stack, aff, t=args.rw_iters)
    out = {"cam_walk": refined}
    if args.image:
        image = netpbm.read_ppm(args.image).transpose(2, 0, 1) / 255.0
        out["cam_par"] = pixel_adaptive_refine(refined, image, iters=args.par_iters)
    os.makedirs(args.out_dir, exist_ok=True)
    checkpoint.save_blob(
        {k: Tensor(v) for k, v in out.items()},
        os.path.join(args.out_dir, "refined.bin"),
        os.path.join(args.out_dir, "refined.json"),
    )
    final = out.get("cam_par", refined)
    for c in range(final.shape[0]):
        netpbm.write_pgm(
            os.path.join(args.out_dir, f"class_{c + 1}.pgm"),
            np.round(np.clip(final[c], 0, 1) * 255),
        )
    print(f"refined maps: {args.out_dir}")
    return 0


def _cmd_mcr(args) -> int:
    masks = [netpbm.read_pgm(p).astype(np.int64) for p in (args.p1, args.p2, args.p3)]
    if not (masks[0].shape == masks[1].shape == masks[2].shape):
        print(
            f"error: mask shapes differ: {[m.shape for m in masks]}",
            file=sys.stderr,
        )
        return 2
    netpbm.write_pgm(args.out, mutual_complement_refine(*masks))
    print(f"refined mask: {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    failed = False
    for name, err in op_checks(seed=args.seed):
        ok = err < args.tolerance
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  op {name:<20s} rel.err {err:.3e}")
    if not args.ops_only:
        for name, err in sorted(composite_check(seed=args.seed).items()):
            ok = err < args.tolerance
            failed |= not ok
            print(f"{'PASS' if ok else 'FAIL'}  composite {name:<28s} rel.err {err:.3e}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unia", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic ambiguity dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--delta", type=float, default=0.6, help="background ambiguity in [0, 1]")
    p.add_argument("--shapes", type=int, default=2)
    p.add_argument("--base-freq", type=float, default=5.0)
    p.add_argument("--amplitude", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train", help="train the full pipeline")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--pseudo", action="store_true", help="also score pseudo labels")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="segment one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("refine", help="refine a CAM blob with attention affinity")
    p.add_argument("--cam-blob", required=True)
    p.add_argument("--cam-manifest", required=True)
    p.add_argument("--attn-blob", required=True)
    p.add_argument("--attn-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--image", default=None, help="PPM image enabling the pixel-adaptive pass")
    p.add_argument("--sinkhorn-iters", type=int, default=50)
    p.add_argument("--sinkhorn-tol", type=float, default=1e-6)
    p.add_argument("--rw-iters", type=int, default=2)
    p.add_argument("--par-iters", type=int, default=10)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("mcr", help="mutually complement three pseudo masks")
    p.add_argument("--p1", required=True)
    p.add_argument("--p2", required=True)
    p.add_argument("--p3", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mcr)

    p = sub.add_parser("gradcheck", help="finite-difference integrity suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
