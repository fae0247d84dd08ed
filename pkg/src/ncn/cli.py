"""Command-line surface.

Subcommands: encode, decode, train, sweep, eval, gen-synthetic.
Exit codes: 0 success, 1 usage or I/O error, 2 missing capability,
3 numeric failure.
"""

import argparse
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import datasets, metrics, trainer
from .analysis import train_toy_analysis
from .checkpoint import load_model_file
from .errors import BitstreamError, CapabilityError, CodecError, NumericError
from .masking import masked_encode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CAPABILITY = 2
EXIT_NUMERIC = 3


@contextmanager
def _atomic_write(path):
    """Write to a temp file and rename, so failures leave no partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextmanager
def checkpoint_lock(path):
    """Advisory lock file guarding checkpoint writes."""
    lock = Path(str(path) + ".lock")
    fd = None
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        yield
    finally:
        if fd is not None:
            os.close(fd)
            lock.unlink(missing_ok=True)


def _load_checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return load_model_file(path)


def cmd_encode(args):
    loaded = _load_checkpoint(args.model)
    img = datasets.load_image(args.infile)
    x = datasets.to_tensor(img)
    lam_list = loaded.meta.get("lambda_list") or []
    lam = loaded.meta.get("lambda")
    lambda_id = lam_list.index(lam) if lam in lam_list else 0
    if args.mask:
        if loaded.lsm_head is None:
            raise CapabilityError(
                "model has no latent-masking section; re-train or encode without --mask"
            )
        data, info = masked_encode(
            loaded.model, x, loaded.lsm_backbone, loaded.lsm_head,
            lambda_id=lambda_id,
            stage=loaded.meta.get("lsm", {}).get("stage", "s16"),
        )
    else:
        data, info = codec_mod.encode_image(loaded.model, x, lambda_id=lambda_id)
    with _atomic_write(args.outfile) as f:
        f.write(data)
    print(f"{args.outfile}: {len(data)} bytes, {info.bpp:.4f} bpp "
          f"(b1 {info.bits_b1} bits, b2 {info.bits_b2} bits)")
    return EXIT_OK


def cmd_decode(args):
    loaded = _load_checkpoint(args.model)
    with open(args.infile, "rb") as f:
        data = f.read()
    x_hat = codec_mod.decode_image(loaded.model, data)
    out = Path(args.outfile)
    tmp = out.with_name(out.stem + ".part" + out.suffix)
    try:
        datasets.save_image(tmp, x_hat)
        os.replace(tmp, out)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    h, w = x_hat.shape[2], x_hat.shape[3]
    print(f"{args.outfile}: {w}x{h}")
    return EXIT_OK


def cmd_gen_synthetic(args):
    manifest = datasets.generate_dataset(
        args.out, args.n, args.classes, args.seed, size=args.size
    )
    print(
        f"{args.out}: {len(manifest.images)} images, "
        f"{len(manifest.splits['train'])} train / {len(manifest.splits['val'])} val, "
        f"classes {manifest.class_names}, seed {manifest.seed}"
    )
    return EXIT_OK


def cmd_train(args):
    plan = trainer.load_plan(args.plan)
    manifest = datasets.load_manifest(args.data)
    analysis = None
    needs_analysis = any(p.loss in ("task", "feature") for p in plan.phases)
    if needs_analysis:
        analysis, score = train_toy_analysis(manifest, seed=plan.seed)
        print(f"toy analysis network ready (clean wAP {score:.3f})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = trainer.train(plan, manifest, analysis=analysis, log_dir=out)
    for i, ckpt in enumerate(ckpts):
        path = out / f"model_l{i}.ncnw"
        with checkpoint_lock(path):
            ckpt.save(path)
        print(f"saved {path} (lambda {ckpt.meta['lambda']})")
    return EXIT_OK


def cmd_sweep(args):
    plan = trainer.load_plan(args.plan)
    manifest = datasets.load_manifest(args.data)
    analysis = None
    if any(p.loss in ("task", "feature") for p in plan.phases) or args.metric == "wap":
        analysis, score = train_toy_analysis(manifest, seed=plan.seed)
        print(f"toy analysis network ready (clean wAP {score:.3f})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts, curve = trainer.sweep(plan, manifest, analysis=analysis, metric=args.metric, log_dir=out)
    for i, ckpt in enumerate(ckpts):
        path = out / f"model_l{i}.ncnw"
        with checkpoint_lock(path):
            ckpt.save(path)
    csv_path = out / f"rd_{curve.label}.csv"
    metrics.write_rd_csv(csv_path, [curve], comment=f"config_hash={plan.config_hash()}")
    plot_path = out / f"rd_{curve.label}.png"
    _plot_curves([curve], plot_path)
    print(f"wrote {csv_path} and {plot_path}")
    return EXIT_OK


def _plot_curves(curves, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for curve in curves:
        ax.plot(curve.bpp, curve.quality, marker="o", label=curve.label)
    ax.set_xlabel("bpp")
    ax.set_ylabel(curves[0].quality_kind)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args):
    curves = []
    for path in args.curves:
        curves.extend(metrics.read_rd_csv(path))
    if len(curves) < 2:
        raise ValueError("eval needs at least two curves (first is the anchor)")
    anchor, rest = curves[0], curves[1:]
    if args.bd:
        print(f"anchor: {anchor.label}")
        print(f"{'curve':<24} {'BD-quality':>12} {'BD-rate %':>12}")
        for curve in rest:
            bdq = metrics.bd_quality(curve, anchor)
            bdr = metrics.bd_rate(curve, anchor)
            print(f"{curve.label:<24} {bdq:>12.4f} {bdr:>12.2f}")
    else:
        for curve in curves:
            print(f"{curve.label}: {len(curve.points)} points, kind {curve.quality_kind}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ncn", description="Machine-oriented learned image codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress an image to a bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--mask", action="store_true", help="apply latent masking (needs LSM section)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream to an image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train models per the plan file")
    p.add_argument("--plan", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train a lambda sweep and emit an RD curve")
    p.add_argument("--plan", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="psnr", choices=["psnr", "msssim", "wap"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="compare RD curves (first CSV curve = anchor)")
    p.add_argument("--curves", nargs="+", required=True)
    p.add_argument("--bd", action="store_true", help="print Bjontegaard deltas")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synthetic", help="generate a seeded shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CapabilityError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CAPABILITY
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BitstreamError, CodecError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
