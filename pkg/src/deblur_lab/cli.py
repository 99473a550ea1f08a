"""Command-line entry point: ``deblur-lab <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails.  Every run writes ``resolved_config.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import blur_synth as bs
from .errors import DeblurLabError
from .metrics_loss import LossWeights
from .model import ModelConfig

log = logging.getLogger("deblur_lab")

SEED_ENV = "DEBLUR_LAB_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def size_range(text: str) -> tuple[int, int, int]:
    """Parse ``start:stop:step`` (stop inclusive) or a single size."""
    try:
        parts = [int(p) for p in text.split(":")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size range {text!r}; use start:stop:step")
    if len(parts) == 1:
        parts = [parts[0], parts[0], 2]
    elif len(parts) == 2:
        parts.append(2)
    if len(parts) != 3 or parts[2] <= 0 or parts[0] > parts[1]:
        raise argparse.ArgumentTypeError(f"bad size range {text!r}; use start:stop:step")
    return tuple(parts)


def named_numbers(kind):
    def parse(text: str) -> dict:
        out = {}
        for item in text.split(","):
            name, sep, value = item.partition("=")
            if not sep or name.strip() not in ("train", "val", "test"):
                raise argparse.ArgumentTypeError(f"expected train=..,val=..,test=.. got {text!r}")
            try:
                out[name.strip()] = kind(value)
            except ValueError:
                raise argparse.ArgumentTypeError(f"bad number in {item!r}")
        return out
    return parse


def key_values(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"expected key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except ValueError:
            out[key] = value
    return out


def image_size(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}; use 256 or 256x256")
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--seed", type=int, default=None,
                   help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    g.add_argument("--config", default=None, help='JSON file with "model" and "train" sections')
    g.add_argument("--out", default="out", help="output directory")
    g.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = _Parser(prog="deblur-lab", description="Motion-deblurring toolkit.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common], formatter_class=fmt)

    k = sub.add_parser("kernel", help="generate or inspect blur kernels", formatter_class=fmt)
    ksub = k.add_subparsers(dest="kernel_command", required=True, parser_class=_Parser)
    kg = ksub.add_parser("gen", help="generate PSF files and spectrum images", parents=[common],
                         formatter_class=fmt)
    kg.add_argument("--type", choices=("linear", "trajectory"), default="linear")
    kg.add_argument("--size", type=int, default=13, help="kernel side length (odd)")
    kg.add_argument("--angle", type=float, default=0.0, help="linear blur angle in degrees")
    kg.add_argument("--length", type=float, default=9.0, help="linear blur length in pixels")
    kg.add_argument("--jitter", type=float, default=1.0, help="trajectory shake strength")
    kg.add_argument("--count", type=int, default=1, help="number of kernels")
    kg.add_argument("--spectrum-size", type=int, default=256, help="FFT size of the spectrum image")
    kg.add_argument("--linear-spectrum", action="store_true", help="skip log scaling")
    ki = ksub.add_parser("inspect", help="summarize PSF files", parents=[common], formatter_class=fmt)
    ki.add_argument("paths", nargs="+", help="PSF files")
    ki.add_argument("--spectrum-size", type=int, default=256, help="FFT size of the spectrum image")

    b = add("blur", "synthesize a paired blurred/sharp corpus")
    b.add_argument("--sharp-dir", default=None, help="sharp images (default: synthetic text scenes)")
    b.add_argument("--scenes", type=int, default=20, help="synthetic scenes when no --sharp-dir")
    b.add_argument("--img-size", type=image_size, default=(256, 256), help="HxW of the images")
    b.add_argument("--n", type=int, default=100, help="number of pairs")
    b.add_argument("--sizes", type=size_range, default=(13, 31, 2), help="kernel sizes start:stop:step")
    b.add_argument("--generator", choices=("trajectory", "linear"), default="trajectory")
    b.add_argument("--jitter", type=float, default=1.0, help="trajectory shake strength")
    b.add_argument("--noise-sigma", type=float, default=0.0, help="additive Gaussian noise std")
    b.add_argument("--boundary", choices=("circular", "reflect"), default="circular")
    b.add_argument("--jobs", type=int, default=1, help="worker threads")

    s = add("stats", "blur severity summary of a paired corpus")
    s.add_argument("--blurred-dir", required=True)
    s.add_argument("--sharp-dir", required=True)
    s.add_argument("--img-size", type=image_size, default=(256, 256), help="HxW after resizing")

    def data_flags(p):
        p.add_argument("--blurred-dir", required=True)
        p.add_argument("--sharp-dir", required=True)
        p.add_argument("--fractions", type=named_numbers(float), default=None,
                       help="split fractions, e.g. train=0.7,test=0.2,val=0.1")
        p.add_argument("--counts", type=named_numbers(int), default=None,
                       help="split counts, e.g. train=5000,val=500,test=500")
        p.add_argument("--reduced", type=int, default=None, metavar="IMG",
                       help="use the reduced model at IMGxIMG")

    t = add("train", "train the CNN-ViT model")
    data_flags(t)
    t.add_argument("--epochs", type=int, default=None, help="override epochs_max")
    t.add_argument("--lr", type=float, default=None, help="override the learning rate")
    t.add_argument("--time-budget", type=float, default=None, help="override the per-epoch budget (s)")
    t.add_argument("--loss-weights", type=str, default=None,
                   help="alpha,beta,gamma,delta for MAE,MSE,perceptual,1-SSIM")
    t.add_argument("--log-batches", action="store_true", help="also log every training step")

    e = add("eval", "evaluate a checkpoint")
    data_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    d = add("deblur", "restore one image")
    d.add_argument("--input", required=True, help="blurred image")
    d.add_argument("--output", default="deblurred.png", help="file name inside --out")
    d.add_argument("--checkpoint", default=None)
    d.add_argument("--method", choices=("inverse", "wiener", "richardson_lucy", "landweber", "tv"),
                   default=None, help="classical solver instead of a checkpoint")
    d.add_argument("--kernel", default=None, help="PSF file for classical solvers")
    d.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="solver parameter, repeatable (epsilon, nsr, iterations, tau, lambda, step)")
    d.add_argument("--img-size", type=image_size, default=None, help="resize before a classical solve")

    gc = add("gradcheck", "finite-difference gradient check of the engine and model")
    gc.add_argument("--seeds", type=int, default=20, help="random cases per op")
    return parser


def resolve_seed(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}")


def _echo(out: Path, args, extra=None) -> None:
    cfg = {k: v for k, v in vars(args).items()}
    cfg.update(extra or {})
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=list))


def _configs(args):
    from .pipeline import TrainConfig, load_config
    if args.config:
        mcfg, tcfg = load_config(args.config)
    else:
        mcfg, tcfg = ModelConfig(), TrainConfig()
    if getattr(args, "reduced", None):
        mcfg = ModelConfig.reduced(args.reduced)
    return mcfg, tcfg


def _dataset(args, img_size):
    from .pipeline import ingest, split
    ds = ingest(args.blurred_dir, args.sharp_dir, img_size)
    if args.fractions and args.counts:
        raise UsageError("give --fractions or --counts, not both")
    return split(ds, fractions=args.fractions, counts=args.counts, seed=args.seed)


def cmd_kernel_gen(args, out):
    for i in range(args.count):
        seed = args.seed ^ i
        if args.type == "linear":
            kernel = bs.generate_linear_kernel(args.size, args.angle, args.length, seed=seed)
        else:
            kernel = bs.generate_trajectory_kernel(args.size, seed, args.jitter)
        stem = out / f"kernel_{i:04d}"
        bs.save_kernel(stem.with_suffix(".psf"), kernel)
        bs.kernel_spectrum(kernel, (args.spectrum_size,) * 2, not args.linear_spectrum) \
            .save_png(f"{stem}_spectrum.png")
        print(f"{stem}.psf size {kernel.size} sum {kernel.values.sum():.12f}")
    _echo(out, args)


def cmd_kernel_inspect(args, out):
    rows = []
    for path in args.paths:
        kernel = bs.load_kernel(path)
        name = Path(path).stem
        bs.kernel_spectrum(kernel, (args.spectrum_size,) * 2, True).save_png(out / f"{name}_spectrum.png")
        ys, xs = np.nonzero(kernel.values > 0)
        row = {"path": str(path), "size": kernel.size, "sum": float(kernel.values.sum()),
               "support_px": int(len(ys)), "anisotropy": bs.spectrum_anisotropy(kernel)}
        rows.append(row)
        print(json.dumps(row))
    (out / "inspect.json").write_text(json.dumps(rows, indent=2))
    _echo(out, args)


def cmd_blur(args, out):
    from .pipeline import load_image, save_png
    from .synthetic import text_scenes
    if args.sharp_dir:
        files = sorted(p for p in Path(args.sharp_dir).iterdir()
                       if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"})
        if not files:
            raise DeblurLabError(f"no images in {args.sharp_dir}")
        sources = [(p.stem, load_image(p, args.img_size)) for p in files]
    else:
        if args.img_size[0] != args.img_size[1]:
            raise UsageError("synthetic scenes are square; give a single --img-size")
        sources = text_scenes(args.scenes, args.img_size[0], args.seed)
    samples = bs.build_corpus(sources, args.n, args.sizes, args.generator, args.noise_sigma,
                              args.boundary, args.seed, args.jitter, args.jobs)
    for sub in ("blurred", "sharp", "kernels"):
        (out / sub).mkdir(exist_ok=True)
    for smp in samples:
        save_png(out / "blurred" / f"{smp.id}.png", smp.blurred)
        save_png(out / "sharp" / f"{smp.id}.png", smp.sharp)
        bs.save_kernel(out / "kernels" / f"{smp.id}.psf", smp.kernel)
    (out / "manifest.json").write_text(json.dumps([{"id": s.id, **s.meta} for s in samples], indent=2))
    print(f"wrote {len(samples)} pairs to {out}")
    _echo(out, args)


def cmd_stats(args, out):
    from .pipeline import ingest, severity_stats
    stats = severity_stats(ingest(args.blurred_dir, args.sharp_dir, args.img_size))
    stats["reference"] = {"psnr": {"min": 10.08, "mean": 22.32}, "ssim": {"min": -0.0264, "mean": 0.63}}
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    print(f"{'':10s}{'PSNR min':>10s}{'PSNR mean':>11s}{'SSIM min':>10s}{'SSIM mean':>11s}")
    for label, d in (("corpus", stats), ("reference", stats["reference"])):
        print(f"{label:10s}{d['psnr']['min']:10.2f}{d['psnr']['mean']:11.2f}"
              f"{d['ssim']['min']:10.4f}{d['ssim']['mean']:11.4f}")
    _echo(out, args)


def cmd_train(args, out):
    from .pipeline import train
    mcfg, tcfg = _configs(args)
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["epochs_max"] = args.epochs
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.time_budget is not None:
        overrides["epoch_time_budget_s"] = args.time_budget
    if args.log_batches:
        overrides["log_batches"] = True
    if args.loss_weights:
        try:
            overrides["loss_weights"] = LossWeights(*[float(v) for v in args.loss_weights.split(",")])
        except (TypeError, ValueError):
            raise UsageError("--loss-weights takes four comma-separated numbers")
    tcfg = replace(tcfg, **overrides)
    ds = _dataset(args, mcfg.img_size)
    _echo(out, args, {"model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
                      "splits": {p.id: p.split for p in ds.pairs}})
    result = train(ds, mcfg, tcfg, out_dir=out)
    print(f"trained {len(result.history)} epochs; best val PSNR {result.checkpoint.best_val_psnr:.3f} dB "
          f"at epoch {result.checkpoint.epoch}; checkpoint {out / 'best.dbck'}")


def cmd_eval(args, out):
    from .pipeline import Checkpoint, evaluate
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _dataset(args, ckpt.config.img_size)
    pairs = ds.pairs if args.split == "all" else [p for p in ds.pairs if p.split == args.split]
    report = evaluate(pairs, ckpt)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    agg = report.aggregates
    print(f"{len(pairs)} images: PSNR {agg['mean_psnr']:.3f} dB, SSIM {agg['mean_ssim']:.4f}, "
          f"{report.mean_inference_ms:.1f} ms/image, {report.param_count} params")
    _echo(out, args)


def cmd_deblur(args, out):
    from .pipeline import Checkpoint, deblur_single
    if (args.checkpoint is None) == (args.method is None):
        raise UsageError("give exactly one of --checkpoint or --method")
    target = out / Path(args.output).name
    if args.checkpoint:
        deblur_single(args.input, target, checkpoint=Checkpoint.load(args.checkpoint))
    else:
        if args.kernel is None:
            raise UsageError("--method needs --kernel")
        deblur_single(args.input, target, method=args.method, kernel=bs.load_kernel(args.kernel),
                      params=key_values(args.param), img_size=args.img_size)
    print(f"wrote {target}")
    _echo(out, args)


def cmd_gradcheck(args, out):
    from .gradcheck import run_suite
    report = run_suite(range(args.seeds), model_seed=args.seed)
    lines = report.lines()
    print("\n".join(lines))
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    _echo(out, args)
    if not report.passed:
        raise DeblurLabError("gradient check exceeded tolerance")


COMMANDS = {("kernel", "gen"): cmd_kernel_gen, ("kernel", "inspect"): cmd_kernel_inspect,
            "blur": cmd_blur, "stats": cmd_stats, "train": cmd_train, "eval": cmd_eval,
            "deblur": cmd_deblur, "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    key = ("kernel", args.kernel_command) if args.command == "kernel" else args.command
    try:
        args.seed = resolve_seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[key](args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deblur-lab: error: {exc}", file=sys.stderr)
        return 1
    except (DeblurLabError, ValueError, OSError) as exc:
        print(f"deblur-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
