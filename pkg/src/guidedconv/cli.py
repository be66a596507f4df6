"""Command-line entry point: ``guidedconv <command> [flags]``.

Every command prints a reproducibility header (version, seed, hash of the
parsed flags) as its first stdout line.  Failures print exactly one line to
stderr, ``error[<category>]: <message>``, and exit with:

    0 ok, 2 usage / invalid configuration, 3 I/O (missing or malformed file),
    4 numerical failure (NaN loss), 5 selftest failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_SELFTEST = 0, 2, 3, 4, 5

EXIT_CODES_HELP = """exit codes:
  0  success
  2  usage error or invalid configuration   (stderr: error[usage]: ...)
  3  missing / unreadable / malformed file   (stderr: error[io]: ...)
  4  numerical failure, e.g. NaN loss        (stderr: error[numeric]: ...)
  5  selftest group failed                   (stderr: error[selftest]: ...)
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


OUTPUT_FLAGS = ("func", "out", "csv", "color")


def header(seed, args):
    """One-line provenance record; output locations are not part of the configuration hash."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in OUTPUT_FLAGS}
    digest = hashlib.sha256(json.dumps(flags, sort_keys=True, default=str).encode()).hexdigest()[:12]
    return f"# guidedconv {__version__} seed={seed} config_hash={digest}"


def _hw(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


def _channels(text):
    try:
        return tuple(int(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- shared flag groups ------------------------------------------------------

def _add_net_flags(p):
    g = p.add_argument_group("network")
    g.add_argument("--fusion", default="DE_Guided",
                   help="DE_Guided, EE_Guided, DD_Guided, Add, Concat, FirstGuide or LastGuide (default DE_Guided)")
    g.add_argument("--stages", type=int, default=3, help="encoder/decoder stages (default 3)")
    g.add_argument("--channels", type=_channels, default=(32, 64, 128),
                   help="comma-separated width per stage (default 32,64,128)")
    g.add_argument("--kernel-size", type=int, default=3, help="guided kernel size K (default 3)")
    g.add_argument("--grayscale", action="store_true", help="1-channel guidance image")


def _add_data_flags(p, val=True):
    g = p.add_argument_group("data")
    g.add_argument("--train-manifest", help="manifest of image<TAB>sparse<TAB>gt lines")
    g.add_argument("--synthetic-train", type=int, default=512,
                   help="number of synthetic training scenes when no manifest is given (default 512)")
    if val:
        g.add_argument("--val-manifest", help="validation manifest")
        g.add_argument("--synthetic-val", type=int, default=64,
                       help="number of synthetic validation scenes when no manifest is given (default 64)")
    g.add_argument("--size", type=_hw, default=(64, 128), help="synthetic scene size HxW (default 64x128)")
    g.add_argument("--sparse-count", type=int, default=400, help="sparse points per synthetic scene (default 400)")
    g.add_argument("--crop", type=_hw, help="bottom crop HxW applied to manifest samples, e.g. 256x1216")


def _add_train_flags(p):
    g = p.add_argument_group("optimisation")
    g.add_argument("--iters", type=int, default=10000, help="training iterations (default 10000)")
    g.add_argument("--batch-size", type=int, default=8, help="batch size (default 8)")
    g.add_argument("--lr", type=float, default=1e-3, help="initial learning rate (default 1e-3)")
    g.add_argument("--weight-decay", type=float, default=1e-6, help="L2 weight decay (default 1e-6)")
    g.add_argument("--lr-period", type=int, default=2000, help="halve the lr every this many iterations (default 2000)")
    g.add_argument("--sum-loss", action="store_true", help="sum squared errors instead of averaging over valid pixels")
    g.add_argument("--precision", choices=["float32", "float64"], default="float32", help="tensor dtype (default float32)")
    g.add_argument("--checkpoint-every", type=int, default=1000, help="checkpoint interval in iterations (default 1000)")


def _net_config(args, size):
    from .network import NetConfig

    return NetConfig(stage_count=args.stages, channels=args.channels, kernel_size=args.kernel_size,
                     fusion=args.fusion, input_height=size[0], input_width=size[1],
                     image_channels=1 if args.grayscale else 3)


def _train_config(args):
    from .trainer import TrainConfig

    return TrainConfig(lr0=args.lr, weight_decay=args.weight_decay, lr_halving_period_iters=args.lr_period,
                       batch_size=args.batch_size, max_iters=args.iters, seed=args.seed,
                       precision=args.precision, mean_loss=not args.sum_loss,
                       checkpoint_every=args.checkpoint_every)


def _dataset(manifest, count, split, args, grayscale=False):
    from .data import DepthDataset, load_manifest_samples, synthetic_dataset

    if manifest:
        samples = load_manifest_samples(manifest, crop=args.crop)
        if not samples:
            raise UsageError(f"{manifest}: manifest is empty")
        ds = DepthDataset.from_samples(samples)
    else:
        ds = synthetic_dataset(count, args.seed, *args.size, sparse_count=args.sparse_count, split=split)
    if grayscale:
        ds.image = ds.image.mean(axis=1, keepdims=True)
    return ds


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    from .data import random_scene_spec, stream_seed, synthetic_sample, write_depth_png, write_manifest, write_rgb

    os.makedirs(args.out, exist_ok=True)
    for sub in ("image", "sparse", "gt", "scene"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    records = []
    for i in range(args.count):
        s = synthetic_sample(args.seed, i, *args.size, sparse_count=args.sparse_count, split=args.split)
        name = f"{i:05d}"
        rec = (f"image/{name}.png", f"sparse/{name}.png", f"gt/{name}.png")
        write_rgb(os.path.join(args.out, rec[0]), s.image)
        write_depth_png(os.path.join(args.out, rec[1]), s.sparse)
        write_depth_png(os.path.join(args.out, rec[2]), s.gt)
        spec = random_scene_spec(stream_seed(args.seed, f"scene/{args.split}", i))
        with open(os.path.join(args.out, "scene", f"{name}.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(spec.to_text())
        records.append(rec)
    write_manifest(os.path.join(args.out, "manifest.txt"), records)
    with open(os.path.join(args.out, "header.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header(args.seed, args) + "\n")
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .data import stream_seed
    from .network import build
    from .tensor import precision
    from .trainer import train

    train_ds = _dataset(args.train_manifest, args.synthetic_train, "train", args, args.grayscale)
    val_ds = _dataset(args.val_manifest, args.synthetic_val, "val", args, args.grayscale)
    cfg = _net_config(args, train_ds.image.shape[2:])
    with precision(args.precision):
        model = build(cfg, seed=stream_seed(args.seed, "init"))
    every = max(1, args.iters // 20)

    def progress(it, loss):
        if it % every == 0 or it == args.iters - 1:
            print(f"iter {it} loss {loss:.6g}", flush=True)

    res = train(model, train_ds, _train_config(args), run_dir=args.out, val=val_ds, progress=progress)
    print(res.metrics.to_text(), end="")
    print(f"run directory: {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    from .network import FusionScheme
    from .trainer import format_ablation, run_ablation

    schemes = [FusionScheme.parse(s) for s in args.schemes.split(",")]
    train_ds = _dataset(args.train_manifest, args.synthetic_train, "train", args, args.grayscale)
    val_ds = _dataset(args.val_manifest, args.synthetic_val, "val", args, args.grayscale)
    cfg = _net_config(args, train_ds.image.shape[2:])
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(scheme, seed, it, loss):
        if it % max(1, args.iters // 10) == 0:
            print(f"{scheme.value} seed={seed} iter {it} loss {loss:.6g}", flush=True)

    rows = run_ablation(schemes, cfg, _train_config(args), train_ds, val_ds, seeds=seeds,
                        run_root=args.out, progress=progress)
    table = format_ablation(rows)
    print(table)
    if args.out:
        with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(header(args.seed, args) + "\n" + table + "\n")
        with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("scheme,rmse_mm,mae_mm,irmse_per_km,imae_per_km\n")
            for r in rows:
                fh.write(f"{r.scheme.value},{r.rmse_mm!r},{r.mae_mm!r},{r.irmse_per_km!r},{r.imae_per_km!r}\n")
    return EXIT_OK


def cmd_eval(args):
    from .checkpoint import load_model
    from .trainer import evaluate_model

    model = load_model(args.checkpoint)
    ds = _dataset(args.manifest, args.synthetic, args.split, args, model.config.image_channels == 1)
    report = evaluate_model(model, ds, args.batch_size)
    print(report.to_text(), end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n" if args.out.endswith(".json") else report.to_text())
    return EXIT_OK


def _pad_to(arr, step, mode):
    h, w = arr.shape[-2:]
    ph, pw = (-h) % step, (-w) % step
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad, mode=mode)


def _complete_inputs(model, image_path, sparse_path):
    from .data import DataError, depth_from_raw, read_depth_png, read_rgb

    image = read_rgb(image_path)
    sparse = depth_from_raw(read_depth_png(sparse_path))
    if image.shape[1:] != sparse.shape:
        raise DataError(f"size mismatch: image {image.shape[1:]}, sparse {sparse.shape}")
    if model.config.image_channels == 1:
        image = image.mean(axis=0, keepdims=True)
    step = 2 ** model.config.stage_count
    h, w = sparse.shape
    img = _pad_to(image, step, "edge")[None]
    sp = _pad_to(sparse, step, "constant")[None, None]
    return img.astype(np.float32), sp.astype(np.float32), (h, w)


def cmd_complete(args):
    from .checkpoint import load_model
    from .data import write_depth_png, write_rgb
    from .trainer import predict
    from .viz import depth_to_color

    model = load_model(args.checkpoint)
    img, sp, (h, w) = _complete_inputs(model, args.image, args.sparse)
    dense = predict(model, img, sp)[0, 0, :h, :w]
    dense = np.clip(dense, 0.0, 255.99)
    write_depth_png(args.out, dense)
    if args.color:
        write_rgb(args.color, depth_to_color(dense, value_range=args.range))
    print(f"dense depth {h}x{w} in [{dense.min():.3f}, {dense.max():.3f}] m written to {args.out}")
    return EXIT_OK


def cmd_cost(args):
    from .cost import analyze, measure, to_csv

    report = analyze(args.M, args.N, args.K, args.H, args.B, args.bytes)
    print(report.to_table())
    if args.measure:
        m = measure(args.M, args.N, args.K, args.H, args.B, seed=args.seed)
        if m.analytic_only:
            print(f"measured: factorized kernels {m.fact_kernel_bytes} bytes; naive path analytic only (over cap)")
        else:
            print(f"measured: naive kernels {m.naive_kernel_bytes} bytes in {m.naive_seconds:.4f} s, "
                  f"factorized {m.fact_kernel_bytes} bytes in {m.fact_seconds:.4f} s "
                  f"(time ratio {m.time_ratio:.1f}x)")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(to_csv([report]))
    return EXIT_OK


def cmd_viz_kernels(args):
    from .checkpoint import load_model
    from .data import write_rgb
    from .tensor import Tensor, no_grad
    from .viz import field_to_color, kernels_to_field

    model = load_model(args.checkpoint)
    s = model.config.stage_count
    if not 0 <= args.stage < s:
        raise UsageError(f"--stage must lie in [0, {s - 1}]")
    fusion = model.fusions[args.stage]
    if fusion.guide is None:
        raise UsageError(f"fusion stage {args.stage} of a {model.config.fusion.value} model has no guided module")
    if model.config.kernel_size != 3:
        raise UsageError("kernel visualisation needs K=3")
    if not 0 <= args.channel < fusion.guide.in_channels:
        raise UsageError(f"--channel must lie in [0, {fusion.guide.in_channels - 1}]")
    img, sp, (h, w) = _complete_inputs(model, args.image, args.sparse)
    rec = {}
    model.eval()
    with no_grad():
        model(Tensor(img), Tensor(sp), record=rec)
        key = ("guide.enc" if model.config.fusion.placement == "EE" else "guide.dec") + str(args.stage)
        cw, _ = fusion.guide.kernels(rec[key])
    field = kernels_to_field(cw, channel=args.channel)
    scale = 2 ** args.stage
    field = field[: -(-h // scale), : -(-w // scale)]
    write_rgb(args.out, field_to_color(field, percentile=args.percentile))
    mag = np.hypot(field[..., 0], field[..., 1])
    print(f"stage {args.stage} channel {args.channel}: field {field.shape[0]}x{field.shape[1]}, "
          f"median |v| {np.median(mag):.4g}; written to {args.out}")
    return EXIT_OK


def cmd_selftest(args):
    from . import selftest

    results = selftest.run(args.seed)
    for name, ok, detail in results:
        print(f"{name:14s} {'pass' if ok else 'FAIL'}  {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        print(f"error[selftest]: failed groups: {','.join(failed)}", file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="guidedconv", description="Guided convolution depth completion toolkit.",
                     epilog=EXIT_CODES_HELP, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"guidedconv {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES_HELP, formatter_class=fmt)
        p.add_argument("--seed", type=int, default=0, help="root seed for every random stream (default 0)")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "Write a synthetic dataset (PNG triples, scene specs, manifest).")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=_hw, default=(64, 128), help="scene size HxW (default 64x128)")
    p.add_argument("--sparse-count", type=int, default=400, help="sparse points per scene (default 400)")
    p.add_argument("--split", default="train", help="name of the random stream, e.g. train or val (default train)")

    p = command("train", cmd_train, "Train one network; writes config.txt, loss.csv, checkpoints/, metrics_val.txt.")
    p.add_argument("--out", required=True, help="run directory")
    _add_net_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)

    p = command("ablate", cmd_ablate, "Train several fusion schemes with identical seeds, data and budget.")
    p.add_argument("--schemes", default="DE_Guided,Concat,Add", help="comma-separated fusion schemes")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds averaged per scheme (default 0,1,2)")
    p.add_argument("--out", help="root directory for per-run outputs and ablation.txt/.csv")
    _add_net_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)

    p = command("eval", cmd_eval, "Evaluate a checkpoint on a manifest or synthetic split.")
    p.add_argument("--checkpoint", required=True, help="GDC1 model checkpoint")
    p.add_argument("--manifest", help="manifest of image<TAB>sparse<TAB>gt lines")
    p.add_argument("--synthetic", type=int, default=64, help="synthetic scenes when no manifest (default 64)")
    p.add_argument("--split", default="val", help="synthetic stream name (default val)")
    p.add_argument("--size", type=_hw, default=(64, 128), help="synthetic scene size HxW (default 64x128)")
    p.add_argument("--sparse-count", type=int, default=400, help="sparse points per synthetic scene (default 400)")
    p.add_argument("--crop", type=_hw, help="bottom crop HxW for manifest samples")
    p.add_argument("--batch-size", type=int, default=8, help="inference batch size (default 8)")
    p.add_argument("--out", help="write the report here (.json for the nested form, else key=value)")

    p = command("complete", cmd_complete, "Densify one sparse depth PNG guided by its image.")
    p.add_argument("--checkpoint", required=True, help="GDC1 model checkpoint")
    p.add_argument("--image", required=True, help="8-bit RGB PNG/PPM")
    p.add_argument("--sparse", required=True, help="16-bit sparse depth PNG (meters*256, 0 = missing)")
    p.add_argument("--out", required=True, help="16-bit dense depth PNG to write")
    p.add_argument("--color", help="also write a colourised depth PNG here")
    p.add_argument("--range", type=float, nargs=2, metavar=("MIN", "MAX"), help="colour range in meters")

    p = command("cost", cmd_cost, "Kernel memory and MAC cost, naive vs factorized (GB = 2^30 bytes).")
    for dim, text in (("M", "input channels"), ("N", "output channels"), ("K", "kernel size"),
                      ("H", "feature height"), ("B", "feature width")):
        p.add_argument(f"--{dim}", type=int, required=True, help=text)
    p.add_argument("--bytes", type=int, default=4, help="bytes per element (default 4)")
    p.add_argument("--measure", action="store_true", help="also run both paths and record their kernel buffers")
    p.add_argument("--csv", help="export M,N,K,H,B,naive_bytes,fact_bytes,ratio to this CSV file")

    p = command("viz-kernels", cmd_viz_kernels, "Render one channel of guided kernels as a flow-coloured field.")
    p.add_argument("--checkpoint", required=True, help="GDC1 model checkpoint")
    p.add_argument("--image", required=True, help="8-bit RGB PNG/PPM")
    p.add_argument("--sparse", required=True, help="16-bit sparse depth PNG")
    p.add_argument("--stage", type=int, default=0, help="fusion stage (default 0, full resolution)")
    p.add_argument("--channel", type=int, default=0, help="depth-feature channel to show (default 0)")
    p.add_argument("--percentile", type=float, default=99.0, help="magnitude normalisation percentile (default 99)")
    p.add_argument("--out", required=True, help="PNG to write")

    command("selftest", cmd_selftest, "Run the embedded invariant checks and print pass/fail per group.")
    return parser


def _fail(category, message, code):
    message = " ".join(str(message).split())
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def main(argv=None):
    from .checkpoint import CheckpointError
    from .data import DataError
    from .trainer import NumericalFailure

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        print(header(args.seed, args), flush=True)
        # non-finite values are detected and reported explicitly (exit 4), not via numpy warnings
        with np.errstate(all="ignore"):
            return args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except NumericalFailure as exc:
        extra = f" (last checkpoint {exc.last_checkpoint})" if exc.last_checkpoint else ""
        return _fail("numeric", f"{exc}{extra}", EXIT_NUMERIC)
    except (OSError, DataError, CheckpointError, UnicodeDecodeError) as exc:
        return _fail("io", exc, EXIT_IO)
    except (ValueError, KeyError) as exc:
        return _fail("usage", f"invalid configuration: {exc}", EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
